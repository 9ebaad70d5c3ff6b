"""Procedural segmentation scenes with controllable domain shift.

Each sample is a 32x32 RGB canvas with a textured background and 2-5
shapes. Class 0 is background, then disk, rectangle, triangle and (only
when ``class_count`` is 5) cross. Shape colours come from a per-style
palette, so a model that has only seen one style must relearn the colour
mapping for another.

Masks are drawn before the domain transform and the transform only touches
the image, so the same seed gives the same masks under every transform.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError

CANVAS = 32
SIZE_LO, SIZE_HI = 3.0, 6.0
BG_JITTER = 0.015
CLASS_NAMES = ("background", "disk", "rectangle", "triangle", "cross")
LUMA = np.array([0.2126, 0.7152, 0.0722])

# palette[style][class]; style 0 colours have well separated luminance so a
# grayscale version stays segmentable.
PALETTES = (
    ((0.66, 0.50, 0.30), (0.90, 0.20, 0.10), (0.30, 0.90, 0.40), (0.10, 0.15, 0.65), (0.95, 0.85, 0.15)),
    ((0.40, 0.46, 0.58), (0.30, 0.90, 0.40), (0.10, 0.15, 0.65), (0.90, 0.20, 0.10), (0.95, 0.85, 0.15)),
    ((0.42, 0.55, 0.36), (0.10, 0.15, 0.65), (0.90, 0.20, 0.10), (0.30, 0.90, 0.40), (0.95, 0.85, 0.15)),
)

TRANSFORMS = {
    "identity": 0,
    "hue_shift": 1,
    "fog": 2,
    "noise": 1,
    "grayscale": 0,
    "inverted_intensity": 0,
}

_TRANSFORM_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_transform(text: str) -> tuple[str, tuple[float, ...]]:
    """``"fog(1.0, 0.5)"`` -> ``("fog", (1.0, 0.5))``."""
    m = _TRANSFORM_RE.match(text)
    if not m or m.group(1) not in TRANSFORMS:
        raise ConfigError("transform", f"unknown transform {text!r}; choose from {sorted(TRANSFORMS)}")
    kind = m.group(1)
    args = tuple(float(a) for a in m.group(2).split(",")) if m.group(2) and m.group(2).strip() else ()
    if len(args) != TRANSFORMS[kind]:
        raise ConfigError("transform", f"{kind} takes {TRANSFORMS[kind]} argument(s), got {len(args)}")
    return kind, args


def format_transform(kind: str, args: tuple[float, ...]) -> str:
    return kind if not args else f"{kind}({','.join(repr(float(a)) for a in args)})"


@dataclass(frozen=True)
class DomainSpec:
    name: str
    transform: str = "identity"
    class_count: int = 4
    samples_train: int = 200
    samples_val: int = 50
    seed: int = 0
    style: int = 0
    modality_flag: bool = False

    def __post_init__(self):
        kind, args = parse_transform(self.transform)
        object.__setattr__(self, "transform", format_transform(kind, args))
        if not 2 <= self.class_count <= len(CLASS_NAMES):
            raise ConfigError("class_count", f"must be in [2, {len(CLASS_NAMES)}], got {self.class_count}")
        if self.samples_train < 1 or self.samples_val < 1:
            raise ConfigError("samples", "train and val sizes must be >= 1")
        if not 0 <= self.style < len(PALETTES):
            raise ConfigError("style", f"must be in [0, {len(PALETTES)}), got {self.style}")


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)


@dataclass
class SegDataset:
    images: np.ndarray  # (N, H, W, 3) float64
    masks: np.ndarray  # (N, H, W) uint8

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> SegSample:
        return SegSample(self.images[i], self.masks[i])


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _background(rng: np.random.Generator, style: int) -> np.ndarray:
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    base = np.array(PALETTES[style][0]) + rng.normal(0, BG_JITTER, 3)
    if style == 0:
        angle = rng.uniform(0, np.pi)
        tex = 0.05 * np.sin((np.cos(angle) * xx + np.sin(angle) * yy) * rng.uniform(0.5, 0.9))
    elif style == 1:
        period = int(rng.integers(3, 6))
        tex = 0.05 * (((xx // period + yy // period) % 2) * 2 - 1)
    else:
        tex = gaussian_filter(rng.normal(0, 0.25, (CANVAS, CANVAS)), 1.5)
    return base + tex[..., None]


def _shape_mask(kind: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    cy, cx = rng.uniform(4, CANVAS - 4, 2)
    size = rng.uniform(SIZE_LO, SIZE_HI)
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if kind == 2:
        hy, hx = size * rng.uniform(0.6, 1.0, 2)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    if kind == 3:
        # upward isosceles triangle with apex at (cy - size, cx)
        top, bottom = cy - size, cy + size
        half = (yy - top) / (2 * size) * size
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    arm = size * 0.35
    return (((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= size))
            | ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= size)))


def render_scene(seed: int, split: int, index: int, class_count: int,
                 style: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(seed, split, index)
    image = _background(rng, style)
    mask = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    for _ in range(int(rng.integers(2, 6))):
        kind = int(rng.integers(1, class_count))
        region = _shape_mask(kind, rng)
        colour = np.array(PALETTES[style][kind]) + rng.normal(0, 0.04, 3)
        image[region] = colour
        mask[region] = kind
    image += rng.normal(0, 0.02, image.shape)
    return np.clip(image, 0.0, 1.0), mask


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    t = np.deg2rad(degrees)
    u = np.ones(3) / np.sqrt(3)
    cross = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.cos(t) * np.eye(3) + np.sin(t) * cross + (1 - np.cos(t)) * np.outer(u, u)


FOG_LEVEL = 0.85


def apply_transform(image: np.ndarray, transform: str, rng: np.random.Generator) -> np.ndarray:
    kind, args = parse_transform(transform)
    if kind == "identity":
        out = image
    elif kind == "hue_shift":
        out = image @ _hue_matrix(args[0]).T
    elif kind == "fog":
        sigma, contrast = args
        blurred = gaussian_filter(image, sigma=(sigma, sigma, 0))
        out = contrast * blurred + (1 - contrast) * FOG_LEVEL
    elif kind == "noise":
        out = image + rng.normal(0, args[0], image.shape)
    elif kind == "grayscale":
        out = np.repeat((image @ LUMA)[..., None], 3, axis=-1)
    else:
        out = 1.0 - image
    return np.clip(out, 0.0, 1.0)


def _split(spec: DomainSpec, split: int, count: int) -> SegDataset:
    images = np.empty((count, CANVAS, CANVAS, 3))
    masks = np.empty((count, CANVAS, CANVAS), dtype=np.uint8)
    for i in range(count):
        img, mask = render_scene(spec.seed, split, i, spec.class_count, spec.style)
        images[i] = apply_transform(img, spec.transform, _rng(spec.seed, split, i, 1))
        masks[i] = mask
    return SegDataset(images, masks)


def generate_domain(spec: DomainSpec) -> tuple[SegDataset, SegDataset]:
    """(train, val) sets, fully determined by the spec."""
    return _split(spec, 0, spec.samples_train), _split(spec, 1, spec.samples_val)


def _presets(seed: int) -> dict[str, list[DomainSpec]]:
    def s(i: int) -> int:
        return seed * 1000 + i

    return {
        "weather5": [
            DomainSpec("clear", "identity", seed=s(0)),
            DomainSpec("fog", "fog(1.0,0.4)", seed=s(1)),
            DomainSpec("rain", "noise(0.5)", seed=s(2)),
            DomainSpec("snow", "hue_shift(120.0)", seed=s(3)),
            DomainSpec("night", "inverted_intensity", seed=s(4)),
        ],
        "geo3": [
            DomainSpec("geo_a", style=0, seed=s(0)),
            DomainSpec("geo_b", style=1, seed=s(1)),
            DomainSpec("geo_c", style=2, class_count=5, seed=s(2)),
        ],
        "modality3": [
            DomainSpec("rgb", seed=s(0), modality_flag=True),
            DomainSpec("ir", "inverted_intensity", seed=s(1), modality_flag=True),
            DomainSpec("gray", "grayscale", seed=s(2), modality_flag=True),
        ],
        "modality3b": [
            DomainSpec("rgb", seed=s(0), modality_flag=True),
            DomainSpec("gray", "grayscale", seed=s(1), modality_flag=True),
            DomainSpec("ir", "inverted_intensity", seed=s(2), modality_flag=True),
        ],
    }


PRESET_NAMES = ("weather5", "geo3", "modality3", "modality3b")


def preset(name: str, seed: int = 0) -> list[DomainSpec]:
    table = _presets(seed)
    if name not in table:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {list(PRESET_NAMES)}")
    return table[name]
