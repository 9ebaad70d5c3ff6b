"""Prototype gating: one mean frozen feature per task, nearest by cosine.

Nothing in here is trained. Prototype vectors are stored read-only and the
router is a pure function of (feature, prototypes).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CoverageError, EmptyDatasetError, RoutingError, ShapeError, UnknownTaskError
from .nn import extract_feature

DEGENERATE_SIMILARITY = -2.0
NORM_EPS = 1e-12


@dataclass(frozen=True)
class Prototype:
    task_id: int
    vector: np.ndarray
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise EmptyDatasetError("prototype needs at least one sample")
        v = np.array(self.vector, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)


def compute_prototype(features: Sequence[np.ndarray] | np.ndarray, task_id: int,
                      sample_ids: Sequence[int] | None = None) -> Prototype:
    """Element-wise mean of the features, summed in ascending sample-id order."""
    if len(features) == 0:
        raise EmptyDatasetError(f"no features for task {task_id}")
    rows = [np.asarray(f, dtype=np.float64) for f in features]
    width = rows[0].shape
    if len(width) != 1 or any(r.shape != width for r in rows):
        raise ShapeError("features must be 1-d vectors of equal length")
    if sample_ids is not None:
        if len(sample_ids) != len(rows):
            raise ShapeError("sample_ids and features differ in length")
        rows = [rows[i] for i in np.argsort(np.asarray(sample_ids), kind="stable")]
    total = np.zeros(width)
    for r in rows:
        total += r
    return Prototype(task_id, total / len(rows), len(rows))


def cosine_similarity(z: np.ndarray, p: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if z.shape != p.shape:
        raise ShapeError(f"length mismatch: {z.shape} vs {p.shape}")
    nz, np_ = np.linalg.norm(z), np.linalg.norm(p)
    if nz < NORM_EPS or np_ < NORM_EPS:
        return DEGENERATE_SIMILARITY
    return float(np.clip(np.dot(z, p) / (nz * np_), -1.0, 1.0))


def route(z: np.ndarray, prototypes: Sequence[Prototype]) -> int:
    """Task id of the most similar prototype; ties go to the lowest task id."""
    if not prototypes:
        raise RoutingError("no prototypes to route to")
    best_id, best_sim = None, -np.inf
    for proto in sorted(prototypes, key=lambda p: p.task_id):
        sim = cosine_similarity(z, proto.vector)
        if sim > best_sim:
            best_id, best_sim = proto.task_id, sim
    return best_id


def route_images(registry, images: np.ndarray) -> np.ndarray:
    feats = extract_feature(registry.base, images)
    if feats.ndim == 1:
        feats = feats[None]
    return np.array([route(z, registry.prototypes) for z in feats], dtype=np.int64)


def infer(registry, image: np.ndarray, oracle: int | None = None) -> tuple[int, np.ndarray]:
    """Gated inference, or oracle selection when ``oracle`` is a task id."""
    if len(registry) == 0:
        raise RoutingError("registry is empty")
    if oracle is not None:
        if not 0 <= oracle < len(registry):
            raise UnknownTaskError(f"oracle task {oracle} not in registry of {len(registry)}")
        task = oracle
    else:
        task = route(extract_feature(registry.base, image), registry.prototypes)
    return task, registry.assemble(task)(image)


def confusion_matrix(registry, validation: Mapping[int, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Row-normalised routing counts: entry (i, j) is the share of task-i images sent to j."""
    n = len(registry)
    if isinstance(validation, Mapping):
        sets = validation
    else:
        sets = dict(enumerate(validation))
    missing = [t for t in range(n) if t not in sets or len(sets[t]) == 0]
    if missing:
        raise CoverageError(f"no validation images for tasks {missing}")
    extra = sorted(set(sets) - set(range(n)))
    if extra:
        raise CoverageError(f"validation data for unregistered tasks {extra}")
    counts = np.zeros((n, n))
    for t in range(n):
        routed = route_images(registry, np.asarray(sets[t]))
        counts[t] = np.bincount(routed, minlength=n)
    return counts / counts.sum(axis=1, keepdims=True)


def confusion_csv(matrix: np.ndarray, names: Sequence[str]) -> str:
    out = io.StringIO()
    out.write(",".join(names) + "\n")
    for row in matrix:
        out.write(",".join(f"{v:.4f}" for v in row) + "\n")
    return out.getvalue()
