"""Per-task LoRA experts over a frozen base network.

Lifecycle: ``begin_task`` -> ``train_expert`` -> ``register``. Registered
experts are frozen (read-only arrays) and the registry only ever appends,
so assembling an old task's model gives the same numbers forever.

Registry checkpoint layout (little-endian)::

    b"MILE" | u32 version=1 | u32 task_count
    base:   u32 layer_count, per layer: layer block
    per task:
        u32 task_id | u32 name_len | name | u32 class_count | u8 modality_flag
        u32 adapter_count | adapter blocks (see mile.lora)
        u8 has_head | [layer block]
        u32 F | f64 * F prototype | u32 sample_count

    layer block: u32 name_len | name | u32 F_out | u32 F_in | u32 kh | u32 kw
                 | f64 weight (F_out * F_in*kh*kw) | f64 bias (F_out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lora
from .errors import (CorruptHeaderError, DecodeError, ImmutabilityError, InvalidLabelError,
                     RegistrationError, SequencingError, TruncatedPayloadError, UnknownTaskError,
                     VersionMismatchError)
from .gating import Prototype, compute_prototype
from .lora import LoraAdapter
from .nn import (IGNORE_INDEX, LinearizedLayer, SgdConfig, TinySegNet, checksum, extract_feature,
                 fit, forward, init_layer, predict)

MAGIC = b"MILE"
VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    class_count: int
    modality_flag: bool = False


@dataclass
class Expert:
    task: TaskSpec
    adapters: dict[str, LoraAdapter]
    head: LinearizedLayer | None = None
    prototype: Prototype | None = None
    frozen: bool = False
    training_log: list = field(default_factory=list)

    @property
    def num_params(self) -> int:
        """Adapter factors plus replacement head; the prototype is counted separately."""
        n = sum(a.num_params for a in self.adapters.values())
        if self.head is not None:
            n += self.head.num_params
        return n

    def freeze(self) -> None:
        for a in self.adapters.values():
            a.freeze()
        if self.head is not None:
            self.head.freeze()
        self.training_log = tuple(self.training_log)
        self.frozen = True

    def checksum(self) -> str:
        arrays = []
        for name in sorted(self.adapters):
            a = self.adapters[name]
            arrays += [a.A, a.B, np.array([a.scale])]
        if self.head is not None:
            arrays += [self.head.weight, self.head.bias]
        if self.prototype is not None:
            arrays.append(self.prototype.vector)
        return checksum(arrays)


@dataclass
class InferenceModel:
    """A base network with one expert folded in; calling it returns logits."""

    net: TinySegNet
    task_id: int
    adapters: dict | None = None

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return forward(self.net, image, self.adapters)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict(self.net, images, self.adapters)


class ExpertRegistry:
    """Frozen base network plus an append-only list of frozen experts."""

    def __init__(self, base: TinySegNet, rank: int = 4):
        base.freeze()
        self.base = base
        self.rank = rank
        self.experts: list[Expert] = []
        self._base_checksum = base.checksum()

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def prototypes(self) -> list[Prototype]:
        return [e.prototype for e in self.experts]

    @property
    def tasks(self) -> list[TaskSpec]:
        return [e.task for e in self.experts]

    def adaptable_layers(self, class_count: int) -> list[LinearizedLayer]:
        """Every layer gets an adapter, except the head when it is replaced."""
        if class_count == self.base.num_classes:
            return list(self.base.layers)
        return list(self.base.layers[:-1])

    def base_intact(self) -> bool:
        return self.base.checksum() == self._base_checksum

    def expert(self, task_id: int) -> Expert:
        if not 0 <= task_id < len(self.experts):
            raise UnknownTaskError(f"task {task_id} not in registry of {len(self.experts)}")
        return self.experts[task_id]

    def assemble(self, task_id: int, merged: bool = True) -> InferenceModel:
        return assemble(self, task_id, merged)


def _layer_seed(seed: int, task_id: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, task_id, slot]).generate_state(1)[0])


def begin_task(registry: ExpertRegistry, spec: TaskSpec, r: int, seed: int) -> Expert:
    """Fresh expert for ``spec``: zero-delta adapters, new head iff the class count differs."""
    if spec.task_id != len(registry):
        raise SequencingError(f"expected task_id {len(registry)}, got {spec.task_id}")
    adapters = {}
    for slot, layer in enumerate(registry.adaptable_layers(spec.class_count)):
        adapters[layer.name] = lora.init_adapter(layer, r, _layer_seed(seed, spec.task_id, slot))
    head = None
    if spec.class_count != registry.base.num_classes:
        base_head = registry.base.layers[-1]
        rng = np.random.default_rng(_layer_seed(seed, spec.task_id, 1000))
        head = init_layer("head", base_head.in_channels, spec.class_count, base_head.kernel_size, rng)
    return Expert(spec, adapters, head)


def task_features(registry: ExpertRegistry, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([extract_feature(registry.base, images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def task_prototype(registry: ExpertRegistry, images: np.ndarray, task_id: int) -> Prototype:
    return compute_prototype(task_features(registry, images), task_id)


def _check_labels(masks: np.ndarray, class_count: int) -> None:
    m = np.asarray(masks)
    bad = (m != IGNORE_INDEX) & (m >= class_count)
    if bad.any():
        raise InvalidLabelError(f"label {int(m[bad][0])} out of range for {class_count} classes")


def train_expert(registry: ExpertRegistry, expert: Expert, images: np.ndarray,
                 masks: np.ndarray, cfg: SgdConfig) -> Expert:
    """Train only the expert's adapters (and head); also fixes its prototype."""
    if expert.frozen:
        raise ImmutabilityError(f"expert for task {expert.task.task_id} is frozen")
    _check_labels(masks, expert.task.class_count)
    expert.prototype = task_prototype(registry, images, expert.task.task_id)
    log = fit(registry.base, images, masks, cfg, expert.adapters, expert.head)
    expert.training_log.extend(log)
    return expert


def register(registry: ExpertRegistry, expert: Expert,
             prototype: Prototype | None = None) -> ExpertRegistry:
    tid = expert.task.task_id
    if tid < len(registry):
        raise RegistrationError(f"task {tid} already registered")
    if tid != len(registry):
        raise SequencingError(f"expected task_id {len(registry)}, got {tid}")
    if prototype is not None:
        expert.prototype = prototype
    if expert.prototype is None or expert.prototype.task_id != tid:
        raise RegistrationError(f"expert {tid} needs a prototype for the same task")
    expert.freeze()
    registry.experts.append(expert)
    return registry


def assemble(registry: ExpertRegistry, task_id: int, merged: bool = True) -> InferenceModel:
    """Inference model for one task; the merged form folds ``B @ A`` into new weights."""
    expert = registry.expert(task_id)
    layers = []
    for layer in registry.base.layers:
        if layer.name == "head" and expert.head is not None:
            layer = expert.head
        ad = expert.adapters.get(layer.name)
        weight = lora.merge(layer.weight, ad) if (merged and ad is not None) else layer.weight
        layers.append(LinearizedLayer(layer.name, weight, layer.bias, layer.kernel_size, frozen=True))
    net = TinySegNet(layers)
    return InferenceModel(net, task_id, None if merged else expert.adapters)


# -- checkpoint codec ----------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"checkpoint truncated at byte {len(self.buf)} "
                                        f"(needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def text(self) -> str:
        raw = bytes(self.take(self.u32()))
        try:
            return raw.decode()
        except UnicodeDecodeError as exc:
            raise CorruptHeaderError("name is not utf-8") from exc

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def _text(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def _layer_block(layer: LinearizedLayer) -> bytes:
    ks = layer.kernel_size
    return b"".join([
        _text(layer.name),
        struct.pack("<IIII", layer.d, layer.in_channels, ks, ks),
        np.ascontiguousarray(layer.weight, dtype="<f8").tobytes(),
        np.ascontiguousarray(layer.bias, dtype="<f8").tobytes(),
    ])


def _read_layer(rd: _Reader) -> LinearizedLayer:
    name = rd.text()
    d, cin, kh, kw = struct.unpack("<IIII", rd.take(16))
    if kh != kw or d == 0 or cin == 0:
        raise CorruptHeaderError(f"bad layer shape {(d, cin, kh, kw)} for {name!r}")
    k = cin * kh * kw
    weight = rd.floats(d * k).reshape(d, k)
    bias = rd.floats(d)
    return LinearizedLayer(name, weight, bias, kh)


def save_registry(registry: ExpertRegistry) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, len(registry), len(registry.base.layers))]
    parts += [_layer_block(layer) for layer in registry.base.layers]
    for e in registry.experts:
        t = e.task
        parts += [struct.pack("<I", t.task_id), _text(t.name),
                  struct.pack("<IB", t.class_count, int(t.modality_flag)),
                  struct.pack("<I", len(e.adapters))]
        parts += [lora.save_adapter(e.adapters[name]) for name in e.adapters]
        parts.append(struct.pack("<B", e.head is not None))
        if e.head is not None:
            parts.append(_layer_block(e.head))
        v = e.prototype.vector
        parts += [struct.pack("<I", v.size), np.ascontiguousarray(v, dtype="<f8").tobytes(),
                  struct.pack("<I", e.prototype.sample_count)]
    return b"".join(parts)


def load_registry(data: bytes) -> ExpertRegistry:
    rd = _Reader(data)
    head = bytes(data[:4])
    if head != MAGIC[:len(head)] or not head:
        raise CorruptHeaderError(f"bad checkpoint magic {head!r}")
    rd.take(4)
    version = rd.u32()
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    count, n_layers = rd.u32(), rd.u32()
    base = TinySegNet([_read_layer(rd) for _ in range(n_layers)])
    experts = []
    rank = None
    for expected in range(count):
        tid = rd.u32()
        if tid != expected:
            raise CorruptHeaderError(f"task id {tid} out of order (expected {expected})")
        name = rd.text()
        class_count, flag = struct.unpack("<IB", rd.take(5))
        spec = TaskSpec(tid, name, class_count, bool(flag))
        adapters = {}
        for _ in range(rd.u32()):
            ad, rd.pos = lora.read_adapter(rd.buf, rd.pos)
            adapters[ad.layer_name] = ad
            rank = ad.r
        head = _read_layer(rd) if rd.u8() else None
        width = rd.u32()
        vector = rd.floats(width)
        proto = Prototype(tid, vector, rd.u32())
        experts.append(Expert(spec, adapters, head, proto))
    if rd.pos != len(data):
        raise DecodeError(f"{len(data) - rd.pos} trailing bytes in checkpoint")
    registry = ExpertRegistry(base, rank or 4)
    for e in experts:
        register(registry, e)
    return registry


def save_registry_file(registry: ExpertRegistry, path: str | Path) -> None:
    Path(path).write_bytes(save_registry(registry))


def load_registry_file(path: str | Path) -> ExpertRegistry:
    return load_registry(Path(path).read_bytes())


