"""Deterministic float64 convolutional segmentation core.

The network is three same-padded, stride-1 convolutions::

    conv1 3x3 (C_in -> F) -> ReLU -> conv2 3x3 (F -> F) -> ReLU -> head 1x1 (F -> C)

Every kernel is stored in its matrix view ``(F_out, F_in * kh * kw)`` so a
low-rank delta ``B @ A`` can be added to it directly. Inputs are channel-last
``(H, W, C_in)`` images or ``(N, H, W, C_in)`` batches.

Adapters are duck-typed: anything with ``A`` (r x k), ``B`` (d x r) and
``scale`` attributes works, which keeps this module free of the LoRA code.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import FrozenParameterError, InvalidLabelError, ShapeError

IGNORE_INDEX = 255
LAYER_NAMES = ("conv1", "conv2", "head")


@dataclass
class LinearizedLayer:
    name: str
    weight: np.ndarray  # (d, k)
    bias: np.ndarray  # (d,)
    kernel_size: int
    frozen: bool = False

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[1]

    @property
    def in_channels(self) -> int:
        return self.k // (self.kernel_size * self.kernel_size)

    @property
    def kernel(self) -> np.ndarray:
        """The weight viewed as ``(F_out, F_in, kh, kw)``."""
        ks = self.kernel_size
        return self.weight.reshape(self.d, self.in_channels, ks, ks)

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def freeze(self) -> None:
        self.frozen = True
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    def copy(self, frozen: bool | None = None) -> "LinearizedLayer":
        return LinearizedLayer(
            self.name,
            np.array(self.weight, dtype=np.float64),
            np.array(self.bias, dtype=np.float64),
            self.kernel_size,
            self.frozen if frozen is None else frozen,
        )


def init_layer(name: str, in_channels: int, out_channels: int, kernel_size: int,
               rng: np.random.Generator) -> LinearizedLayer:
    k = in_channels * kernel_size * kernel_size
    weight = rng.normal(0.0, np.sqrt(2.0 / k), size=(out_channels, k))
    return LinearizedLayer(name, weight, np.zeros(out_channels), kernel_size)


@dataclass
class TinySegNet:
    layers: list[LinearizedLayer]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def width(self) -> int:
        return self.layers[0].d

    @property
    def num_classes(self) -> int:
        return self.layers[-1].d

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    @property
    def frozen(self) -> bool:
        return all(layer.frozen for layer in self.layers)

    def layer(self, name: str) -> LinearizedLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def freeze(self) -> None:
        for layer in self.layers:
            layer.freeze()

    def copy(self, frozen: bool | None = None) -> "TinySegNet":
        return TinySegNet([layer.copy(frozen) for layer in self.layers])

    def checksum(self) -> str:
        return checksum(a for layer in self.layers for a in (layer.weight, layer.bias))


def build_net(in_channels: int = 3, width: int = 32, num_classes: int = 4,
              seed: int = 0) -> TinySegNet:
    """He-initialised network with zero biases."""
    rng = np.random.default_rng(seed)
    return TinySegNet([
        init_layer("conv1", in_channels, width, 3, rng),
        init_layer("conv2", width, width, 3, rng),
        init_layer("head", width, num_classes, 1, rng),
    ])


def checksum(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# -- convolution as matrix products -------------------------------------------


def im2col(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, ks*ks*C) patches, column order (i, j, c).

    Weights keep their (c, i, j) column order; :func:`col_perm` maps between them.
    """
    n, h, w, c = x.shape
    if kernel_size == 1:
        return x.reshape(n * h * w, c)
    p = kernel_size // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, kernel_size, kernel_size, c))
    for i in range(kernel_size):
        for j in range(kernel_size):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, kernel_size * kernel_size * c)


def col2im(dcols: np.ndarray, shape: tuple, kernel_size: int) -> np.ndarray:
    n, h, w, c = shape
    if kernel_size == 1:
        return dcols.reshape(shape)
    p = kernel_size // 2
    d = dcols.reshape(n, h, w, kernel_size, kernel_size, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(kernel_size):
        for j in range(kernel_size):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :]


_PERMS: dict[tuple[int, int], np.ndarray] = {}


def col_perm(channels: int, kernel_size: int) -> np.ndarray:
    """Index array taking (c, i, j) weight columns to the (i, j, c) patch order."""
    key = (channels, kernel_size)
    if key not in _PERMS:
        idx = np.arange(channels * kernel_size ** 2).reshape(channels, kernel_size, kernel_size)
        _PERMS[key] = idx.transpose(1, 2, 0).ravel()
    return _PERMS[key]


def _patch_order(layer: "LinearizedLayer", m: np.ndarray) -> np.ndarray:
    return m if layer.kernel_size == 1 else m[:, col_perm(layer.in_channels, layer.kernel_size)]


def _weight_order(layer: "LinearizedLayer", m: np.ndarray) -> np.ndarray:
    if layer.kernel_size == 1:
        return m
    out = np.empty_like(m)
    out[:, col_perm(layer.in_channels, layer.kernel_size)] = m
    return out


def _check_adapter(layer: LinearizedLayer, adapter) -> None:
    r = adapter.A.shape[0]
    if adapter.A.shape != (r, layer.k) or adapter.B.shape != (layer.d, r):
        raise ShapeError(
            f"adapter for {layer.name!r} has A{adapter.A.shape}, B{adapter.B.shape}; "
            f"layer expects d={layer.d}, k={layer.k}"
        )


def _effective_layers(net: TinySegNet, head: LinearizedLayer | None) -> list[LinearizedLayer]:
    layers = list(net.layers)
    if head is not None:
        if head.k != layers[-1].k or head.kernel_size != layers[-1].kernel_size:
            raise ShapeError(f"replacement head expects k={layers[-1].k}, got {head.k}")
        layers[-1] = head
    return layers


def _as_batch(image: np.ndarray, in_channels: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != in_channels:
        raise ShapeError(f"expected (H, W, {in_channels}) image or batch, got shape {np.shape(image)}")
    return x, single


@dataclass
class _Cache:
    layers: list
    adapters: list
    cols: list = field(default_factory=list)
    in_shapes: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    out_shape: tuple = ()


def forward_cached(net: TinySegNet, images: np.ndarray,
                   adapters: Mapping[str, object] | None = None,
                   head: LinearizedLayer | None = None,
                   merged: bool = False) -> tuple[np.ndarray, _Cache]:
    adapters = adapters or {}
    x, _ = _as_batch(images, net.in_channels)
    layers = _effective_layers(net, head)
    unknown = set(adapters) - {layer.name for layer in layers}
    if unknown:
        raise ShapeError(f"adapters for unknown layers: {sorted(unknown)}")
    cache = _Cache(layers, [adapters.get(layer.name) for layer in layers])
    n, h, w, _ = x.shape
    for idx, (layer, ad) in enumerate(zip(cache.layers, cache.adapters)):
        if x.shape[-1] != layer.in_channels:
            raise ShapeError(f"{layer.name} expects {layer.in_channels} channels, got {x.shape[-1]}")
        cols = im2col(x, layer.kernel_size)
        if ad is None:
            z = cols @ _patch_order(layer, layer.weight).T
        else:
            _check_adapter(layer, ad)
            if merged:
                z = cols @ _patch_order(layer, layer.weight + ad.scale * (ad.B @ ad.A)).T
            else:
                z = (cols @ _patch_order(layer, layer.weight).T
                     + ad.scale * ((cols @ _patch_order(layer, ad.A).T) @ ad.B.T))
        z += layer.bias
        cache.cols.append(cols)
        cache.in_shapes.append(x.shape)
        cache.pre.append(z)
        if idx < len(cache.layers) - 1:
            x = np.maximum(z, 0.0).reshape(n, h, w, layer.d)
        else:
            x = z.reshape(n, h, w, layer.d)
    cache.out_shape = x.shape
    return x, cache


def forward(net: TinySegNet, image: np.ndarray,
            adapters: Mapping[str, object] | None = None,
            head: LinearizedLayer | None = None,
            merged: bool = False) -> np.ndarray:
    """Logits for one image ``(H, W, C_in)`` or a batch ``(N, H, W, C_in)``.

    With ``merged=True`` each adapted layer uses ``W + scale*B@A`` directly;
    otherwise the low-rank path ``W x + scale*B(A x)`` is evaluated.
    """
    x, single = _as_batch(image, net.in_channels)
    logits, _ = forward_cached(net, x, adapters, head, merged)
    return logits[0] if single else logits


def extract_feature(net: TinySegNet, image: np.ndarray) -> np.ndarray:
    """Global-average-pooled post-ReLU conv2 features of the unadapted net."""
    x, single = _as_batch(image, net.in_channels)
    n, h, w, _ = x.shape
    for layer in net.layers[:2]:
        z = im2col(x, layer.kernel_size) @ _patch_order(layer, layer.weight).T + layer.bias
        x = np.maximum(z, 0.0).reshape(n, h, w, layer.d)
    z = x.mean(axis=(1, 2))
    return z[0] if single else z


# -- loss and gradients --------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, masks: np.ndarray,
                          ignore_index: int = IGNORE_INDEX) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross entropy over non-ignored pixels and its logit gradient."""
    c = logits.shape[-1]
    masks = np.asarray(masks)
    if masks.shape != logits.shape[:-1]:
        raise ShapeError(f"mask shape {masks.shape} does not match logits {logits.shape[:-1]}")
    labels = masks.astype(np.int64).ravel()
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise InvalidLabelError(f"label {labels[bad][0]} outside [0, {c}) and not {ignore_index}")
    flat = logits.reshape(-1, c)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.flatnonzero(valid)
    loss = -log_p[rows, labels[rows]].sum() / count
    grad = np.exp(log_p)
    grad[rows, labels[rows]] -= 1.0
    grad[~valid] = 0.0
    grad /= count
    return float(loss), grad.reshape(logits.shape)


def trainable_refs(net: TinySegNet, adapters: Mapping[str, object] | None = None,
                   head: LinearizedLayer | None = None) -> dict[str, np.ndarray]:
    """Live arrays of every gradient-bearing value, keyed by parameter name.

    Frozen layers contribute nothing; adapter factors and unfrozen layers do.
    """
    refs: dict[str, np.ndarray] = {}
    for layer in _effective_layers(net, head):
        if not layer.frozen:
            refs[f"{layer.name}.weight"] = layer.weight
            refs[f"{layer.name}.bias"] = layer.bias
    for name, ad in (adapters or {}).items():
        refs[f"{name}.lora_A"] = ad.A
        refs[f"{name}.lora_B"] = ad.B
    return refs


def backward(cache: _Cache, dlogits: np.ndarray, names: set[str]) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    layers = cache.layers
    wanted = [any(n.startswith(layer.name + ".") for n in names) for layer in layers]
    if not any(wanted):
        return grads
    first = wanted.index(True)
    g = dlogits.reshape(-1, layers[-1].d)
    for idx in range(len(layers) - 1, first - 1, -1):
        layer, ad, cols = layers[idx], cache.adapters[idx], cache.cols[idx]
        if idx < len(layers) - 1:
            g = g * (cache.pre[idx] > 0)
        pre = layer.name + "."
        if wanted[idx]:
            gw = _weight_order(layer, g.T @ cols)
            if pre + "weight" in names:
                grads[pre + "weight"] = gw
            if pre + "bias" in names:
                grads[pre + "bias"] = g.sum(axis=0)
            if ad is not None:
                if pre + "lora_A" in names:
                    grads[pre + "lora_A"] = ad.scale * (ad.B.T @ gw)
                if pre + "lora_B" in names:
                    grads[pre + "lora_B"] = ad.scale * (gw @ ad.A.T)
        if idx > first:
            dcols = g @ _patch_order(layer, layer.weight)
            if ad is not None:
                dcols += ad.scale * ((g @ ad.B) @ _patch_order(layer, ad.A))
            g = col2im(dcols, cache.in_shapes[idx], layer.kernel_size).reshape(-1, layer.in_channels)
    return grads


def loss_and_grad(net: TinySegNet, images: np.ndarray, masks: np.ndarray,
                  adapters: Mapping[str, object] | None = None,
                  head: LinearizedLayer | None = None,
                  trainable: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss and exact gradients for the trainable parameters.

    ``trainable`` defaults to everything :func:`trainable_refs` reports.
    Requesting a frozen layer's weight or bias raises FrozenParameterError.
    """
    refs = trainable_refs(net, adapters, head)
    names = set(refs) if trainable is None else set(trainable)
    missing = names - set(refs)
    if missing:
        raise FrozenParameterError(f"not trainable: {sorted(missing)}")
    x, single = _as_batch(images, net.in_channels)
    m = np.asarray(masks)
    if single:
        m = m[None]
    logits, cache = forward_cached(net, x, adapters, head)
    loss, dlogits = softmax_cross_entropy(logits, m)
    return loss, backward(cache, dlogits, names)


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             cfg: SgdConfig) -> dict[str, np.ndarray]:
    """In-place ``p -= lr * g`` for every parameter that has a gradient."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != np.shape(g):
            raise ShapeError(f"{name}: param {p.shape} vs grad {np.shape(g)}")
        p -= cfg.learning_rate * g
    return params


# -- training loop -------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` from a counter-based generator keyed on (seed, epoch)."""
    bitgen = np.random.Philox(key=np.uint64(seed % 2**64), counter=epoch)
    return np.random.Generator(bitgen).permutation(n)


def batches(n: int, cfg: SgdConfig, epoch: int) -> list[np.ndarray]:
    order = epoch_order(n, cfg.seed, epoch)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


Regularizer = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def fit(net: TinySegNet, images: np.ndarray, masks: np.ndarray, cfg: SgdConfig,
        adapters: Mapping[str, object] | None = None,
        head: LinearizedLayer | None = None,
        regularizer: Regularizer | None = None,
        schedule: Callable[[int], list[np.ndarray]] | None = None) -> list[tuple[int, float]]:
    """Plain minibatch SGD over every trainable value; returns (epoch, mean loss)."""
    refs = trainable_refs(net, adapters, head)
    if not refs:
        raise FrozenParameterError("nothing to train")
    schedule = schedule or (lambda epoch: batches(len(images), cfg, epoch))
    log = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in schedule(epoch):
            loss, grads = loss_and_grad(net, images[idx], masks[idx], adapters, head)
            if regularizer is not None:
                value, extra = regularizer(refs)
                loss += value
                for name, g in extra.items():
                    grads[name] = grads[name] + g
            sgd_step(refs, grads, cfg)
            total += loss * len(idx)
            seen += len(idx)
        log.append((epoch, total / seen))
    return log


def predict(net: TinySegNet, images: np.ndarray, adapters=None, head=None,
            num_classes: int | None = None, merged: bool = True,
            batch_size: int = 64) -> np.ndarray:
    """Argmax class map; ``num_classes`` restricts the argmax to the first logits."""
    x, single = _as_batch(images, net.in_channels)
    out = []
    for i in range(0, len(x), batch_size):
        logits = forward(net, x[i:i + batch_size], adapters, head, merged=merged)
        if num_classes is not None:
            logits = logits[..., :num_classes]
        out.append(logits.argmax(axis=-1))
    pred = np.concatenate(out).astype(np.int64)
    return pred[0] if single else pred
