import numpy as np
import pytest

from mile import lora
from mile.nn import build_net


def naive_conv(image, kernel, bias):
    """Direct zero-padded convolution; image (H, W, C_in), kernel (F_out, F_in, kh, kw)."""
    h, w, _ = image.shape
    f_out, f_in, kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, f_out))
    for y in range(h):
        for x in range(w):
            for o in range(f_out):
                acc = bias[o]
                for c in range(f_in):
                    for i in range(kh):
                        for j in range(kw):
                            yy, xx = y + i - ph, x + j - pw
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += kernel[o, c, i, j] * image[yy, xx, c]
                out[y, x, o] = acc
    return out


def naive_forward(net, image, adapters=None, head=None):
    adapters = adapters or {}
    layers = list(net.layers)
    if head is not None:
        layers[-1] = head
    x = image
    for idx, layer in enumerate(layers):
        weight = layer.weight
        if layer.name in adapters:
            a = adapters[layer.name]
            weight = weight + a.scale * a.B @ a.A
        ks = layer.kernel_size
        x = naive_conv(x, weight.reshape(layer.d, layer.in_channels, ks, ks), layer.bias)
        if idx < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def finite_difference(f, array, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``array`` (in place)."""
    out = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + h
        up = f()
        array[idx] = orig - h
        down = f()
        array[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


def random_adapters(net, r, seed, layers=("conv1", "conv2", "head")):
    """Adapters with non-zero B so every factor carries gradient."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in layers:
        ad = lora.init_adapter(net.layer(name), r, seed)
        ad.B = rng.normal(0, 0.3, ad.B.shape)
        ad.A = rng.normal(0, 0.3, ad.A.shape)
        out[name] = ad
    return out


@pytest.fixture
def small_net():
    return build_net(in_channels=3, width=4, num_classes=3, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_domains(n=3, train=16, val=8, five_class_last=False):
    from mile.bench.data import DomainSpec
    transforms = ["identity", "inverted_intensity", "grayscale", "hue_shift(120.0)", "noise(0.3)"]
    out = []
    for i in range(n):
        c = 5 if (five_class_last and i == n - 1) else 4
        out.append(DomainSpec(f"d{i}", transforms[i], class_count=c, samples_train=train,
                              samples_val=val, seed=100 + i))
    return out


def build_tiny_registry(domains, width=8, epochs=2, seed=0):
    """Base trained on domain 0 then one briefly trained expert per later domain."""
    from mile import experts as ex
    from mile.bench.data import generate_domain
    from mile.nn import SgdConfig, fit
    data = [generate_domain(d) for d in domains]
    base = build_net(width=width, num_classes=domains[0].class_count, seed=seed)
    fit(base, data[0][0].images, data[0][0].masks, SgdConfig(0.05, epochs, 8, seed))
    registry = ex.ExpertRegistry(base, rank=2)
    for t, d in enumerate(domains):
        spec = ex.TaskSpec(t, d.name, d.class_count)
        e = ex.begin_task(registry, spec, 2, seed)
        if t == 0:
            ex.register(registry, e, ex.task_prototype(registry, data[0][0].images, 0))
        else:
            ex.train_expert(registry, e, data[t][0].images, data[t][0].masks, SgdConfig(0.1, epochs, 8, seed + t))
            ex.register(registry, e)
    return registry, data


@pytest.fixture(scope="session")
def tiny_registry():
    return build_tiny_registry(tiny_domains(3, five_class_last=True))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
