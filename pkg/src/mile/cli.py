"""``mile`` command line: train, infer, report, inspect.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import experts as ex
from .bench.data import DomainSpec, generate_domain, preset
from .bench.report import GROWTH_STRATEGIES, growth_csv, param_growth_report
from .bench.strategies import STRATEGIES, BenchConfig, SequenceRunner, run_sequences
from .errors import ConfigError, CoverageError, MileError, RankError, UnknownTaskError
from .gating import confusion_csv, confusion_matrix, infer

log = logging.getLogger("mile")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
DEFAULT_OUT = "mile_out"

_DOMAIN_PREFIX = "domain:"
_DOMAIN_FIELDS = {f.name: f.type for f in fields(DomainSpec) if f.name != "name"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "weather5"
    domains: tuple[DomainSpec, ...] = ()  # explicit list; overrides the preset when non-empty
    strategies: tuple[str, ...] = ("mile_oracle", "mile_gated")
    rank: int = 4
    width: int = 32
    adapter_lr: float = 0.05
    full_lr: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    ewc_lambda: float = 100.0
    fisher_samples: int = 64
    seed: int = 0
    output: str = ""

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank", f"rank bounds are 1 <= r <= min(d, k) of every adapted layer, got {self.rank}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError("strategies", f"unknown {bad}; choose from {list(STRATEGIES)}")
        for name in ("width", "epochs", "batch_size", "fisher_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("adapter_lr", "full_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if not self.domains:
            preset(self.preset)  # validates the name

    def sequence(self) -> list[DomainSpec]:
        return list(self.domains) if self.domains else preset(self.preset, self.seed)

    def bench(self) -> BenchConfig:
        return BenchConfig(rank=self.rank, width=self.width, adapter_lr=self.adapter_lr,
                           full_lr=self.full_lr, epochs=self.epochs, batch_size=self.batch_size,
                           ewc_lambda=self.ewc_lambda, fisher_samples=self.fisher_samples,
                           seed=self.seed)


_SECTIONS = {
    "run": ("preset", "strategies", "seed", "output"),
    "model": ("rank", "width"),
    "sgd": ("adapter_lr", "full_lr", "epochs", "batch_size"),
    "ewc": ("ewc_lambda", "fisher_samples"),
}


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg: RunConfig) -> str:
    """INI text that :func:`parse` turns back into an equal config."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in keys]
        lines.append("")
    for d in cfg.domains:
        lines.append(f"[{_DOMAIN_PREFIX}{d.name}]")
        lines += [f"{k} = {_fmt(getattr(d, k))}" for k in _DOMAIN_FIELDS]
        lines.append("")
    return "\n".join(lines)


def _convert(key: str, text: str, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        return kind(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(key, f"cannot read {text!r} as {getattr(kind, '__name__', kind)}") from exc


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def _typed(key: str, text: str):
    kind = _field_types()[key]
    if key == "strategies":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    return _convert(key, text, kind)


def parse(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from exc
    values: dict = {}
    domains = []
    for section in cp.sections():
        if section.startswith(_DOMAIN_PREFIX):
            kw = {}
            for key, raw in cp.items(section):
                if key not in _DOMAIN_FIELDS:
                    raise ConfigError(f"{section}.{key}", "unknown domain key")
                kw[key] = _convert(f"{section}.{key}", raw, _DOMAIN_FIELDS[key])
            domains.append(DomainSpec(section[len(_DOMAIN_PREFIX):], **kw))
            continue
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[key] = _typed(key, raw)
    return RunConfig(domains=tuple(domains), **values)


# -- helpers -------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    configured = cfg.output if cfg is not None else ""
    return Path(args.output or configured or os.environ.get("MILE_OUT") or DEFAULT_OUT)


def _write(path: Path, data: str | bytes) -> Path:
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return path


def read_image(path: str | Path) -> np.ndarray:
    """(H, W, 3) float image from .npy (values in [0, 1]) or a PPM/PGM file (8-bit)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False).astype(np.float64)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ConfigError("image", f"expected an (H, W, 3) image, got shape {arr.shape}")
    return arr


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path, format="PPM")


# -- commands ------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = parse(Path(args.config).read_text()) if args.config else RunConfig()
    overrides = {}
    for key in ("preset", "rank", "seed", "epochs", "width"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "strategies", None):
        overrides["strategies"] = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    if overrides.get("preset"):
        overrides["domains"] = ()
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    domains = cfg.sequence()
    runner = SequenceRunner(domains, cfg.bench())
    reference = any(s != "single_task" for s in cfg.strategies)
    reports = run_sequences(cfg.strategies, domains, cfg.bench(), reference=reference, runner=runner)
    files = [_write(out / "config.ini", render(replace(cfg, output=str(out))))]
    for name, report in reports.items():
        files.append(_write(out / f"{name}.csv", report.to_csv()))
        files.append(_write(out / f"{name}.txt", report.to_text()))
        if name.startswith("mile"):
            files.append(_write(out / f"{name}.mile", ex.save_registry(runner.registry)))
    manifest = {
        "seed": cfg.seed,
        "domain_seeds": {d.name: d.seed for d in domains},
        "strategies": list(cfg.strategies),
        "files": {p.name: _sha256(p) for p in files},
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in reports:
        print(reports[name].to_text())
    print(f"wrote {len(files) + 1} files to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    registry = ex.load_registry_file(args.checkpoint)
    image = read_image(args.image)
    if args.oracle is not None and not 0 <= args.oracle < len(registry):
        raise UnknownTaskError(f"oracle task {args.oracle} out of range for {len(registry)} tasks")
    task, logits = infer(registry, image, args.oracle)
    c = registry.expert(task).task.class_count
    mask = np.argmax(logits[..., :c], axis=-1)
    out = Path(args.output) if args.output else Path(args.image).with_suffix(".mask.pgm")
    write_mask(out, mask)
    print(f"task={task} mode={'oracle' if args.oracle is not None else 'gated'}")
    return EXIT_OK


def _validation_sets(args, n: int) -> list[np.ndarray]:
    if args.validation:
        with np.load(args.validation, allow_pickle=False) as z:
            keys = sorted(z.files, key=lambda k: int(k.rsplit("_", 1)[-1]))
            sets = [z[k] for k in keys]
    else:
        cfg = _load_config(args)
        sets = [generate_domain(d)[1].images for d in cfg.sequence()]
    if len(sets) != n:
        raise CoverageError(f"checkpoint has {n} tasks but validation data covers {len(sets)}")
    return sets


def cmd_report(args) -> int:
    registry = ex.load_registry_file(args.checkpoint)
    sets = _validation_sets(args, len(registry))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    names = [t.name for t in registry.tasks]
    matrix = confusion_matrix(registry, sets)
    _write(out / "confusion.csv", confusion_csv(matrix, names))
    base = registry.base
    rows = param_growth_report(GROWTH_STRATEGIES, len(registry), in_channels=base.in_channels,
                               width=base.width, num_classes=base.num_classes, rank=registry.rank,
                               class_counts=[t.class_count for t in registry.tasks])
    _write(out / "param_growth.csv", growth_csv(rows))
    print(confusion_csv(matrix, names), end="")
    print(f"routing accuracy (mean diagonal) {np.trace(matrix) / len(matrix):.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    registry = ex.load_registry_file(args.checkpoint)
    base = registry.base
    print(f"magic={ex.MAGIC.decode()} version={ex.VERSION} tasks={len(registry)} rank={registry.rank}")
    shapes = " ".join(f"{l.name}:{l.d}x{l.k}" for l in base.layers)
    print(f"base params={base.num_params} layers {shapes}")
    for e in registry.experts:
        t = e.task
        head = f" head={e.head.num_params}" if e.head is not None else ""
        print(f"task {t.task_id} {t.name} classes={t.class_count} modality={int(t.modality_flag)} "
              f"params={e.num_params}{head} prototype={e.prototype.vector.size} "
              f"samples={e.prototype.sample_count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mile", description="LoRA experts with prototype gating")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="INI run configuration; flags override its keys")
            sp.add_argument("--preset", default=None)

    t = sub.add_parser("train", help="run strategies over a domain sequence")
    common(t)
    t.add_argument("--strategies", help=f"comma list from {','.join(STRATEGIES)}")
    t.add_argument("--rank", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--width", type=int, default=None)
    t.add_argument("--output", "-o", help="output directory (default $MILE_OUT)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one image with a trained registry")
    common(i, config=False)
    i.add_argument("checkpoint")
    i.add_argument("image", help=".ppm, .pgm or .npy")
    i.add_argument("--oracle", type=int, default=None, help="task id; skips gating")
    i.add_argument("--output", "-o", help="mask path (PGM)")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="confusion matrix and parameter growth CSVs")
    common(r)
    r.add_argument("checkpoint")
    r.add_argument("--validation", help=".npz with one image array per task (val_0, val_1, ...)")
    r.add_argument("--output", "-o", help="output directory (default $MILE_OUT)")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("inspect", help="print checkpoint header and experts")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RankError, CoverageError, UnknownTaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
