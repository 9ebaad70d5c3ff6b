"""Continual-learning strategies run over a domain sequence.

Every strategy trains on tasks in order and, after each step, evaluates all
tasks seen so far on their validation sets. Trained models are cached per
runner so that strategies that share a starting point (the task-0 model is
the single-task reference, the fine-tune/EWC start and the MILE base) train
it once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .. import experts as ex
from ..errors import ConfigError, FisherError, ShapeError
from ..gating import confusion_matrix, route
from ..nn import (SgdConfig, TinySegNet, build_net, extract_feature, fit, loss_and_grad,
                  predict, trainable_refs)
from .data import DomainSpec, SegDataset, generate_domain
from .metrics import miou
from .report import SequenceReport, StepResult

log = logging.getLogger(__name__)

STRATEGIES = ("single_task", "fine_tune", "joint_train", "ewc", "mile_oracle", "mile_gated")


@dataclass(frozen=True)
class BenchConfig:
    rank: int = 4
    width: int = 32
    in_channels: int = 3
    adapter_lr: float = 0.05
    full_lr: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    ewc_lambda: float = 100.0
    fisher_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank", f"must be >= 1, got {self.rank}")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda", "must be >= 0")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples", "must be >= 1")


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


# -- EWC -----------------------------------------------------------------------


def ewc_penalty(params: Mapping[str, np.ndarray], reference: Mapping[str, np.ndarray],
                fisher: Mapping[str, np.ndarray], lam: float) -> tuple[float, dict[str, np.ndarray]]:
    """``lam/2 * sum F (theta - theta*)^2`` and its gradient ``lam * F (theta - theta*)``."""
    if lam < 0:
        raise FisherError(f"lambda must be >= 0, got {lam}")
    value = 0.0
    grads = {}
    for name, f in fisher.items():
        f = np.asarray(f)
        if (f < 0).any():
            raise FisherError(f"negative Fisher entry in {name}")
        diff = np.asarray(params[name]) - np.asarray(reference[name])
        if diff.shape != f.shape:
            raise ShapeError(f"{name}: params {diff.shape} vs fisher {f.shape}")
        value += 0.5 * lam * float(np.sum(f * diff * diff))
        grads[name] = lam * f * diff
    return value, grads


def fisher_diagonal(net: TinySegNet, images: np.ndarray, masks: np.ndarray) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher: mean over samples of the squared per-sample gradient."""
    fisher = {name: np.zeros_like(p) for name, p in trainable_refs(net).items()}
    for img, mask in zip(images, masks):
        _, grads = loss_and_grad(net, img, mask)
        for name, g in grads.items():
            fisher[name] += g * g
    for f in fisher.values():
        f /= len(images)
    return fisher


# -- runner --------------------------------------------------------------------


class SequenceRunner:
    """Shares generated data and trained models across strategies for one sequence."""

    def __init__(self, domains: Sequence[DomainSpec], cfg: BenchConfig = BenchConfig()):
        if len(domains) < 2:
            raise ConfigError("sequence", f"need at least 2 domains, got {len(domains)}")
        self.domains = list(domains)
        self.cfg = cfg
        self._data: dict[int, tuple[SegDataset, SegDataset]] = {}
        self._models: dict[tuple[int, int], TinySegNet] = {}
        self.registry: ex.ExpertRegistry | None = None
        self._mile: tuple[SequenceReport, SequenceReport] | None = None
        self.confusion: np.ndarray | None = None

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    @property
    def max_classes(self) -> int:
        return max(d.class_count for d in self.domains)

    def data(self, t: int) -> tuple[SegDataset, SegDataset]:
        if t not in self._data:
            self._data[t] = generate_domain(self.domains[t])
        return self._data[t]

    def sgd(self, lr: float, *key: int) -> SgdConfig:
        return SgdConfig(lr, self.cfg.epochs, self.cfg.batch_size, derive_seed(self.cfg.seed, *key))

    def _init_net(self, num_classes: int, t: int) -> TinySegNet:
        return build_net(self.cfg.in_channels, self.cfg.width, num_classes, derive_seed(self.cfg.seed, 1, t))

    def full_model(self, t: int, num_classes: int) -> TinySegNet:
        """Model trained from scratch on task ``t`` alone (cached; callers get a copy)."""
        key = (t, num_classes)
        if key not in self._models:
            train, _ = self.data(t)
            net = self._init_net(num_classes, t)
            fit(net, train.images, train.masks, self.sgd(self.cfg.full_lr, 2, t))
            self._models[key] = net
        return self._models[key].copy(frozen=False)

    def evaluate(self, net: TinySegNet, t: int) -> float:
        _, val = self.data(t)
        c = self.domains[t].class_count
        pred = predict(net, val.images, num_classes=c)
        return 100.0 * miou(pred, val.masks, c)

    def _report(self, strategy: str) -> SequenceReport:
        return SequenceReport(strategy, self.names)

    # strategies

    def single_task(self) -> SequenceReport:
        report = self._report("single_task")
        scores, params = {}, 0
        for s, d in enumerate(self.domains):
            net = self.full_model(s, d.class_count)
            scores[s] = self.evaluate(net, s)
            params += net.num_params
            report.steps.append(StepResult(s, dict(scores), params))
        return report

    def _sequential(self, strategy: str, lam: float | None) -> SequenceReport:
        report = self._report(strategy)
        net = self.full_model(0, self.max_classes)
        fisher = reference = None
        for s in range(len(self.domains)):
            train, _ = self.data(s)
            if s > 0:
                reg = None
                if lam is not None:
                    ref, fis = reference, fisher
                    reg = lambda params, ref=ref, fis=fis: ewc_penalty(params, ref, fis, lam)
                fit(net, train.images, train.masks, self.sgd(self.cfg.full_lr, 2, s), regularizer=reg)
            params = net.num_params
            if lam is not None:
                k = min(self.cfg.fisher_samples, len(train))
                fisher = fisher_diagonal(net, train.images[:k], train.masks[:k])
                reference = {n: p.copy() for n, p in trainable_refs(net).items()}
                params += sum(f.size for f in fisher.values()) + sum(r.size for r in reference.values())
            scores = {i: self.evaluate(net, i) for i in range(s + 1)}
            report.steps.append(StepResult(s, scores, params))
            log.info("%s step %d: %s", strategy, s, scores)
        return report

    def fine_tune(self) -> SequenceReport:
        return self._sequential("fine_tune", None)

    def ewc(self) -> SequenceReport:
        return self._sequential("ewc", self.cfg.ewc_lambda)

    def joint_train(self) -> SequenceReport:
        sets = [self.data(t)[0] for t in range(len(self.domains))]
        images = np.concatenate([s.images for s in sets])
        masks = np.concatenate([s.masks for s in sets])
        offsets = np.cumsum([0] + [len(s) for s in sets])
        cfg = self.sgd(self.cfg.full_lr, 4)

        def schedule(epoch: int) -> list[np.ndarray]:
            # round-robin over per-task shuffles keeps every batch mixed across tasks
            keyed = []
            for t, s in enumerate(sets):
                rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, epoch, t])))
                for pos, i in enumerate(rng.permutation(len(s))):
                    keyed.append((pos, t, offsets[t] + i))
            order = np.array([i for _, _, i in sorted(keyed)])
            return [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

        net = self._init_net(self.max_classes, 0)
        fit(net, images, masks, cfg, schedule=schedule)
        report = self._report("joint_train")
        for s in range(len(self.domains)):
            report.steps.append(StepResult(s, {i: self.evaluate(net, i) for i in range(s + 1)},
                                           net.num_params))
        return report

    def build_registry(self) -> ex.ExpertRegistry:
        """Base from task 0, identity expert for task 0, one trained expert per later task."""
        self.mile()
        return self.registry

    def _gated_score(self, registry: ex.ExpertRegistry, t: int) -> tuple[float, np.ndarray]:
        _, val = self.data(t)
        if self.domains[t].modality_flag:
            routed = np.full(len(val), t)
        else:
            feats = extract_feature(registry.base, val.images)
            routed = np.array([route(z, registry.prototypes) for z in feats])
        pred = np.empty(val.masks.shape, dtype=np.int64)
        for e in np.unique(routed):
            sel = routed == e
            pred[sel] = registry.assemble(int(e)).predict(val.images[sel])
        c = max(self.domains[t].class_count, int(pred.max()) + 1)
        return 100.0 * miou(pred, val.masks, c), routed

    def mile(self) -> tuple[SequenceReport, SequenceReport]:
        if self._mile is not None:
            return self._mile
        cfg = self.cfg
        base = self.full_model(0, self.domains[0].class_count)
        registry = ex.ExpertRegistry(base, cfg.rank)
        oracle, gated = self._report("mile_oracle"), self._report("mile_gated")
        for s, d in enumerate(self.domains):
            spec = ex.TaskSpec(s, d.name, d.class_count, d.modality_flag)
            train, _ = self.data(s)
            expert = ex.begin_task(registry, spec, cfg.rank, cfg.seed)
            if s == 0:
                ex.register(registry, expert, ex.task_prototype(registry, train.images, 0))
            else:
                ex.train_expert(registry, expert, train.images, train.masks,
                                self.sgd(cfg.adapter_lr, 3, s))
                ex.register(registry, expert)
            params = registry.base.num_params + sum(e.num_params + e.prototype.vector.size
                                                    for e in registry.experts)
            o_scores, g_scores = {}, {}
            for i in range(s + 1):
                _, val = self.data(i)
                c = self.domains[i].class_count
                o_scores[i] = 100.0 * miou(registry.assemble(i).predict(val.images), val.masks, c)
                g_scores[i], _ = self._gated_score(registry, i)
            oracle.steps.append(StepResult(s, o_scores, params))
            gated.steps.append(StepResult(s, g_scores, params))
            log.info("mile step %d: oracle %s gated %s", s, o_scores, g_scores)
        self.registry = registry
        self.confusion = confusion_matrix(registry, [self.data(t)[1].images for t in range(len(self.domains))])
        self._mile = (oracle, gated)
        return self._mile

    def run(self, strategy: str) -> SequenceReport:
        if strategy not in STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {strategy!r}; choose from {list(STRATEGIES)}")
        if strategy == "mile_oracle":
            return self.mile()[0]
        if strategy == "mile_gated":
            return self.mile()[1]
        return getattr(self, strategy)()


def run_sequences(strategies: Sequence[str], domains: Sequence[DomainSpec],
                  cfg: BenchConfig = BenchConfig(), reference: bool = True,
                  runner: SequenceRunner | None = None) -> dict[str, SequenceReport]:
    """Reports for each strategy; with ``reference`` every non-reference report carries ΔP."""
    runner = runner or SequenceRunner(domains, cfg)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {s!r}; choose from {list(STRATEGIES)}")
    ref = runner.single_task() if (reference or "single_task" in strategies) else None
    reports = {}
    for s in strategies:
        report = ref if s == "single_task" else runner.run(s)
        if ref is not None and s != "single_task":
            report.attach_reference(ref)
        reports[s] = report
    return reports


def run_sequence(strategy: str, domains: Sequence[DomainSpec], cfg: BenchConfig = BenchConfig(),
                 reference: bool = False) -> SequenceReport:
    return run_sequences([strategy], domains, cfg, reference)[strategy]
