"""Schedules, optimizers, the training loop, domain adaptation and gradcheck."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adaptor import attach_adaptors, sparsity
from .errors import ConfigError, InvariantViolation, NumericError
from .layers import (STRATEGIES, ModelGraph, cast_params, first_nonfinite_layer, forward_record,
                     evaluate_logits, init_missing, set_strategy)
from .profiler import profile
from .tape import POLICIES

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "lr", "mean_gate_sparsity",
                  "saved_activation_bytes"]
GATES_HEADER = ["step", "block", "sparsity"]


# ---------------------------------------------------------------------------
# schedules


def cosine_lr(step: float, total: float, lr0: float) -> float:
    if total <= 0:
        raise ConfigError(f"cosine schedule needs total > 0, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total))


def step_decay_lr(epoch: float, milestones=(40, 80, 100), factor: float = 0.1,
                  lr0: float = 0.1) -> float:
    milestones = list(milestones)
    if milestones != sorted(milestones):
        raise ConfigError(f"milestones must be ascending, got {milestones}")
    return lr0 * factor ** sum(1 for m in milestones if m <= epoch)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name in sorted(grads):
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self.state.get(name)
            v = g if v is None else self.momentum * v + g
            self.state[name] = v
            params[name] = (params[name] - lr * v).astype(params[name].dtype)
        self.steps += 1


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.steps, 1 - b2 ** self.steps
        for name in sorted(grads):
            g = grads[name]
            m, v = self.state.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[name] = (m, v)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (params[name] - update).astype(params[name].dtype)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "full"
    epochs: int = 10
    iterations: int | None = None  # when set, overrides epochs with a step budget
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"
    milestones: list = field(default_factory=lambda: [40, 80, 100])
    decay_factor: float = 0.1
    beta: float = 5.0
    temperature: float = 1.0
    gate_form: str = "logit"
    use_gate: bool = True
    odd_mode: str = "strict"
    policy: str = "paper"
    bn_mode: str = "frozen"
    dtype: str = "f32"
    audit: bool = True
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "step", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.bn_mode not in ("frozen", "batch"):
            raise ConfigError(f"unknown bn_mode {self.bn_mode!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        self.milestones = list(self.milestones)
        step_decay_lr(0, self.milestones)  # rejects unsorted milestones

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        from .io import read_json

        return cls.from_dict(read_json(path))

    def save(self, path) -> None:
        from .io import write_json

        write_json(path, self.to_dict())

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


# The ResNet-50 Adam recipe says "30 iterations"; both readings are offered.
PRESETS = {
    "adam-cosine-30-epochs": dict(optimizer="adam", lr=1e-3, schedule="cosine", epochs=30),
    "adam-cosine-30-iterations": dict(optimizer="adam", lr=1e-3, schedule="cosine",
                                      iterations=30),
    "sgd-step-pretrain": dict(optimizer="sgd", lr=0.1, momentum=0.9, schedule="step",
                              milestones=[40, 80, 100], decay_factor=0.1, epochs=120,
                              bn_mode="batch"),
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# training


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        for x, y, split in ((self.x_train, self.y_train, "train"),
                            (self.x_test, self.y_test, "test")):
            if x.ndim != 4 or len(x) != len(y):
                raise ConfigError(f"{split} split: images {x.shape} vs labels {y.shape}")


def _make_optimizer(cfg: RunConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(cfg.lr)


def _lr_at(cfg: RunConfig, step: int, epoch: int, total_steps: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_lr(step, total_steps, cfg.lr)
    if cfg.schedule == "step":
        return step_decay_lr(epoch, cfg.milestones, cfg.decay_factor, cfg.lr)
    return cfg.lr


def evaluate(graph: ModelGraph, params: dict, x, y, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy with frozen BN and deterministic gates."""
    logits = evaluate_logits(graph, params, x, batch_size)
    loss, _ = T.cross_entropy_with_logits(logits, y)
    return loss, float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def _update_running_stats(params, stats, momentum=0.1, count=None):
    for name, (mean, var) in stats.items():
        rm, rv = f"{name}.running_mean", f"{name}.running_var"
        unbiased = var * count[name] / max(count[name] - 1, 1)
        params[rm] = ((1 - momentum) * params[rm] + momentum * mean).astype(params[rm].dtype)
        params[rv] = ((1 - momentum) * params[rv] + momentum * unbiased).astype(params[rv].dtype)


def train(graph: ModelGraph, params: dict, data: Dataset, cfg: RunConfig, *,
          metrics_path=None, gates_path=None) -> tuple[dict, list[dict]]:
    """Train the parameters ``graph`` marks trainable; returns new params and metrics rows."""
    from .io import write_csv

    params = cast_params(params, cfg.np_dtype)
    x_train = np.asarray(data.x_train, cfg.np_dtype)
    y_train = np.asarray(data.y_train, np.int64)
    n = len(x_train)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    if cfg.iterations is not None:
        total_steps = cfg.iterations
        epochs = -(-total_steps // steps_per_epoch)
    else:
        epochs, total_steps = cfg.epochs, cfg.epochs * steps_per_epoch
    opt = _make_optimizer(cfg)
    stochastic = any(a.use_gate for a in graph.adaptors())
    expected: dict[int, int] = {}
    metrics: list[dict] = []
    gate_rows: list[list] = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, correct, seen, sparsities, saved = [], 0, 0, [], 0
        lr = _lr_at(cfg, step, epoch, max(total_steps, 1))
        for start in range(0, n, cfg.batch_size):
            if step >= total_steps:
                break
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            lr = _lr_at(cfg, step, epoch, total_steps)
            logits, tape = forward_record(graph, params, xb, policy=cfg.policy,
                                          bn_mode=cfg.bn_mode, stochastic=stochastic,
                                          seed=cfg.seed, step=step)
            loss, dlogits = T.cross_entropy_with_logits(logits, yb)
            if not np.isfinite(loss):
                layer = first_nonfinite_layer(graph, params, xb, bn_mode=cfg.bn_mode) or "loss"
                raise NumericError(f"non-finite loss at step {step} (lr={lr:g}); "
                                   f"first non-finite output at layer {layer!r}")
            if cfg.audit:
                if len(idx) not in expected:
                    expected[len(idx)] = profile(graph, None, n=len(idx), resolution=xb.shape[2:],
                                                 dtype=cfg.dtype, policy=cfg.policy,
                                                 bn_training=cfg.bn_mode == "batch").total_act
                if tape.saved_bytes() != expected[len(idx)]:
                    raise InvariantViolation(
                        f"step {step}: tape retained {tape.saved_bytes()} B, profiler predicts "
                        f"{expected[len(idx)]} B")
            saved = max(saved, tape.saved_bytes())
            grads = tape.backward(dlogits)
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise NumericError(f"non-finite gradient at step {step} (lr={lr:g}) "
                                   f"for {bad[0]!r}")
            opt.step(params, grads, lr)
            if cfg.bn_mode == "batch":
                _update_running_stats(params, tape.batch_stats,
                                      count=_bn_counts(graph, tape, len(idx), xb.shape[2:]))
            for block, gate in sorted(tape.gates.items()):
                s = sparsity(gate)
                sparsities.append(s)
                gate_rows.append([step, block, f"{s:.6g}"])
            losses.append(loss * len(idx))
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            seen += len(idx)
            step += 1
        if seen == 0:
            break
        mean_sparsity = float(np.mean(sparsities)) if sparsities else 0.0
        metrics.append(dict(epoch=epoch, split="train", loss=float(sum(losses) / seen),
                            accuracy=correct / seen, lr=lr, mean_gate_sparsity=mean_sparsity,
                            saved_activation_bytes=saved))
        if len(data.x_test):
            tl, ta = evaluate(graph, params, np.asarray(data.x_test, cfg.np_dtype), data.y_test)
            mean_eval_sparsity = _eval_sparsity(graph, params, data.x_test, cfg) if stochastic \
                else 0.0
            metrics.append(dict(epoch=epoch, split="test", loss=tl, accuracy=ta, lr=lr,
                                mean_gate_sparsity=mean_eval_sparsity,
                                saved_activation_bytes=0))
    if metrics_path is not None:
        write_csv(metrics_path, METRICS_HEADER, [_fmt_row(m) for m in metrics])
    if gates_path is not None:
        write_csv(gates_path, GATES_HEADER, gate_rows)
    return params, metrics


def _bn_counts(graph, tape, n, hw):
    from .layers import resolve

    sites = {s.node.name: s for s in resolve(graph, tuple(hw), n)}
    return {k: n * sites[k].in_shape[2] * sites[k].in_shape[3] for k in tape.batch_stats}


def _eval_sparsity(graph, params, x, cfg) -> float:
    _, tape = forward_record(graph, params, np.asarray(x[:256], cfg.np_dtype), grad_enabled=False)
    vals = [sparsity(g) for g in tape.gates.values()]
    return float(np.mean(vals)) if vals else 0.0


def _fmt_row(m: dict) -> list:
    return [m["epoch"], m["split"], f"{m['loss']:.10g}", f"{m['accuracy']:.10g}",
            f"{m['lr']:.10g}", f"{m['mean_gate_sparsity']:.10g}", m["saved_activation_bytes"]]


# ---------------------------------------------------------------------------
# adaptation


def prepare_adaptation(backbone: ModelGraph, pretrained: dict, cfg: RunConfig):
    """Attach adaptors when the strategy needs them, set flags, fill new params."""
    graph = backbone
    if cfg.strategy in ("da3", "adaptor-only") and not graph.adaptors():
        graph = attach_adaptors(graph, use_gate=cfg.use_gate, beta=cfg.beta,
                                temperature=cfg.temperature, gate_form=cfg.gate_form,
                                odd_mode=cfg.odd_mode)
    graph = set_strategy(graph, cfg.strategy)
    params = init_missing(graph, pretrained, seed=cfg.seed)
    return graph, cast_params(params, cfg.np_dtype)


def frozen_names(graph: ModelGraph, params: dict) -> list[str]:
    trainable = set(graph.trainable_params())
    return sorted(k for k in params if k not in trainable)


def adapt_domain(backbone: ModelGraph, pretrained: dict, data: Dataset, cfg: RunConfig, *,
                 metrics_path=None, gates_path=None):
    """Adapt to a new domain; every parameter the strategy freezes must stay bitwise equal.

    Returns ``(graph, params, metrics)``.  BN running statistics count as
    frozen: adaptation always normalizes with them.
    """
    if cfg.bn_mode != "frozen" and cfg.strategy != "full":
        raise ConfigError("adaptation keeps BN statistics frozen; use bn_mode='frozen'")
    graph, params = prepare_adaptation(backbone, pretrained, cfg)
    snapshot = {k: params[k].tobytes() for k in frozen_names(graph, params)}
    if cfg.epochs == 0 and not cfg.iterations:
        metrics = []
        if len(data.x_test):
            loss, acc = evaluate(graph, params, np.asarray(data.x_test, cfg.np_dtype), data.y_test)
            metrics.append(dict(epoch=0, split="test", loss=loss, accuracy=acc, lr=0.0,
                                mean_gate_sparsity=0.0, saved_activation_bytes=0))
        if metrics_path is not None:
            from .io import write_csv

            write_csv(metrics_path, METRICS_HEADER, [_fmt_row(m) for m in metrics])
        return graph, params, metrics
    params, metrics = train(graph, params, data, cfg, metrics_path=metrics_path,
                            gates_path=gates_path)
    drifted = [k for k, b in snapshot.items() if params[k].tobytes() != b]
    if drifted:
        raise InvariantViolation(f"frozen parameters changed during adaptation: {drifted[:5]}")
    return graph, params, metrics


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class Probe:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradcheckReport:
    probes: list[Probe]
    max_rel_err: float
    tol: float
    resampled: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.probes) and self.max_rel_err <= self.tol

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_rel_err": self.max_rel_err, "tol": self.tol,
                "resampled": self.resampled,
                "probes": [dataclasses.asdict(p) | {"index": list(p.index)} for p in self.probes]}


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(graph: ModelGraph, params: dict, x, y, *, n_probes: int = 20, eps: float = 1e-3,
              tol: float = 1e-4, floor: float = 1e-8, seed: int = 0,
              policy: str = "paper", max_resample: int = 50) -> GradcheckReport:
    """Central finite differences on f64 copies of randomly chosen trainable scalars.

    A probe whose perturbation flips any ReLU sign or hard gate straddles a
    kink, where the finite difference is meaningless; it is redrawn.
    """
    params = cast_params(params, np.float64)
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.int64)
    trainable = sorted(graph.trainable_params())
    if not trainable:
        return GradcheckReport([], 0.0, tol)

    def run(p, kinks=False):
        logits, tape = forward_record(graph, p, x, policy=policy, track_kinks=kinks)
        loss, dl = T.cross_entropy_with_logits(logits, y)
        return loss, dl, tape

    _, dl, tape = run(params, kinks=True)
    base_kinks = [k.tobytes() for k in tape.kinks]
    grads = tape.backward(dl)
    rng = np.random.default_rng(seed)
    probes: list[Probe] = []
    resampled = 0
    while len(probes) < n_probes:
        name = trainable[rng.integers(len(trainable))]
        idx = tuple(int(rng.integers(s)) for s in params[name].shape)
        vals = []
        kinked = False
        for sign in (1, -1):
            p = dict(params)
            p[name] = params[name].copy()
            p[name][idx] += sign * eps
            loss, _, t = run(p, kinks=True)
            kinked |= [k.tobytes() for k in t.kinks] != base_kinks
            vals.append(loss)
        if kinked and resampled < max_resample:
            resampled += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * eps)
        analytic = float(grads.get(name, np.zeros_like(params[name]))[idx])
        probes.append(Probe(name, idx, analytic, numeric, rel_error(analytic, numeric, floor)))
    return GradcheckReport(probes, max(p.rel_err for p in probes), tol, resampled)


def save_metrics_json(path, metrics: list[dict]) -> None:
    from .io import write_json

    write_json(Path(path), metrics)


__all__ = [
    "Adam", "Dataset", "GradcheckReport", "PRESETS", "RunConfig", "SGD", "adapt_domain",
    "cosine_lr", "evaluate", "gradcheck", "preset", "step_decay_lr", "train",
]
