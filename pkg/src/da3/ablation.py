"""Four-arm ablation on the synthetic two-domain task.

Arms, in the order they are expected to rank on held-out target accuracy:

* ``bias-only``      backbone biases / BN shifts + classifier
* ``basic-adaptor``  ungated adaptors + classifier, backbone biases frozen
* ``bias+basic``     ungated adaptors + backbone biases + classifier
* ``da3``            gated adaptors + backbone biases + classifier

Each seed pretrains its own backbone on domain A, adapts every arm to
domain B, and casts one vote on whether the ordering held.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TaskSpec, two_domain_task
from .errors import ConfigError, DA3Error
from .io import atomic_open, format_csv, write_csv, write_json
from .layers import build_backbone, init_params, set_strategy
from .train import RunConfig, adapt_domain, evaluate, train

ARMS = {
    "bias-only": dict(strategy="bias-only"),
    "basic-adaptor": dict(strategy="adaptor-only", use_gate=False),
    "bias+basic": dict(strategy="da3", use_gate=False),
    "da3": dict(strategy="da3", use_gate=True),
}
RESULT_HEADER = ["seed", "arm", "train_accuracy", "test_accuracy", "mean_gate_sparsity", "status"]


@dataclass
class AblationConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    arch: str = "tiny-cnn"
    num_classes: int = 4
    image_size: int = 16
    n_train: int = 512
    n_test: int = 2000
    task: dict = field(default_factory=lambda: {"texture": 0.3, "clutter": 1})
    pretrain_epochs: int = 8
    pretrain_lr: float = 3e-3
    epochs: int = 15
    lr: float = 3e-3
    batch_size: int = 16
    # beta=1 keeps the gate's sigmoid out of saturation at the +2 spatial bias
    beta: float = 1.0
    temperature: float = 1.0
    smoke: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown ablation keys: {sorted(set(d) - known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationResult:
    rows: list[dict]
    votes: dict[int, bool]

    @property
    def passed(self) -> bool:
        return sum(self.votes.values()) * 2 > len(self.votes)

    def mean_accuracy(self) -> dict[str, float]:
        out = {}
        for arm in ARMS:
            accs = [r["test_accuracy"] for r in self.rows if r["arm"] == arm and r["status"] == "ok"]
            out[arm] = float(np.mean(accs)) if accs else float("nan")
        return out

    def to_csv(self) -> str:
        return format_csv(RESULT_HEADER, [[r[k] if not isinstance(r[k], float) else f"{r[k]:.6g}"
                                           for k in RESULT_HEADER] for r in self.rows])

    def to_text(self) -> str:
        means = self.mean_accuracy()
        ranked = sorted(ARMS, key=lambda a: -means[a] if means[a] == means[a] else 1.0)
        lines = [f"{'rank':<5} {'arm':<14} {'mean test acc':>13}"]
        for i, arm in enumerate(ranked, 1):
            lines.append(f"{i:<5} {arm:<14} {means[arm]:>13.4f}")
        for seed, ok in sorted(self.votes.items()):
            accs = " <= ".join(f"{self._acc(seed, a):.4f}" for a in ARMS)
            lines.append(f"seed {seed}: {accs}  {'holds' if ok else 'violated'}")
        lines.append(f"ordering {' <= '.join(ARMS)}: "
                     f"{'PASS' if self.passed else 'FAIL'} "
                     f"({sum(self.votes.values())}/{len(self.votes)} seeds)")
        return "\n".join(lines) + "\n"

    def _acc(self, seed, arm):
        for r in self.rows:
            if r["seed"] == seed and r["arm"] == arm:
                return r["test_accuracy"]
        return float("nan")


def run_seed(cfg: AblationConfig, seed: int) -> list[dict]:
    spec = TaskSpec(num_classes=cfg.num_classes, image_size=cfg.image_size, **cfg.task)
    source, target = two_domain_task(cfg.n_train, cfg.n_test, spec, seed=seed)
    shape = (3, cfg.image_size, cfg.image_size)
    backbone = set_strategy(build_backbone(cfg.arch, cfg.num_classes, input_shape=shape), "full")
    params = init_params(backbone, seed)
    pre_epochs = 1 if cfg.smoke else cfg.pretrain_epochs
    params, _ = train(backbone, params, source,
                      RunConfig(seed=seed, strategy="full", epochs=pre_epochs,
                                batch_size=cfg.batch_size, lr=cfg.pretrain_lr, bn_mode="batch"))
    rows = []
    for arm, overrides in ARMS.items():
        run = RunConfig(seed=seed, epochs=1 if cfg.smoke else cfg.epochs,
                        batch_size=cfg.batch_size, lr=cfg.lr, beta=cfg.beta,
                        temperature=cfg.temperature, **overrides)
        try:
            graph, adapted, metrics = adapt_domain(backbone, params, target, run)
            train_acc = [m for m in metrics if m["split"] == "train"][-1]["accuracy"]
            test_row = [m for m in metrics if m["split"] == "test"][-1]
            _, test_acc = evaluate(graph, adapted, target.x_test, target.y_test)
            rows.append(dict(seed=seed, arm=arm, train_accuracy=train_acc, test_accuracy=test_acc,
                             mean_gate_sparsity=test_row["mean_gate_sparsity"], status="ok"))
        except DA3Error as exc:
            rows.append(dict(seed=seed, arm=arm, train_accuracy=float("nan"),
                             test_accuracy=float("nan"), mean_gate_sparsity=float("nan"),
                             status=f"failed: {exc}"))
    return rows


def run_ablation(cfg: AblationConfig, workdir=None) -> AblationResult:
    rows: list[dict] = []
    votes: dict[int, bool] = {}
    for seed in cfg.seeds:
        seed_rows = run_seed(cfg, seed)
        rows.extend(seed_rows)
        accs = [r["test_accuracy"] for r in seed_rows]
        ok = all(r["status"] == "ok" for r in seed_rows)
        votes[seed] = ok and all(a <= b for a, b in zip(accs, accs[1:]))
    result = AblationResult(rows, votes)
    if workdir is not None:
        workdir = Path(workdir)
        write_csv(workdir / "ablation.csv", RESULT_HEADER,
                  [[r[k] for k in RESULT_HEADER] for r in rows])
        write_json(workdir / "ablation_config.json", cfg.to_dict())
        with atomic_open(workdir / "ablation.txt", "w", encoding="utf-8") as fh:
            fh.write(result.to_text())
    return result
