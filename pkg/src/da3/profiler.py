"""Analytic training-memory accounting from shapes alone.

The profiler walks the resolved graph symbolically, propagating which
values require gradients, and asks :func:`required_saves` what each layer
would retain.  Values are keyed by the site that produced them, so a tensor
read by two layers (a block input feeding both the main branch and the
projection shortcut, or the pooled input shared by both adaptor branches)
is counted once, exactly as the tape deduplicates by value id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adaptor import AdaptorSpec
from .errors import ConfigError
from .io import format_csv
from .layers import LayerSpec, ModelGraph, Site, param_count, resolve
from .tape import POLICIES, RequiredSave, Trainability, required_saves

MB = 2**20
CSV_HEADER = ["layer_id", "kind", "param_bytes", "grad_bytes", "act_bytes", "reason"]
COMPARE_HEADER = ["strategy", "total_param", "total_grad", "total_act", "ratio_vs_baseline"]


def activation_elements(layer: LayerSpec, n: int, h: int = 1, w: int = 1,
                        channels: int | None = None) -> int:
    """``n * c_in * h * w``; a linear layer sees its flattened input (h = w = 1)."""
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    c = layer.c_in if layer.c_in is not None else channels
    if c is None:
        raise ConfigError(f"{layer.name}: channel count needed for {layer.kind}")
    if layer.kind == "linear":
        h = w = 1
    return n * c * h * w


@dataclass(frozen=True)
class ReportRow:
    layer_id: str
    kind: str
    param_bytes: int
    grad_bytes: int
    act_bytes: int
    reason: str = ""

    @property
    def adam_bytes(self) -> int:
        return 2 * self.param_bytes


@dataclass
class MemoryReport:
    strategy: str
    assumptions: dict
    rows: list[ReportRow] = field(default_factory=list)
    transit_bytes: int = 0

    @property
    def total_param(self) -> int:
        return sum(r.param_bytes for r in self.rows)

    @property
    def total_grad(self) -> int:
        return sum(r.grad_bytes for r in self.rows)

    @property
    def total_act(self) -> int:
        return sum(r.act_bytes for r in self.rows)

    @property
    def total_adam(self) -> int:
        return sum(r.adam_bytes for r in self.rows)

    def header_lines(self) -> list[str]:
        a = self.assumptions
        return [f"strategy: {self.strategy}",
                f"assumptions: batch={a['batch']} resolution={a['resolution'][0]}x"
                f"{a['resolution'][1]} dtype={a['dtype']} ({a['dtype_bytes']} B) "
                f"policy={a['policy']} MB=2^20 bytes"]

    def to_csv(self) -> str:
        return format_csv(CSV_HEADER, [[r.layer_id, r.kind, r.param_bytes, r.grad_bytes,
                                        r.act_bytes, r.reason] for r in self.rows])

    def to_text(self) -> str:
        width = max([len(r.layer_id) for r in self.rows] + [8])
        lines = self.header_lines()
        lines.append(f"{'layer':<{width}}  {'kind':<12} {'param B':>12} {'grad B':>12} "
                     f"{'act B':>12} {'adam B':>12}  reason")
        for r in self.rows:
            lines.append(f"{r.layer_id:<{width}}  {r.kind:<12} {r.param_bytes:>12} "
                         f"{r.grad_bytes:>12} {r.act_bytes:>12} {r.adam_bytes:>12}  {r.reason}")
        lines.append(f"{'total':<{width}}  {'':<12} {self.total_param:>12} {self.total_grad:>12} "
                     f"{self.total_act:>12} {self.total_adam:>12}")
        lines.append(f"activation memory: {self.total_act / MB:.2f} MB; trainable params: "
                     f"{self.total_param / MB:.3f} MB; adam state (informational): "
                     f"{self.total_adam / MB:.3f} MB")
        return "\n".join(lines) + "\n"


class _Walker:
    """Symbolic forward: tracks requires-grad per value key and dedups saves."""

    def __init__(self, policy, dtype, bn_training):
        self.policy = policy
        self.dtype = np.dtype(dtype)
        self.bn_training = bn_training
        self.rg: dict[str, bool] = {}
        self.counted: set[str] = set()
        self.transit_bytes = 0
        self._fresh = 0

    def fresh(self, tag) -> str:
        self._fresh += 1
        return f"#{tag}{self._fresh}"

    def take(self, key: str, save: RequiredSave, reasons: list[str]) -> int:
        reasons.append(save.reason)
        if key in self.counted:
            return 0
        self.counted.add(key)
        return save.nbytes

    def jacobian(self, nbytes: int, key: str, reasons: list[str]) -> int:
        """Pass-through entries: counted under strict, tallied as transit under paper."""
        if self.policy == "strict":
            return self.take(key, RequiredSave("", nbytes, "nonlinearity-jacobian"), reasons)
        self.transit_bytes += nbytes
        return 0

    def layer(self, site: Site, in_key: str, out_key: str, skip_key: str | None):
        layer: LayerSpec = site.node
        in_rg = self.rg[in_key] or (skip_key is not None and self.rg[skip_key])
        t = layer.trainability if layer.has_params else Trainability()
        own = any(layer.trainable(k) for k in layer.param_shapes())
        self.rg[out_key] = in_rg or own
        reasons: list[str] = []
        act = 0
        if not self.rg[out_key]:
            return act, reasons
        for s in required_saves(layer, t, self.policy, in_shape=site.in_shape,
                                input_requires_grad=in_rg, dtype=self.dtype,
                                bn_training=self.bn_training):
            key = {"input": in_key, "weight": f"param:{layer.name}.weight",
                   "output": out_key}.get(s.tensor) or self.fresh(s.tensor)
            act += self.take(key, s, reasons)
        if self.policy == "paper" and in_rg:
            numel = int(np.prod(site.in_shape))
            if layer.kind == "relu":
                self.transit_bytes += -(-numel // 8)
            elif layer.kind == "sigmoid":
                self.transit_bytes += numel * self.dtype.itemsize
        return act, reasons

    def adaptor(self, site: Site, in_key: str, out_key: str):
        a: AdaptorSpec = site.node
        n, c, h, w = site.in_shape
        item = self.dtype.itemsize
        hh, ww = (-(-h // 2), -(-w // 2)) if a.odd_mode == "ceil" else (h // 2, w // 2)
        d_bytes = n * c * hh * ww * item
        plane = n * hh * ww
        d_key, ha_key, soft_key = (f"{a.name}.pool", f"{a.name}.basic", f"{a.name}.gate")
        reasons: list[str] = []
        act = 0
        in_rg = self.rg[in_key]
        basic_rg = in_rg or a.basic.weight or a.basic.bias
        if a.basic.weight:
            act += self.take(d_key, RequiredSave("input", d_bytes, "weight-grad"), reasons)
        if a.use_gate:
            soft_rg = in_rg or a.spatial.weight or a.spatial.bias
            if a.spatial.weight:
                act += self.take(d_key, RequiredSave("input", d_bytes, "weight-grad"), reasons)
            if soft_rg:
                act += self.jacobian(plane * item, soft_key, reasons)  # soft
                act += self.jacobian(plane * item, self.fresh("pi0"), reasons)
            if basic_rg and soft_rg:
                act += self.take(soft_key, RequiredSave("", plane * item, "mask-grad"), reasons)
                act += self.take(ha_key, RequiredSave("", n * c * hh * ww * item, "mask-grad"),
                                 reasons)
            self.rg[out_key] = in_rg or basic_rg or soft_rg
        else:
            self.rg[out_key] = in_rg or basic_rg
        return act, reasons


def _param_bytes(node, dtype) -> int:
    return param_count(node, trainable_only=True) * np.dtype(dtype).itemsize


def profile(graph: ModelGraph, strategy: str | None = None, n: int = 4,
            resolution: tuple[int, int] | None = None, dtype="f32", policy: str = "paper",
            bn_training: bool = False) -> MemoryReport:
    """Per-layer param/grad/saved-activation bytes for ``graph`` as flagged.

    ``strategy`` is applied with :func:`set_strategy` when given (and must
    agree with adaptor attachment); otherwise the graph's flags are used.
    """
    from .layers import set_strategy
    from .tensor import DTYPES

    if policy not in POLICIES:
        raise ConfigError(f"unknown pass-through policy {policy!r}")
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    np_dtype = DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    np_dtype = np.dtype(np_dtype)
    if np_dtype.kind != "f":
        raise ConfigError(f"profiling needs a float dtype, got {dtype}")
    if strategy is not None:
        graph = set_strategy(graph, strategy)
    label = strategy or graph.meta.get("strategy", "custom")
    hw = tuple(resolution) if resolution is not None else tuple(graph.input_shape[1:])
    sites = resolve(graph, hw, n)

    walker = _Walker(policy, np_dtype, bn_training)
    walker.rg["input"] = False
    rows: list[ReportRow] = []

    def run(branch_sites, key, skip=None):
        for site in branch_sites:
            node = site.node
            if isinstance(node, AdaptorSpec):
                act, reasons = walker.adaptor(site, key, node.name)
            else:
                act, reasons = walker.layer(site, key, node.name, skip)
                skip = None
            pb = _param_bytes(node, np_dtype)
            rows.append(ReportRow(node.name, node.kind, pb, pb, act,
                                  ";".join(dict.fromkeys(reasons))))
            key = node.name
        return key

    grouped: dict[tuple[str, str], list[Site]] = {}
    for site in sites:
        grouped.setdefault((site.block, site.branch), []).append(site)
    cur = "input"
    for block in graph.blocks:
        main = run(grouped.get((block.name, "main"), []), cur)
        if block.kind == "plain":
            cur = main
            continue
        short = run(grouped.get((block.name, "shortcut"), []), cur)
        cur = run(grouped.get((block.name, "post"), []), main, skip=short)
    return MemoryReport(label, {"batch": n, "resolution": list(hw), "dtype": np_dtype.name,
                                "dtype_bytes": np_dtype.itemsize, "policy": policy},
                        rows, walker.transit_bytes)


@dataclass
class ComparisonTable:
    assumptions: dict
    baseline: str
    rows: list[tuple[str, int, int, int, float]]

    def to_csv(self) -> str:
        return format_csv(COMPARE_HEADER, [[s, p, g, a, f"{r:.6g}"] for s, p, g, a, r in self.rows])

    def to_text(self) -> str:
        a = self.assumptions
        lines = [f"assumptions: batch={a['batch']} resolution={a['resolution'][0]}x"
                 f"{a['resolution'][1]} dtype={a['dtype']} policy={a['policy']} MB=2^20 bytes",
                 f"{'strategy':<14} {'param (MB)':>11} {'grad (MB)':>11} {'act. mem (MB)':>14} "
                 f"{'x vs ' + self.baseline:>12}"]
        for s, p, g, act, r in self.rows:
            lines.append(f"{s:<14} {p / MB:>11.3f} {g / MB:>11.3f} {act / MB:>14.2f} {r:>12.2f}")
        return "\n".join(lines) + "\n"

    def ratio(self, strategy: str) -> float:
        for s, *_, r in self.rows:
            if s == strategy:
                return r
        raise KeyError(strategy)


def compare(reports: list[MemoryReport], baseline: str | int = 0) -> ComparisonTable:
    """Totals per report plus ``baseline_act / act`` (how many times smaller)."""
    if not reports:
        raise ConfigError("nothing to compare")
    first = reports[0].assumptions
    for r in reports[1:]:
        if r.assumptions != first:
            raise ConfigError(f"reports are not like-for-like: {r.assumptions} vs {first}")
    if isinstance(baseline, int):
        base = reports[baseline]
    else:
        matches = [r for r in reports if r.strategy == baseline]
        if not matches:
            raise ConfigError(f"baseline {baseline!r} not among the reports")
        base = matches[0]
    rows = []
    for r in reports:
        if r.total_act == 0:
            ratio = 1.0 if base.total_act == 0 else float("inf")
        else:
            ratio = base.total_act / r.total_act
        rows.append((r.strategy, r.total_param, r.total_grad, r.total_act, ratio))
    return ComparisonTable(dict(first), base.strategy, rows)


def conv_flops(layer: LayerSpec, out_shape) -> int:
    """Multiply-accumulates counted as two flops, per sample."""
    _, c_out, ho, wo = out_shape
    return 2 * layer.c_in * c_out * layer.kh * layer.kw * ho * wo


def flops(graph: ModelGraph, resolution: tuple[int, int] | None = None,
          sparsity: dict[str, float] | float | None = None) -> float:
    """Analytic per-sample inference flops (convs and linears only).

    Inside a gated block, the conv producing the gated activation and every
    main-branch conv after it only run at open positions, so their cost
    scales by ``1 - sparsity``.  Adaptor branches add their own 1x1 costs.
    """
    sites = resolve(graph, resolution, 1)
    gated = {a.name for a in graph.adaptors() if a.use_gate}

    def s_of(name):
        if sparsity is None:
            return 0.0
        v = sparsity if isinstance(sparsity, (int, float)) else sparsity.get(name, 0.0)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"sparsity for {name} must lie in [0, 1], got {v}")
        return float(v)

    total = 0.0
    by_block: dict[str, list[Site]] = {}
    for site in sites:
        by_block.setdefault(site.block, []).append(site)
    for block_sites in by_block.values():
        main = [s for s in block_sites if s.branch == "main"]
        gate_at = next((i for i, s in enumerate(main) if s.node.name in gated), None)
        factor_after = 1.0 - s_of(main[gate_at].node.name) if gate_at is not None else 1.0
        last_conv_before = None
        if gate_at is not None:
            convs = [i for i in range(gate_at) if getattr(main[i].node, "kind", "") == "conv2d"]
            last_conv_before = convs[-1] if convs else None
        for site in block_sites:
            node = site.node
            if isinstance(node, AdaptorSpec):
                _, c, h, w = site.out_shape
                hh, ww = -(-h // 2), -(-w // 2)
                total += 2 * c * c * hh * ww
                if node.use_gate:
                    total += 2 * c * hh * ww
                continue
            if node.kind == "conv2d":
                cost = conv_flops(node, site.out_shape)
            elif node.kind == "linear":
                cost = 2 * node.c_in * node.c_out
            else:
                continue
            if site.branch == "main" and gate_at is not None:
                idx = main.index(site)
                if idx > gate_at or idx == last_conv_before:
                    cost *= factor_after
            total += cost
    return float(total)
