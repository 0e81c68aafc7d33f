"""Dynamic additive attention adaptor with Gumbel-Sigmoid hard gating.

For an activation ``A[n,c,h,w]`` at the adaptor site::

    d    = avgpool2x2(A)
    H_a  = conv1x1_basic(d)                  # c -> c, trainable
    z    = conv1x1_spatial(d)                # c -> 1, trainable
    soft, hard = gumbel_sigmoid(z)
    H    = upsample2x(soft * H_a)            # soft plane shared by every channel
    A*   = (A + H) * detach(upsample2x(hard))

Only ``d``, ``H_a`` and the soft gate live at half resolution, which is
why training the adaptor leaves the full-resolution ``A`` unretained.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tape import FROZEN, Tape, Trainability, Value

PI0_EPS = 1e-7
THRESHOLD = 0.5
GATE_FORMS = ("logprob", "logit")


# ---------------------------------------------------------------------------
# Gumbel-Sigmoid


@dataclass
class GateSample:
    soft: np.ndarray
    hard: np.ndarray
    g0: np.ndarray | None = None
    g1: np.ndarray | None = None
    pi0: np.ndarray | None = None


def sample_gumbel(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return (-np.log(-np.log(u))).astype(dtype)


def _check_gate_params(beta, temperature, form):
    if not beta > 0:
        raise ConfigError(f"gate beta must be > 0, got {beta}")
    if not temperature > 0:
        raise ConfigError(f"gate temperature must be > 0, got {temperature}")
    if form not in GATE_FORMS:
        raise ConfigError(f"unknown gate form {form!r}")


def gumbel_sigmoid_parts(logits, beta, temperature, noise=None, form="logprob"):
    """Soft/hard gate, pi0, and a closure for d soft / d logits.

    ``form="logprob"`` is the literal relaxation
    ``soft = sigmoid((log pi0 + g0 - g1) / T)`` with ``pi0 = sigmoid(beta*z)``;
    it gives ``P(hard=1) = pi0 / (1 + pi0)`` and caps the deterministic soft
    value below 1/2.  ``form="logit"`` uses the two-class log-odds
    ``log pi0 - log(1 - pi0)`` instead, so ``P(hard=1) = pi0`` and the gate can
    open in deterministic mode.
    """
    _check_gate_params(beta, temperature, form)
    logits = np.asarray(logits)
    dtype = np.dtype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    pi0 = T.sigmoid((beta * logits).astype(dtype))
    p = np.clip(pi0, PI0_EPS, 1 - PI0_EPS)
    u = np.log(p) if form == "logprob" else np.log(p) - np.log1p(-p)
    if noise is not None:
        u = u + noise
    soft = T.sigmoid((u / temperature).astype(dtype))
    tiny = np.finfo(dtype).tiny
    soft = np.clip(soft, tiny, np.nextafter(dtype.type(1), dtype.type(0)))
    hard = (soft > THRESHOLD).astype(dtype)

    def dsoft(s, pi):
        inside = (pi > PI0_EPS) & (pi < 1 - PI0_EPS)
        du_dz = beta * ((1 - pi) if form == "logprob" else 1.0) * inside
        return s * (1 - s) / temperature * du_dz

    return soft, hard, pi0, dsoft


def gumbel_sigmoid(logits, beta: float = 1.0, temperature: float = 1.0,
                   rng: np.random.Generator | None = None, stochastic: bool = False,
                   form: str = "logprob") -> GateSample:
    """Sample a binary gate with its differentiable relaxation.

    Deterministic mode sets both Gumbel draws to zero.
    """
    _check_gate_params(beta, temperature, form)
    logits = np.asarray(logits, dtype=np.float64) if np.asarray(logits).dtype.kind != "f" \
        else np.asarray(logits)
    g0 = g1 = None
    noise = None
    if stochastic:
        if rng is None:
            raise ConfigError("stochastic gate sampling needs an rng")
        g0 = sample_gumbel(rng, logits.shape, logits.dtype)
        g1 = sample_gumbel(rng, logits.shape, logits.dtype)
        noise = g0 - g1
    soft, hard, pi0, _ = gumbel_sigmoid_parts(logits, beta, temperature, noise, form)
    return GateSample(soft=soft, hard=hard, g0=g0, g1=g1, pi0=pi0)


def sparsity(gate) -> float:
    """Fraction of spatial positions whose hard gate is closed."""
    hard = gate.hard if isinstance(gate, GateSample) else np.asarray(gate)
    return float(np.count_nonzero(hard == 0)) / hard.size


# ---------------------------------------------------------------------------
# module


@dataclass(frozen=True)
class AdaptorSpec:
    name: str
    channels: int
    beta: float = 5.0
    temperature: float = 1.0
    use_gate: bool = True
    gate_form: str = "logit"
    odd_mode: str = "strict"
    basic: Trainability = FROZEN
    spatial: Trainability = FROZEN
    basic_init_scale: float = 0.1
    spatial_bias_init: float = 2.0
    index: int = 0
    kind: str = field(default="adaptor", init=False)

    def __post_init__(self):
        _check_gate_params(self.beta, self.temperature, self.gate_form)
        if self.odd_mode not in T.POOL_MODES:
            raise ConfigError(f"unknown odd-extent mode {self.odd_mode!r}")
        if self.channels < 1:
            raise ConfigError("adaptor needs at least one channel")

    @property
    def threshold(self) -> float:
        return THRESHOLD

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.channels
        shapes = {f"{self.name}.basic.weight": (c, c, 1, 1), f"{self.name}.basic.bias": (c,)}
        if self.use_gate:
            shapes[f"{self.name}.spatial.weight"] = (1, c, 1, 1)
            shapes[f"{self.name}.spatial.bias"] = (1,)
        return shapes

    def trainable(self, pname: str) -> bool:
        branch, kind = pname[len(self.name) + 1:].split(".")
        t = self.basic if branch == "basic" else self.spatial
        return t.weight if kind == "weight" else t.bias

    def with_trainability(self, basic: Trainability, spatial: Trainability) -> "AdaptorSpec":
        if not self.use_gate:
            spatial = FROZEN
        return dataclasses.replace(self, basic=basic, spatial=spatial)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}
        d["basic"] = self.basic.to_dict()
        d["spatial"] = self.spatial.to_dict()
        d["kind"] = "adaptor"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptorSpec":
        d = dict(d)
        d.pop("kind", None)
        d["basic"] = Trainability(**d.get("basic", {}))
        d["spatial"] = Trainability(**d.get("spatial", {}))
        return cls(**d)


def init_adaptor_params(spec: AdaptorSpec, rng: np.random.Generator, dtype=np.float32):
    """Near-identity start: small basic branch, spatial bias opening the gate."""
    c = spec.channels
    bound = np.sqrt(6.0 / c)
    params = {
        f"{spec.name}.basic.weight":
            (spec.basic_init_scale * rng.uniform(-bound, bound, (c, c, 1, 1))).astype(dtype),
        f"{spec.name}.basic.bias": np.zeros(c, dtype),
    }
    if spec.use_gate:
        params[f"{spec.name}.spatial.weight"] = rng.uniform(-bound, bound, (1, c, 1, 1)).astype(dtype)
        params[f"{spec.name}.spatial.bias"] = np.full(1, spec.spatial_bias_init, dtype)
    return params


def adaptor_forward(tape: Tape, A: Value, spec: AdaptorSpec, params: dict,
                    stochastic: bool = False, rng: np.random.Generator | None = None,
                    hard_override: np.ndarray | None = None):
    """Record the adaptor on ``tape``; returns ``(A*, GateSample | None)``."""
    if A.data.ndim != 4 or A.shape[1] != spec.channels:
        raise ConfigError(f"{spec.name}: expected [n,{spec.channels},h,w], got {A.shape}")
    hw = A.shape[2:]

    def p(suffix):
        name = f"{spec.name}.{suffix}"
        return tape.param(name, params[name], spec.trainable(name))

    d = tape.avgpool(A, 2, mode=spec.odd_mode, label=f"{spec.name}.pool")
    h_a = tape.conv2d(d, p("basic.weight"), p("basic.bias"), label=f"{spec.name}.basic")
    if not spec.use_gate:
        h = tape.upsample(h_a, out_hw=hw, label=f"{spec.name}.up")
        return tape.add(A, h, label=f"{spec.name}.add"), None

    z = tape.conv2d(d, p("spatial.weight"), p("spatial.bias"), label=f"{spec.name}.spatial")
    g0 = g1 = None
    noise = None
    if stochastic:
        if rng is None:
            raise ConfigError("stochastic gate sampling needs an rng")
        g0 = sample_gumbel(rng, z.shape, z.data.dtype)
        g1 = sample_gumbel(rng, z.shape, z.data.dtype)
        noise = g0 - g1
    soft, hard, pi0 = tape.gumbel_sigmoid(z, spec.beta, spec.temperature, noise,
                                          spec.gate_form, label=f"{spec.name}.gate")
    refined = tape.mul(h_a, soft, label=f"{spec.name}.attend")
    h = tape.upsample(refined, out_hw=hw, label=f"{spec.name}.up")
    summed = tape.add(A, h, label=f"{spec.name}.add")
    if hard_override is not None:
        gate_full = tape.constant(hard_override)
    else:
        st = tape.straight_through(soft, hard, label=f"{spec.name}.binarize")
        gate_full = tape.detach(tape.upsample(st, out_hw=hw, label=f"{spec.name}.gate-up"))
    out = tape.mul(summed, gate_full, label=f"{spec.name}.gate-mul")
    return out, GateSample(soft=soft.data, hard=hard, g0=g0, g1=g1, pi0=pi0)


def adaptor_output(A, spec: AdaptorSpec, params: dict, stochastic=False, rng=None):
    """Plain (untaped) evaluation of the adaptor on an array."""
    tape = Tape(grad_enabled=False)
    out, gate = adaptor_forward(tape, tape.constant(A), spec, params, stochastic, rng)
    return out.data, gate


def attach_adaptors(graph, *, use_gate: bool = True, beta: float = 5.0,
                    temperature: float = 1.0, gate_form: str = "logit",
                    odd_mode: str = "strict", strict: bool = False):
    """Insert one adaptor per residual block.

    Basic blocks get it after their last convolution, bottleneck blocks after
    the second (before the 4x expansion).  A graph without residual blocks
    gets one after every convolution unless ``strict`` is set.
    """
    from .layers import LayerSpec, resolve

    if graph.adaptors():
        raise ConfigError("graph already has adaptors attached")
    kw = dict(beta=beta, temperature=temperature, use_gate=use_gate, gate_form=gate_form,
              odd_mode=odd_mode)
    residual = [b for b in graph.blocks if b.kind in ("basic", "bottleneck")]
    if not residual and strict:
        raise ConfigError("no basic/bottleneck blocks to attach adaptors to")
    index = 0
    blocks = []
    for block in graph.blocks:
        convs = [i for i, n in enumerate(block.main)
                 if isinstance(n, LayerSpec) and n.kind == "conv2d"]
        if block.kind in ("basic", "bottleneck"):
            sites = [convs[-1] if block.kind == "basic" else convs[1]]
        elif not residual and block.name != "head":
            sites = convs
        else:
            sites = []
        main = list(block.main)
        for pos in sorted(sites, reverse=True):
            conv = main[pos]
            suffix = "adaptor" if len(sites) == 1 else f"adaptor{pos}"
            main.insert(pos + 1, AdaptorSpec(f"{block.name}.{suffix}", conv.c_out, **kw))
        blocks.append(dataclasses.replace(block, main=tuple(main)))
    # number adaptors in execution order for rng streams
    numbered = []
    for block in blocks:
        main = []
        for n in block.main:
            if isinstance(n, AdaptorSpec):
                n = dataclasses.replace(n, index=index)
                index += 1
            main.append(n)
        numbered.append(dataclasses.replace(block, main=tuple(main)))
    out = dataclasses.replace(graph, blocks=tuple(numbered))
    resolve(out)  # odd extents at adaptor sites fail here, at attach time
    return out


__all__ = [
    "AdaptorSpec", "GateSample", "adaptor_forward", "adaptor_output", "attach_adaptors",
    "gumbel_sigmoid", "gumbel_sigmoid_parts", "init_adaptor_params", "sample_gumbel", "sparsity",
]
