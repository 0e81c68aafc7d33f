"""Reverse-mode autodiff tape with an auditable retention policy.

Every op decides at record time which forward tensors its backward rule
will read and registers them on its node.  Retained tensors come in two
flavours:

* ``saved`` -- counted activation memory.  Multiplicative relationships
  with something trainable (``weight-grad``, ``mask-grad``,
  ``bn-scale-grad``) always land here; ``nonlinearity-jacobian`` entries do
  only under the ``strict`` policy.
* ``transit`` -- pass-through jacobians (ReLU sign masks, sigmoid outputs)
  kept so gradients can reach upstream trainable parameters, but not
  counted under the ``paper`` policy.

A backward rule may only read tensors registered on its own node; anything
else raises :class:`InvariantViolation`.  Frozen parameters and detached
values are constants of the node, never activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvariantViolation

REASONS = ("weight-grad", "mask-grad", "nonlinearity-jacobian", "bn-scale-grad")
POLICIES = ("paper", "strict")


@dataclass(frozen=True)
class SavedEntry:
    value_id: int
    nbytes: int
    reason: str

    def __post_init__(self):
        if self.reason not in REASONS:
            raise InvariantViolation(f"unknown retention reason {self.reason!r}")


def unique_bytes(entries) -> int:
    """Total bytes with each value counted once, however many nodes retain it."""
    seen = {}
    for e in entries:
        seen.setdefault(e.value_id, e.nbytes)
    return sum(seen.values())


@dataclass(frozen=True)
class Trainability:
    weight: bool = False
    bias: bool = False
    bn_scale: bool = False
    bn_shift: bool = False
    mask: bool = False

    @property
    def any(self) -> bool:
        return self.weight or self.bias or self.bn_scale or self.bn_shift or self.mask

    @property
    def multiplicative(self) -> bool:
        return self.weight or self.bn_scale or self.mask

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("weight", "bias", "bn_scale", "bn_shift", "mask")}


FROZEN = Trainability()
ALL = Trainability(True, True, True, True, False)


class Value:
    """A node in the recorded graph: data plus gradient-tracking state."""

    __slots__ = ("id", "data", "requires_grad", "param")

    def __init__(self, vid: int, data: np.ndarray, requires_grad: bool, param: str | None = None):
        self.id = vid
        self.data = data
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(id={self.id}, shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    label: str
    inputs: tuple[int, ...]
    output: int
    params: tuple[str, ...] = ()
    saved: list[SavedEntry] = field(default_factory=list)
    transit: list[SavedEntry] = field(default_factory=list)
    tensors: dict = field(default_factory=dict, repr=False)
    consts: dict = field(default_factory=dict, repr=False)
    backward_fn: object = field(default=None, repr=False)

    def fetch(self, role: str) -> np.ndarray:
        try:
            return self.tensors[role]
        except KeyError:
            raise InvariantViolation(
                f"{self.op} node {self.label!r}: backward read unsaved tensor {role!r}"
            ) from None


class Tape:
    """Records one forward pass; supports exactly one backward."""

    def __init__(self, policy: str = "paper", grad_enabled: bool = True, track_kinks: bool = False):
        if policy not in POLICIES:
            raise ConfigError(f"unknown pass-through policy {policy!r}")
        self.policy = policy
        self.grad_enabled = grad_enabled
        self.track_kinks = track_kinks
        self.kinks: list[np.ndarray] = []
        self.nodes: list[TapeNode] = []
        self.output: Value | None = None
        self._next_id = 0
        self._used = False
        self._values: dict[int, Value] = {}
        self._last: Value | None = None  # default output: the last recorded op

    # -- value constructors -------------------------------------------------

    def _value(self, data, requires_grad=False, param=None) -> Value:
        v = Value(self._next_id, data, requires_grad and self.grad_enabled, param)
        self._values[v.id] = v
        self._next_id += 1
        return v

    def constant(self, data) -> Value:
        return self._value(np.asarray(data))

    def param(self, name: str, data, trainable: bool) -> Value:
        return self._value(data, requires_grad=trainable, param=name if trainable else None)

    def detach(self, v: Value) -> Value:
        """Same values, but a constant to the tape: no gradient, no retention."""
        return self._value(v.data)

    # -- bookkeeping --------------------------------------------------------

    def _node(self, op, label, inputs, out, params=()) -> TapeNode:
        node = TapeNode(op, label, tuple(v.id for v in inputs), out.id,
                        tuple(p.param for p in params if p is not None and p.requires_grad))
        self.nodes.append(node)
        self._last = out
        return node

    def _retain(self, node: TapeNode, role: str, data: np.ndarray, value_id: int, reason: str):
        entry = SavedEntry(value_id, int(data.nbytes), reason)
        if reason == "nonlinearity-jacobian" and self.policy == "paper":
            node.transit.append(entry)
        else:
            node.saved.append(entry)
        node.tensors[role] = data

    def _fresh_id(self) -> int:
        vid = self._next_id
        self._next_id += 1
        return vid

    @staticmethod
    def _rg(*vals) -> bool:
        return any(v is not None and v.requires_grad for v in vals)

    # -- ops ----------------------------------------------------------------

    def conv2d(self, x: Value, w: Value, b: Value | None = None, stride=1, padding=0,
               mask: Value | None = None, label="conv2d") -> Value:
        w_eff = w.data * mask.data if mask is not None else w.data
        out = self._value(T.conv2d(x.data, w_eff, None if b is None else b.data, stride, padding),
                          self._rg(x, w, b, mask))
        if not out.requires_grad:
            return out
        node = self._node("conv2d", label, [x], out, [w, b, mask])
        self._retain_affine(node, x, w, mask)
        node.consts.update(w_eff=w_eff, in_shape=x.shape, kh=w.shape[2], kw=w.shape[3])

        def backward(g):
            grads = {}
            if x.requires_grad:
                grads[x.id] = T.conv2d_grad_input(g, w_eff, x.shape, stride, padding)
            if w.requires_grad or (mask is not None and mask.requires_grad):
                g_eff = T.conv2d_grad_weight(node.fetch("input"), g, w.shape[2], w.shape[3],
                                             stride, padding)
                self._affine_param_grads(grads, node, g_eff, w, mask)
            if b is not None and b.requires_grad:
                grads[b.id] = g.sum(axis=(0, 2, 3))
            return grads

        node.backward_fn = backward
        return out

    def linear(self, x: Value, w: Value, b: Value | None = None, mask: Value | None = None,
               label="linear") -> Value:
        w_eff = w.data * mask.data if mask is not None else w.data
        out = self._value(T.matmul_bias(x.data, w_eff, None if b is None else b.data),
                          self._rg(x, w, b, mask))
        if not out.requires_grad:
            return out
        node = self._node("linear", label, [x], out, [w, b, mask])
        self._retain_affine(node, x, w, mask)

        def backward(g):
            grads = {}
            if x.requires_grad:
                grads[x.id] = g @ w_eff.T
            if w.requires_grad or (mask is not None and mask.requires_grad):
                self._affine_param_grads(grads, node, node.fetch("input").T @ g, w, mask)
            if b is not None and b.requires_grad:
                grads[b.id] = g.sum(axis=0)
            return grads

        node.backward_fn = backward
        return out

    def _retain_affine(self, node, x, w, mask):
        mask_rg = mask is not None and mask.requires_grad
        if w.requires_grad or mask_rg:
            self._retain(node, "input", x.data, x.id, "weight-grad" if w.requires_grad else "mask-grad")
        if mask_rg:
            self._retain(node, "weight", w.data, w.id, "mask-grad")
        if w.requires_grad and mask is not None:
            node.consts["mask"] = mask.data

    @staticmethod
    def _affine_param_grads(grads, node, g_eff, w, mask):
        if w.requires_grad:
            grads[w.id] = g_eff * node.consts["mask"] if mask is not None else g_eff
        if mask is not None and mask.requires_grad:
            grads[mask.id] = g_eff * node.fetch("weight")

    def batchnorm(self, x: Value, gamma: Value, beta: Value, mean, var, eps=1e-5,
                  training=False, label="batchnorm2d"):
        """Returns the output value and the (mean, var) actually used."""
        if training:
            mean, var = T.batchnorm_stats(x.data)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        y = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)
        out = self._value(y, self._rg(x, gamma, beta))
        if not out.requires_grad:
            return out, (mean, var)
        node = self._node("batchnorm2d", label, [x], out, [gamma, beta])
        chan = (0, 2, 3)
        if training:
            if x.requires_grad or gamma.requires_grad:
                self._retain(node, "xhat", xhat, self._fresh_id(), "bn-scale-grad")
        elif gamma.requires_grad:
            self._retain(node, "input", x.data, x.id, "bn-scale-grad")

        def backward(g):
            grads = {}
            scale = (gamma.data * inv).reshape(1, -1, 1, 1)
            if training:
                if x.requires_grad or gamma.requires_grad:
                    xh = node.fetch("xhat")
                    if gamma.requires_grad:
                        grads[gamma.id] = (g * xh).sum(axis=chan)
                    if x.requires_grad:
                        m = g.shape[0] * g.shape[2] * g.shape[3]
                        grads[x.id] = scale / m * (
                            m * g - g.sum(axis=chan, keepdims=True)
                            - xh * (g * xh).sum(axis=chan, keepdims=True))
            else:
                if gamma.requires_grad:
                    centered = node.fetch("input") - mean.reshape(1, -1, 1, 1)
                    grads[gamma.id] = (g * centered).sum(axis=chan) * inv
                if x.requires_grad:
                    grads[x.id] = g * scale
            if beta.requires_grad:
                grads[beta.id] = g.sum(axis=chan)
            return grads

        node.backward_fn = backward
        return out, (mean, var)

    def relu(self, x: Value, label="relu") -> Value:
        positive = x.data > 0
        out = self._value(T.relu(x.data), x.requires_grad)  # NaN propagates, not masked to 0
        if self.track_kinks:
            self.kinks.append(np.packbits(positive))
        if not out.requires_grad:
            return out
        node = self._node("relu", label, [x], out)
        self._retain(node, "sign", np.packbits(positive), self._fresh_id(), "nonlinearity-jacobian")

        def backward(g):
            sign = np.unpackbits(node.fetch("sign"), count=g.size).reshape(g.shape)
            return {x.id: g * sign}

        node.backward_fn = backward
        return out

    def sigmoid(self, x: Value, label="sigmoid") -> Value:
        out = self._value(T.sigmoid(x.data), x.requires_grad)
        if not out.requires_grad:
            return out
        node = self._node("sigmoid", label, [x], out)
        self._retain(node, "output", out.data, out.id, "nonlinearity-jacobian")

        def backward(g):
            s = node.fetch("output")
            return {x.id: g * s * (1 - s)}

        node.backward_fn = backward
        return out

    def add(self, a: Value, b: Value, label="residual-add") -> Value:
        out = self._value(T.add(a.data, b.data), self._rg(a, b))
        if out.requires_grad:
            node = self._node("add", label, [a, b], out)
            # a and b may be the same value: contributions must add, not overwrite
            node.backward_fn = lambda g: ({a.id: 2 * g} if a.id == b.id else
                                          {v.id: g for v in (a, b) if v.requires_grad})
        return out

    def mul(self, a: Value, b: Value, label="mul") -> Value:
        """Elementwise product; ``b`` may be a single-channel plane broadcast over channels."""
        out = self._value(T.mul(a.data, b.data), self._rg(a, b))
        if not out.requires_grad:
            return out
        node = self._node("mul", label, [a, b], out)
        for mine, other, role in ((a, b, "b"), (b, a, "a")):
            if mine.requires_grad:
                if other.requires_grad:
                    self._retain(node, role, other.data, other.id, "mask-grad")
                else:
                    node.consts[role] = other.data

        def read(role):
            return node.consts[role] if role in node.consts else node.fetch(role)

        def backward(g):
            grads = {}
            if a.requires_grad:
                grads[a.id] = g * read("b")
            if b.requires_grad:
                gb = g * read("a")
                if b.shape != a.shape:
                    gb = gb.sum(axis=1, keepdims=True)
                grads[b.id] = grads.get(b.id, 0) + gb
            return grads

        node.backward_fn = backward
        return out

    def scale(self, a: Value, alpha: float, label="scale") -> Value:
        out = self._value(T.scale(a.data, alpha), a.requires_grad)
        if out.requires_grad:
            node = self._node("scale", label, [a], out)
            node.backward_fn = lambda g: {a.id: T.scale(g, alpha)}
        return out

    def avgpool(self, x: Value, k: int | None = 2, mode="strict", label="avgpool2d") -> Value:
        """``k=None`` pools globally to ``1x1``."""
        data = T.global_avgpool(x.data) if k is None else T.avgpool2d(x.data, k, mode)
        out = self._value(data, x.requires_grad)
        if out.requires_grad:
            node = self._node("avgpool2d", label, [x], out)
            if k is None:
                node.backward_fn = lambda g: {x.id: T.global_avgpool_grad(g, x.shape)}
            else:
                node.backward_fn = lambda g: {x.id: T.avgpool2d_grad(g, x.shape, k, mode)}
        return out

    def upsample(self, x: Value, out_hw=None, label="upsample2x") -> Value:
        out = self._value(T.upsample_nearest2x(x.data, out_hw), x.requires_grad)
        if out.requires_grad:
            node = self._node("upsample2x", label, [x], out)
            node.backward_fn = lambda g: {x.id: T.upsample_nearest2x_grad(g, x.shape)}
        return out

    def flatten(self, x: Value, label="flatten") -> Value:
        out = self._value(x.data.reshape(x.shape[0], -1), x.requires_grad)
        if out.requires_grad:
            node = self._node("flatten", label, [x], out)
            node.backward_fn = lambda g: {x.id: g.reshape(x.shape)}
        return out

    def gumbel_sigmoid(self, logits: Value, beta: float, temperature: float, noise=None,
                       form: str = "logprob", label="gumbel-sigmoid"):
        """Soft gate value plus the (non-differentiable) hard gate and pi0 arrays."""
        from .adaptor import gumbel_sigmoid_parts

        soft, hard, pi0, dsoft = gumbel_sigmoid_parts(logits.data, beta, temperature, noise, form)
        out = self._value(soft, logits.requires_grad)
        if self.track_kinks:
            self.kinks.append(np.packbits(hard.astype(bool)))
        if out.requires_grad:
            node = self._node("gumbel-sigmoid", label, [logits], out)
            self._retain(node, "soft", soft, out.id, "nonlinearity-jacobian")
            self._retain(node, "pi0", pi0, self._fresh_id(), "nonlinearity-jacobian")

            def backward(g):
                return {logits.id: g * dsoft(node.fetch("soft"), node.fetch("pi0"))}

            node.backward_fn = backward
        return out, hard, pi0

    def straight_through(self, soft: Value, hard: np.ndarray, label="straight-through") -> Value:
        """Forward value ``hard``, gradient passed to ``soft`` unchanged."""
        out = self._value(hard.astype(soft.data.dtype), soft.requires_grad)
        if out.requires_grad:
            node = self._node("straight-through", label, [soft], out)
            node.backward_fn = lambda g: {soft.id: g}
        return out

    # -- backward / audit ---------------------------------------------------

    def backward(self, loss_grad, output: Value | None = None) -> dict[str, np.ndarray]:
        if self._used:
            raise InvariantViolation("tape is single-use: record a new forward before backward")
        self._used = True
        output = output or self.output or self._last
        if output is None:
            raise InvariantViolation("tape has no recorded output")
        loss_grad = np.asarray(loss_grad, dtype=output.data.dtype)
        if loss_grad.shape != output.shape:
            raise InvariantViolation(f"loss grad shape {loss_grad.shape} != output {output.shape}")
        grads: dict[int, np.ndarray] = {output.id: loss_grad}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for vid, contrib in node.backward_fn(g).items():
                if vid in grads:
                    grads[vid] = grads[vid] + contrib
                else:
                    grads[vid] = np.zeros_like(self._values[vid].data) + contrib
        out = {}
        for vid, g in grads.items():
            name = self._values[vid].param
            if name is not None:
                if g.shape != self._values[vid].shape:
                    raise InvariantViolation(f"gradient shape mismatch for {name}")
                out[name] = g
        # drop retained tensors: their lifetime ends with backward
        for node in self.nodes:
            node.tensors.clear()
        return out

    def saved_entries(self) -> list[SavedEntry]:
        return [e for n in self.nodes for e in n.saved]

    def saved_bytes(self) -> int:
        return unique_bytes(self.saved_entries())

    def transit_bytes(self) -> int:
        counted = {e.value_id for e in self.saved_entries()}
        return unique_bytes(e for n in self.nodes for e in n.transit if e.value_id not in counted)

    def audit(self) -> dict:
        """Machine-readable dump of every node and its retained tensors."""
        def entries(es):
            return [{"value_id": e.value_id, "bytes": e.nbytes, "reason": e.reason} for e in es]

        return {
            "policy": self.policy,
            "nodes": [
                {"index": i, "op": n.op, "label": n.label, "inputs": list(n.inputs),
                 "output": n.output, "params": list(n.params),
                 "saved": entries(n.saved), "transit": entries(n.transit)}
                for i, n in enumerate(self.nodes)
            ],
            "saved_bytes": self.saved_bytes(),
            "transit_bytes": self.transit_bytes(),
        }


@dataclass(frozen=True)
class RequiredSave:
    """One tensor a layer's backward will read: which one, its size, and why."""

    tensor: str  # input | weight | xhat | sign | output
    nbytes: int
    reason: str


def required_saves(layer, t: Trainability, policy: str = "paper", *, in_shape,
                   input_requires_grad: bool = True, dtype=np.float32,
                   bn_training: bool = False) -> list[RequiredSave]:
    """Analytic retention rule mirroring the tape's record-time decisions.

    Under ``paper`` the nonlinearity-jacobian entries are dropped; under
    ``strict`` they are listed whenever a gradient has to pass through.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown pass-through policy {policy!r}")
    item = np.dtype(dtype).itemsize
    numel = int(np.prod(in_shape, dtype=np.int64))
    act = numel * item
    out: list[RequiredSave] = []
    kind = layer.kind
    if kind in ("conv2d", "linear"):
        mask = t.mask and getattr(layer, "mask_enabled", False)
        if t.weight or mask:
            out.append(RequiredSave("input", act, "weight-grad" if t.weight else "mask-grad"))
        if mask:
            if kind == "conv2d":
                wshape = (layer.c_out, layer.c_in, layer.kh, layer.kw)
            else:
                wshape = (layer.c_in, layer.c_out)
            out.append(RequiredSave("weight", int(np.prod(wshape)) * item, "mask-grad"))
    elif kind == "batchnorm2d":
        if bn_training:
            if input_requires_grad or t.bn_scale:
                out.append(RequiredSave("xhat", act, "bn-scale-grad"))
        elif t.bn_scale:
            out.append(RequiredSave("input", act, "bn-scale-grad"))
    elif kind == "relu" and input_requires_grad and policy == "strict":
        out.append(RequiredSave("sign", -(-numel // 8), "nonlinearity-jacobian"))
    elif kind == "sigmoid" and input_requires_grad and policy == "strict":
        out.append(RequiredSave("output", act, "nonlinearity-jacobian"))
    return out


def detach(tape: Tape, x: Value) -> Value:
    return tape.detach(x)


def backward(tape: Tape, loss_grad) -> dict[str, np.ndarray]:
    return tape.backward(loss_grad)
