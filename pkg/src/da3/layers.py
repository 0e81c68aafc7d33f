"""Declarative layers, model graphs, backbones and training strategies."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Union

import numpy as np

from . import tensor as T
from .adaptor import AdaptorSpec, adaptor_forward, init_adaptor_params
from .errors import ConfigError, DimensionError
from .tape import FROZEN, Tape, Trainability

KINDS = ("conv2d", "linear", "batchnorm2d", "relu", "sigmoid", "avgpool2d", "upsample2x",
         "residual-add", "flatten")
BLOCK_KINDS = ("plain", "basic", "bottleneck")
STRATEGIES = ("full", "bn-only", "bias-only", "mask", "da3", "adaptor-only")

_SHAPE_FIELDS = ("c_in", "c_out", "kh", "kw", "stride", "padding")
_REQUIRED = {
    "conv2d": {"c_in", "c_out", "kh", "kw", "stride", "padding"},
    "linear": {"c_in", "c_out"},
    "batchnorm2d": {"c_in", "c_out"},
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    c_in: int | None = None
    c_out: int | None = None
    kh: int | None = None
    kw: int | None = None
    stride: int | None = None
    padding: int | None = None
    bias: bool = False
    window: int | None = None  # avgpool2d only; None pools globally
    pool_mode: str = "strict"
    mask_enabled: bool = False
    trainability: Trainability = FROZEN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown layer kind {self.kind!r}")
        need = _REQUIRED.get(self.kind, set())
        for f in _SHAPE_FIELDS:
            present = getattr(self, f) is not None
            if f in need and not present:
                raise ConfigError(f"{self.name}: {self.kind} needs {f}")
            if f not in need and present:
                raise ConfigError(f"{self.name}: {self.kind} does not take {f}")
        if self.kind == "batchnorm2d" and self.c_in != self.c_out:
            raise ConfigError(f"{self.name}: batchnorm c_in must equal c_out")
        if self.mask_enabled and self.kind not in ("conv2d", "linear"):
            raise ConfigError(f"{self.name}: masks are only valid on conv2d/linear")
        if self.bias and self.kind not in ("conv2d", "linear"):
            raise ConfigError(f"{self.name}: only conv2d/linear carry a bias flag")
        if self.window is not None and self.kind != "avgpool2d":
            raise ConfigError(f"{self.name}: window is only valid on avgpool2d")
        if self.pool_mode not in T.POOL_MODES:
            raise ConfigError(f"{self.name}: unknown pool mode {self.pool_mode!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "linear", "batchnorm2d")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Learnable parameters (masks included when enabled); no BN buffers."""
        k, n = self.kind, self.name
        if k == "conv2d":
            shapes = {f"{n}.weight": (self.c_out, self.c_in, self.kh, self.kw)}
        elif k == "linear":
            shapes = {f"{n}.weight": (self.c_in, self.c_out)}
        elif k == "batchnorm2d":
            return {f"{n}.gamma": (self.c_out,), f"{n}.beta": (self.c_out,)}
        else:
            return {}
        if self.bias:
            shapes[f"{n}.bias"] = (self.c_out,)
        if self.mask_enabled:
            shapes[f"{n}.mask"] = shapes[f"{n}.weight"]
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "batchnorm2d":
            return {f"{self.name}.running_mean": (self.c_out,),
                    f"{self.name}.running_var": (self.c_out,)}
        return {}

    def trainable(self, pname: str) -> bool:
        t = self.trainability
        role = pname.rsplit(".", 1)[1]
        return {"weight": t.weight, "bias": t.bias, "gamma": t.bn_scale, "beta": t.bn_shift,
                "mask": t.mask and self.mask_enabled}.get(role, False)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        for f in _SHAPE_FIELDS:
            if getattr(self, f) is not None:
                d[f] = getattr(self, f)
        if self.kind in ("conv2d", "linear"):
            d["bias"] = self.bias
            d["mask_enabled"] = self.mask_enabled
        if self.kind == "avgpool2d":
            d["window"] = self.window
            d["pool_mode"] = self.pool_mode
        if self.has_params:
            d["trainability"] = self.trainability.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["trainability"] = Trainability(**d.get("trainability", {}))
        return cls(**d)


Node = Union[LayerSpec, AdaptorSpec]


@dataclass(frozen=True)
class Block:
    """A run of layers; residual blocks add ``main`` and ``shortcut`` before ``post``."""

    name: str
    kind: str
    main: tuple = ()
    shortcut: tuple = ()
    post: tuple = ()

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"{self.name}: unknown block kind {self.kind!r}")
        if self.kind != "plain":
            if not self.post or self.post[0].kind != "residual-add":
                raise ConfigError(f"{self.name}: residual block post must start with residual-add")
        elif self.shortcut or self.post:
            raise ConfigError(f"{self.name}: plain blocks have no shortcut/post")

    def nodes(self) -> Iterator[Node]:
        yield from self.main
        yield from self.shortcut
        yield from self.post

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind,
                "main": [n.to_dict() for n in self.main],
                "shortcut": [n.to_dict() for n in self.shortcut],
                "post": [n.to_dict() for n in self.post]}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        def node(x):
            return AdaptorSpec.from_dict(x) if x.get("kind") == "adaptor" else LayerSpec.from_dict(x)

        return cls(name=d["name"], kind=d["kind"], main=tuple(node(x) for x in d.get("main", [])),
                   shortcut=tuple(node(x) for x in d.get("shortcut", [])),
                   post=tuple(node(x) for x in d.get("post", [])))


@dataclass(frozen=True)
class ModelGraph:
    input_shape: tuple[int, int, int]
    num_classes: int
    blocks: tuple[Block, ...]
    arch: str = "custom"
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        names = [n.name for n in self.nodes()]
        dupes = {x for x in names if names.count(x) > 1}
        if dupes:
            raise ConfigError(f"duplicate layer names: {sorted(dupes)}")
        resolve(self)  # shape errors surface at build time, never mid-forward

    def nodes(self) -> Iterator[Node]:
        for b in self.blocks:
            yield from b.nodes()

    def layers(self) -> list[LayerSpec]:
        return [n for n in self.nodes() if isinstance(n, LayerSpec)]

    def adaptors(self) -> list[AdaptorSpec]:
        return [n for n in self.nodes() if isinstance(n, AdaptorSpec)]

    def classifier(self) -> LayerSpec:
        fcs = [n for n in self.layers() if n.kind == "linear"]
        if not fcs:
            raise ConfigError("graph has no linear classifier")
        return fcs[-1]

    def trainable_params(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for n in self.nodes():
            out.update({k: s for k, s in n.param_shapes().items() if n.trainable(k)})
        return out

    def to_dict(self) -> dict:
        return {"format": "da3-model/1", "arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        try:
            graph = cls(input_shape=tuple(d["input_shape"]), num_classes=int(d["num_classes"]),
                        blocks=tuple(Block.from_dict(b) for b in d["blocks"]),
                        arch=d.get("arch", "custom"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model description: {exc}") from exc
        return graph

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def save_model(graph: ModelGraph, path) -> None:
    from .io import atomic_open

    with atomic_open(path, "w", encoding="utf-8") as fh:
        fh.write(graph.to_json())


def load_model(path) -> ModelGraph:
    from .io import read_json

    return ModelGraph.from_dict(read_json(Path(path)))


# ---------------------------------------------------------------------------
# shape resolution


@dataclass(frozen=True)
class Site:
    node: Node
    block: str
    branch: str  # main | shortcut | post
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]


def _layer_out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    k = layer.kind
    if k == "linear":
        if len(shape) != 2 or shape[1] != layer.c_in:
            raise DimensionError(f"{layer.name}: linear expects [n,{layer.c_in}], got {list(shape)}")
        return (shape[0], layer.c_out)
    if k == "flatten":
        return (shape[0], int(np.prod(shape[1:])))
    if len(shape) != 4:
        raise DimensionError(f"{layer.name}: {k} expects a 4-D input, got {list(shape)}")
    n, c, h, w = shape
    if k == "conv2d":
        if c != layer.c_in:
            raise DimensionError(f"{layer.name}: input has {c} channels, conv expects {layer.c_in}")
        return (n, layer.c_out, T.conv_output_extent(h, layer.kh, layer.stride, layer.padding),
                T.conv_output_extent(w, layer.kw, layer.stride, layer.padding))
    if k == "batchnorm2d":
        if c != layer.c_in:
            raise DimensionError(f"{layer.name}: input has {c} channels, BN expects {layer.c_in}")
        return shape
    if k in ("relu", "sigmoid"):
        return shape
    if k == "avgpool2d":
        if layer.window is None:
            return (n, c, 1, 1)
        kk = layer.window
        if (h % kk or w % kk) and layer.pool_mode == "strict":
            raise ConfigError(f"{layer.name}: extent {h}x{w} not divisible by {kk}")
        if layer.pool_mode == "ceil":
            return (n, c, -(-h // kk), -(-w // kk))
        return (n, c, h // kk, w // kk)
    if k == "upsample2x":
        return (n, c, 2 * h, 2 * w)
    raise DimensionError(f"{layer.name}: {k} cannot appear here")


def _adaptor_out_shape(a: AdaptorSpec, shape):
    if len(shape) != 4 or shape[1] != a.channels:
        raise DimensionError(f"{a.name}: expects [n,{a.channels},h,w], got {list(shape)}")
    if (shape[2] % 2 or shape[3] % 2) and a.odd_mode == "strict":
        raise ConfigError(f"{a.name}: odd extent {shape[2]}x{shape[3]} at adaptor site "
                          "(use odd_mode='ceil' or 'floor')")
    if a.odd_mode == "floor" and (shape[2] % 2 or shape[3] % 2):
        raise ConfigError(f"{a.name}: floor mode cannot restore odd extents on upsampling")
    return shape


def resolve(graph: ModelGraph, hw: tuple[int, int] | None = None, n: int = 1) -> list[Site]:
    """Propagate shapes through the graph; raises on any inconsistency."""
    c, h, w = graph.input_shape
    if hw is not None:
        h, w = hw
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    shape: tuple[int, ...] = (n, c, h, w)
    sites: list[Site] = []

    def run(nodes, shape, block, branch):
        for node in nodes:
            if isinstance(node, AdaptorSpec):
                out = _adaptor_out_shape(node, shape)
            elif node.kind == "residual-add":
                out = shape
            else:
                out = _layer_out_shape(node, shape)
            sites.append(Site(node, block.name, branch, shape, out))
            shape = out
        return shape

    for block in graph.blocks:
        if block.kind == "plain":
            shape = run(block.main, shape, block, "main")
            continue
        main = run(block.main, shape, block, "main")
        short = run(block.shortcut, shape, block, "shortcut")
        if main != short:
            raise DimensionError(f"{block.name}: residual add joins {list(main)} and {list(short)}")
        shape = run(block.post, main, block, "post")
    if shape != (n, graph.num_classes):
        raise DimensionError(f"graph output {list(shape)} != [n, {graph.num_classes}]")
    return sites


# ---------------------------------------------------------------------------
# builders


def _conv(name, c_in, c_out, k, stride=1, padding=None, bias=False):
    return LayerSpec(name, "conv2d", c_in=c_in, c_out=c_out, kh=k, kw=k, stride=stride,
                     padding=k // 2 if padding is None else padding, bias=bias)


def _bn(name, c):
    return LayerSpec(name, "batchnorm2d", c_in=c, c_out=c)


def _relu(name):
    return LayerSpec(name, "relu")


def _post(name):
    return (LayerSpec(f"{name}.add", "residual-add"), _relu(f"{name}.relu"))


def basic_block(name, c_in, width, stride=1, bias=False) -> Block:
    main = (_conv(f"{name}.conv1", c_in, width, 3, stride, bias=bias), _bn(f"{name}.bn1", width),
            _relu(f"{name}.relu1"), _conv(f"{name}.conv2", width, width, 3, bias=bias),
            _bn(f"{name}.bn2", width))
    shortcut = ()
    if stride != 1 or c_in != width:
        shortcut = (_conv(f"{name}.down", c_in, width, 1, stride, bias=bias),
                    _bn(f"{name}.down_bn", width))
    return Block(name, "basic", main, shortcut, _post(name))


def bottleneck_block(name, c_in, width, stride=1, expansion=4) -> Block:
    out = width * expansion
    main = (_conv(f"{name}.conv1", c_in, width, 1), _bn(f"{name}.bn1", width),
            _relu(f"{name}.relu1"), _conv(f"{name}.conv2", width, width, 3, stride),
            _bn(f"{name}.bn2", width), _relu(f"{name}.relu2"),
            _conv(f"{name}.conv3", width, out, 1), _bn(f"{name}.bn3", out))
    shortcut = ()
    if stride != 1 or c_in != out:
        shortcut = (_conv(f"{name}.down", c_in, out, 1, stride), _bn(f"{name}.down_bn", out))
    return Block(name, "bottleneck", main, shortcut, _post(name))


def _head(c, num_classes) -> Block:
    return Block("head", "plain", (LayerSpec("head.pool", "avgpool2d"),
                                   LayerSpec("head.flatten", "flatten"),
                                   LayerSpec("head.fc", "linear", c_in=c, c_out=num_classes,
                                             bias=True)))


def build_backbone(arch: str, num_classes: int, depth=None, base_width: int | None = None,
                   input_shape: tuple[int, int, int] | None = None) -> ModelGraph:
    """Build a shape-checked backbone.

    ``tiny-cnn`` is fixed.  For ``resnet-basic`` an integer ``depth`` means
    that many single-block stages; a sequence gives blocks per stage.
    ``resnet-bottleneck`` (alias ``resnet50`` with depth 3-4-6-3) uses an
    ImageNet-style stem where a 2x2 average pool stands in for the max
    pool, which retains nothing for backward either way.
    """
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    if arch == "resnet50":
        arch, depth = "resnet-bottleneck", depth or (3, 4, 6, 3)
        input_shape = input_shape or (3, 224, 224)
    if arch == "tiny-cnn":
        if depth is not None:
            raise ConfigError("tiny-cnn has a fixed topology")
        stem = Block("stem", "plain", (
            _conv("stem.conv1", 3, 16, 3, bias=True), _bn("stem.bn1", 16), _relu("stem.relu1"),
            _conv("stem.conv2", 16, 32, 3, 2, bias=True), _bn("stem.bn2", 32),
            _relu("stem.relu2")))
        blocks = (stem, basic_block("block1", 32, 32, bias=True), _head(32, num_classes))
        graph = ModelGraph(input_shape or (3, 32, 32), num_classes, blocks, arch)
    elif arch in ("resnet-basic", "resnet-bottleneck"):
        depth = depth if depth is not None else (2 if arch == "resnet-basic" else (3, 4, 6, 3))
        stages = (1,) * depth if isinstance(depth, int) else tuple(depth)
        if not stages or any(int(s) < 1 for s in stages):
            raise ConfigError(f"invalid depth {depth!r}")
        if arch == "resnet-basic":
            width = base_width or 16
            stem = Block("stem", "plain", (_conv("stem.conv", 3, width, 3), _bn("stem.bn", width),
                                           _relu("stem.relu")))
            make, expansion = basic_block, 1
            input_shape = input_shape or (3, 32, 32)
        else:
            width = base_width or 64
            stem = Block("stem", "plain", (_conv("stem.conv", 3, width, 7, 2, 3),
                                           _bn("stem.bn", width), _relu("stem.relu"),
                                           LayerSpec("stem.pool", "avgpool2d", window=2,
                                                     pool_mode="floor")))
            make, expansion = bottleneck_block, 4
            input_shape = input_shape or (3, 224, 224)
        blocks = [stem]
        c_in = width
        for si, count in enumerate(stages):
            w = width * 2 ** si
            for bi in range(int(count)):
                stride = 2 if si > 0 and bi == 0 else 1
                blocks.append(make(f"s{si + 1}b{bi + 1}", c_in, w, stride))
                c_in = w * expansion
        blocks.append(_head(c_in, num_classes))
        graph = ModelGraph(tuple(input_shape), num_classes, tuple(blocks), arch,
                           meta={"depth": list(stages)})
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    return graph


# ---------------------------------------------------------------------------
# parameter counting and strategies


def param_count(layer: Node, trainable_only: bool = False) -> int:
    return sum(int(np.prod(s)) for k, s in layer.param_shapes().items()
               if not trainable_only or layer.trainable(k))


def graph_param_count(graph: ModelGraph, trainable_only: bool = False) -> int:
    return sum(param_count(n, trainable_only) for n in graph.nodes())


_W = Trainability(weight=True, bias=True)


def _strategy_node(node: Node, strategy: str, is_classifier: bool) -> Node:
    if isinstance(node, AdaptorSpec):
        on = strategy in ("full", "da3", "adaptor-only")
        return node.with_trainability(_W if on else FROZEN, _W if on else FROZEN)
    if not node.has_params:
        return node
    bn = node.kind == "batchnorm2d"
    has_bias = node.bias
    if is_classifier:
        t = Trainability(bias=True) if strategy == "bias-only" else Trainability(weight=True,
                                                                                  bias=has_bias)
        return dataclasses.replace(node, trainability=t, mask_enabled=False)
    mask = False
    if strategy == "full":
        t = Trainability(bn_scale=True, bn_shift=True) if bn else Trainability(True, has_bias)
    elif strategy == "bn-only":
        t = Trainability(bn_scale=True, bn_shift=True) if bn else FROZEN
    elif strategy in ("bias-only", "da3"):
        t = Trainability(bn_shift=True) if bn else Trainability(bias=has_bias)
    elif strategy == "mask":
        # BN affine stays trainable so saved activations match full fine-tuning
        t = Trainability(bn_scale=True, bn_shift=True) if bn else Trainability(mask=True)
        mask = not bn
    else:  # adaptor-only
        t = FROZEN
    return dataclasses.replace(node, trainability=t, mask_enabled=mask) if not bn else \
        dataclasses.replace(node, trainability=t)


def set_strategy(graph: ModelGraph, strategy: str) -> ModelGraph:
    """Return a copy of ``graph`` with trainability flags for ``strategy``."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy in ("da3", "adaptor-only") and not graph.adaptors():
        raise ConfigError(f"strategy {strategy!r} needs adaptors; call attach_adaptors first")
    head = graph.classifier().name

    def fix(nodes):
        return tuple(_strategy_node(n, strategy, n.name == head) for n in nodes)

    blocks = tuple(dataclasses.replace(b, main=fix(b.main), shortcut=fix(b.shortcut),
                                       post=fix(b.post)) for b in graph.blocks)
    return dataclasses.replace(graph, blocks=blocks, meta={**graph.meta, "strategy": strategy})


# ---------------------------------------------------------------------------
# parameters


def init_params(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Kaiming-uniform weights, zero biases, identity BN, unit masks."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for node in graph.nodes():
        if isinstance(node, AdaptorSpec):
            params.update(init_adaptor_params(node, rng, dtype))
            continue
        for name, shape in node.param_shapes().items():
            role = name.rsplit(".", 1)[1]
            if role == "weight":
                fan_in = node.c_in * (node.kh * node.kw if node.kind == "conv2d" else 1)
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
            elif role in ("gamma", "mask"):
                params[name] = np.ones(shape, dtype)
            else:
                params[name] = np.zeros(shape, dtype)
        for name, shape in node.buffer_shapes().items():
            params[name] = (np.ones if name.endswith("var") else np.zeros)(shape, dtype)
    return params


def init_missing(graph: ModelGraph, params: dict, seed: int = 0) -> dict[str, np.ndarray]:
    """Fill in parameters the graph needs but ``params`` lacks (adaptors, masks)."""
    dtype = next(iter(params.values())).dtype if params else np.float32
    fresh = init_params(graph, seed, dtype)
    out = dict(params)
    for k, v in fresh.items():
        out.setdefault(k, v)
    return out


def cast_params(params: dict, dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# execution


def forward_record(graph: ModelGraph, params: dict, x, *, policy: str = "paper",
                   bn_mode: str = "frozen", stochastic: bool = False, seed: int = 0,
                   step: int = 0, grad_enabled: bool = True, track_kinks: bool = False,
                   hard_overrides: dict | None = None,
                   on_output: Callable[[str, np.ndarray], None] | None = None):
    """Run ``graph`` on ``x`` while recording a tape.

    ``bn_mode="frozen"`` normalizes with running statistics (adaptation);
    ``"batch"`` uses batch statistics (pretraining from scratch) and leaves
    them in ``tape.batch_stats``.  Gate samples land in ``tape.gates``.
    """
    if bn_mode not in ("frozen", "batch"):
        raise ConfigError(f"unknown bn_mode {bn_mode!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != graph.input_shape[0]:
        raise DimensionError(f"input {list(x.shape)} does not match graph input "
                             f"[n,{graph.input_shape[0]},h,w]")
    tape = Tape(policy, grad_enabled=grad_enabled, track_kinks=track_kinks)
    tape.gates = {}
    tape.batch_stats = {}
    hard_overrides = hard_overrides or {}
    dtype = x.dtype

    def p(layer, name):
        return tape.param(name, params[name], layer.trainable(name))

    def layer_forward(layer: LayerSpec, v, skip=None):
        k, n = layer.kind, layer.name
        if k == "conv2d":
            b = p(layer, f"{n}.bias") if layer.bias else None
            m = p(layer, f"{n}.mask") if layer.mask_enabled else None
            return tape.conv2d(v, p(layer, f"{n}.weight"), b, layer.stride, layer.padding, m, n)
        if k == "linear":
            b = p(layer, f"{n}.bias") if layer.bias else None
            m = p(layer, f"{n}.mask") if layer.mask_enabled else None
            return tape.linear(v, p(layer, f"{n}.weight"), b, m, n)
        if k == "batchnorm2d":
            out, stats = tape.batchnorm(v, p(layer, f"{n}.gamma"), p(layer, f"{n}.beta"),
                                        params[f"{n}.running_mean"], params[f"{n}.running_var"],
                                        training=bn_mode == "batch", label=n)
            if bn_mode == "batch":
                tape.batch_stats[n] = stats
            return out
        if k == "relu":
            return tape.relu(v, n)
        if k == "sigmoid":
            return tape.sigmoid(v, n)
        if k == "avgpool2d":
            return tape.avgpool(v, layer.window, layer.pool_mode, n)
        if k == "upsample2x":
            return tape.upsample(v, label=n)
        if k == "flatten":
            return tape.flatten(v, n)
        if k == "residual-add":
            return tape.add(v, skip, n)
        raise ConfigError(f"cannot execute {k}")

    def run(nodes, v, skip=None):
        for node in nodes:
            if isinstance(node, AdaptorSpec):
                rng = np.random.default_rng([seed, step, node.index]) if stochastic else None
                v, gate = adaptor_forward(tape, v, node, params, stochastic, rng,
                                          hard_overrides.get(node.name))
                if gate is not None:
                    tape.gates[node.name] = gate
            else:
                v = layer_forward(node, v, skip)
                skip = None
            if v.data.dtype != dtype:
                raise DimensionError(f"{node.name}: dtype drifted to {v.data.dtype}")
            if on_output is not None:
                on_output(node.name, v.data)
        return v

    v = tape.constant(x)
    for block in graph.blocks:
        if block.kind == "plain":
            v = run(block.main, v)
        else:
            main = run(block.main, v)
            short = run(block.shortcut, v)
            v = run(block.post, main, skip=short)
    tape.output = v
    return v.data, tape


def evaluate_logits(graph: ModelGraph, params: dict, x, batch_size: int = 256) -> np.ndarray:
    """Inference: frozen BN, deterministic gates, nothing retained."""
    outs = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward_record(graph, params, x[i:i + batch_size], grad_enabled=False)
        outs.append(logits)
    return np.concatenate(outs)


def first_nonfinite_layer(graph: ModelGraph, params: dict, x, **kw) -> str | None:
    found: list[str] = []

    def watch(name, out):
        if not found and not np.all(np.isfinite(out)):
            found.append(name)

    forward_record(graph, params, x, grad_enabled=False, on_output=watch, **kw)
    return found[0] if found else None
