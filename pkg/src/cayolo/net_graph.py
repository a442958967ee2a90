"""YOLOv4-style detector graph with coordinate attention and a deeper neck.

The model is a flat, topologically ordered list of :class:`Node` records plus a
parameter store.  ``forward`` interprets the node list with the kernels in
:mod:`cayolo.tensor_core`; ``describe`` and ``param_count`` only need the node
list, so audits of the full-width network never allocate its weights.

Layout (channel widths before ``width_multiplier``):

* backbone: CSPDarknet53, stem 32 then stages at 64/128/256/512/1024 with
  1/2/8/8/4 residual blocks, Mish activations.  With ``use_ca`` a coordinate
  attention block follows each stage's stride-2 conv, ahead of the CSP split
  and residual blocks.
* neck: ``spp_conv_count`` convs, SPP (5/9/13), ``spp_conv_count`` convs on the
  stride-32 path; the stride-16 and stride-8 backbone taps each pass through
  ``lateral_conv_count`` convs before fusion; PANet top-down then bottom-up
  fusion with five-conv blocks, leaky activations.
* heads: 3x3 conv then a biased 1x1 conv to ``3 * (5 + num_classes)`` channels
  at strides 8, 16 and 32.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .anchor_kmeans import format_anchors, parse_anchors, sort_anchors
from .config import read_config, to_bool, to_fraction, to_int
from .coord_attention import CAParams, ca_forward, ca_param_count, hidden_channels
from .errors import ConfigError, ShapeError

DEFAULT_ANCHORS = ((12, 16), (19, 36), (40, 28), (36, 75), (76, 55),
                   (72, 146), (142, 110), (192, 243), (459, 401))
STAGE_WIDTHS = (64, 128, 256, 512, 1024)
STAGE_BLOCKS = (1, 2, 8, 8, 4)
STEM_WIDTH = 32
ANCHORS_PER_HEAD = 3


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 416
    num_classes: int = 3
    width_multiplier: Fraction = Fraction(1)
    ca_reduction: int = 16
    use_ca: bool = True
    spp_conv_count: int = 5
    lateral_conv_count: int = 3
    anchors: Tuple[Tuple[float, float], ...] = DEFAULT_ANCHORS

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier))
        object.__setattr__(self, "anchors",
                           tuple(tuple(float(v) for v in a) for a in sort_anchors(self.anchors)))
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        if self.ca_reduction < 1:
            raise ConfigError("ca_reduction must be at least 1")
        if self.spp_conv_count < 3 or self.spp_conv_count % 2 == 0:
            raise ConfigError(f"spp_conv_count must be odd and >= 3, got {self.spp_conv_count}")
        if self.lateral_conv_count < 1 or self.lateral_conv_count % 2 == 0:
            raise ConfigError(f"lateral_conv_count must be odd and >= 1, got {self.lateral_conv_count}")
        if len(self.anchors) != 3 * ANCHORS_PER_HEAD:
            raise ConfigError(f"need 9 anchors, got {len(self.anchors)}")

    @property
    def head_channels(self) -> int:
        return ANCHORS_PER_HEAD * (5 + self.num_classes)

    @classmethod
    def baseline(cls, **kw) -> "NetConfig":
        """Original layout: no attention, 3 SPP-side convs, 1 lateral conv."""
        return cls(**{"use_ca": False, "spp_conv_count": 3, "lateral_conv_count": 1, **kw})

    @classmethod
    def ca_only(cls, **kw) -> "NetConfig":
        return cls(**{"use_ca": True, "spp_conv_count": 3, "lateral_conv_count": 1, **kw})

    @classmethod
    def improved(cls, **kw) -> "NetConfig":
        return cls(**{"use_ca": True, "spp_conv_count": 5, "lateral_conv_count": 3, **kw})

    @classmethod
    def from_mapping(cls, values: dict) -> "NetConfig":
        kw = {}
        for key, raw in values.items():
            if key in ("input_size", "num_classes", "ca_reduction", "spp_conv_count",
                       "lateral_conv_count"):
                kw[key] = to_int(raw, key)
            elif key == "width_multiplier":
                kw[key] = to_fraction(raw)
            elif key == "use_ca":
                kw[key] = to_bool(raw)
            elif key == "anchors":
                kw[key] = tuple(map(tuple, parse_anchors(str(raw))))
            elif key == "mode":
                continue
            else:
                raise ConfigError(f"unknown config key {key!r}")
        mode = values.get("mode")
        if mode is None:
            return cls(**kw)
        factories = {"baseline": cls.baseline, "ca": cls.ca_only, "improved": cls.improved}
        if mode not in factories:
            raise ConfigError(f"mode must be one of {sorted(factories)}, got {mode!r}")
        return factories[mode](**kw)

    @classmethod
    def from_file(cls, path) -> "NetConfig":
        return cls.from_mapping(read_config(path))

    def to_mapping(self) -> dict:
        return {
            "input_size": self.input_size, "num_classes": self.num_classes,
            "width_multiplier": str(self.width_multiplier), "ca_reduction": self.ca_reduction,
            "use_ca": self.use_ca, "spp_conv_count": self.spp_conv_count,
            "lateral_conv_count": self.lateral_conv_count,
            "anchors": format_anchors(self.anchors),
        }

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_mapping().items():
            v = str(v).lower() if isinstance(v, bool) else v
            lines.append(f'{k} = "{v}"' if k == "anchors" else f"{k} = {v}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    out_channels: int
    stride: int
    attrs: Dict = field(default_factory=dict)


class HeadOutput(NamedTuple):
    """Raw head maps ordered by stride 8, 16, 32."""

    stride8: np.ndarray
    stride16: np.ndarray
    stride32: np.ndarray

    def by_stride(self) -> Dict[int, np.ndarray]:
        return {8: self.stride8, 16: self.stride16, 32: self.stride32}


_RUNNING = ("mean", "var")


def _conv_shapes(prefix, co, ci, k, bn=True, bias=False):
    shapes = {f"{prefix}weight": (co, ci, k, k)}
    if bias:
        shapes[f"{prefix}bias"] = (co,)
    if bn:
        for s in ("gamma", "beta", "mean", "var"):
            shapes[f"{prefix}bn_{s}"] = (co,)
    return shapes


def node_param_shapes(node: Node, in_channels: Sequence[int]) -> Dict[str, Tuple[int, ...]]:
    """Array names and shapes owned by a node, in serialisation order."""
    a = node.attrs
    if node.kind == "conv-bn-act":
        return _conv_shapes("", node.out_channels, in_channels[0], a["k"])
    if node.kind == "residual":
        c, h = node.out_channels, a["hidden"]
        return {**_conv_shapes("conv1.", h, c, 1), **_conv_shapes("conv2.", c, h, 3)}
    if node.kind == "coordinate-attention":
        c, m = node.out_channels, a["hidden"]
        return {"f1.weight": (m, c, 1, 1), "f1.bias": (m,),
                "bn.gamma": (m,), "bn.beta": (m,), "bn.mean": (m,), "bn.var": (m,),
                "fh.weight": (c, m, 1, 1), "fh.bias": (c,),
                "fw.weight": (c, m, 1, 1), "fw.bias": (c,)}
    if node.kind == "head":
        return _conv_shapes("", node.out_channels, in_channels[0], 1, bn=False, bias=True)
    return {}


def is_learnable(name: str) -> bool:
    return not name.endswith(tuple(f"_{r}" for r in _RUNNING)) and \
        not name.endswith(tuple(f".{r}" for r in _RUNNING))


class _Builder:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.nodes: List[Node] = []
        self.channels: Dict[str, int] = {"input": 3}
        self.strides: Dict[str, int] = {"input": 1}

    def width(self, base: int) -> int:
        return max(1, math.floor(base * self.cfg.width_multiplier + Fraction(1, 2)))

    def add(self, name, kind, inputs, out_channels, stride, **attrs) -> str:
        if name in self.channels:
            raise ValueError(f"duplicate node name {name}")
        self.nodes.append(Node(name, kind, tuple(inputs), out_channels, stride, attrs))
        self.channels[name] = out_channels
        self.strides[name] = stride
        return name

    def conv(self, name, src, out_channels, k, act, stride=1) -> str:
        return self.add(name, "conv-bn-act", [src], out_channels, self.strides[src] * stride,
                        k=k, s=stride, act=act)

    def concat(self, name, srcs) -> str:
        stride = self.strides[srcs[0]]
        return self.add(name, "concat", srcs, sum(self.channels[s] for s in srcs), stride)

    def conv_stack(self, prefix, src, n, narrow, wide, pinch=None) -> str:
        """Alternating 1x1 / 3x3 convs starting and ending on 1x1 at ``narrow`` width.

        Without ``pinch`` every 3x3 widens to ``wide`` (the YOLOv4 three/five
        conv pattern).  With ``pinch`` the convs past the third form
        1x1(->pinch), 3x3(->narrow) pairs.
        """
        x = self.conv(f"{prefix}.0", src, narrow, 1, "leaky")
        for i in range(1, n, 2):
            if pinch is None or i < 3:
                x = self.conv(f"{prefix}.{i}", x, wide, 3, "leaky")
                x = self.conv(f"{prefix}.{i + 1}", x, narrow, 1, "leaky")
            else:
                x = self.conv(f"{prefix}.{i}", x, pinch, 1, "leaky")
                x = self.conv(f"{prefix}.{i + 1}", x, narrow, 3, "leaky")
        return x

    def lateral(self, prefix, src, n, width) -> str:
        """1x1 to ``width`` then alternating 3x3 / 1x1 pairs at ``width``."""
        x = self.conv(f"{prefix}.0", src, width, 1, "leaky")
        for i in range(1, n, 2):
            x = self.conv(f"{prefix}.{i}", x, width, 3, "leaky")
            x = self.conv(f"{prefix}.{i + 1}", x, width, 1, "leaky")
        return x


def build_graph(cfg: NetConfig) -> Tuple[Tuple[Node, ...], Tuple[str, str, str]]:
    b = _Builder(cfg)
    W = b.width

    x = b.conv("backbone.stem", "input", W(STEM_WIDTH), 3, "mish")
    taps = []
    for s, (base, blocks) in enumerate(zip(STAGE_WIDTHS, STAGE_BLOCKS), 1):
        p = f"backbone.stage{s}"
        out = W(base)
        x = b.conv(f"{p}.down", x, out, 3, "mish", stride=2)
        if cfg.use_ca:
            m = hidden_channels(out, cfg.ca_reduction)
            x = b.add(f"{p}.ca", "coordinate-attention", [x], out, b.strides[x],
                      reduction=cfg.ca_reduction, hidden=m)
        part = out if s == 1 else W(base // 2)
        hidden = W(base // 2)
        split0 = b.conv(f"{p}.split0", x, part, 1, "mish")
        y = b.conv(f"{p}.split1", x, part, 1, "mish")
        for r in range(blocks):
            y = b.add(f"{p}.res{r}", "residual", [y], part, b.strides[y],
                      hidden=hidden if s == 1 else part, act="mish")
        y = b.conv(f"{p}.post", y, part, 1, "mish")
        y = b.concat(f"{p}.cat", [y, split0])
        x = b.conv(f"{p}.fuse", y, out, 1, "mish")
        taps.append(x)
    l3, l4, l5 = taps[2], taps[3], taps[4]

    n_spp, n_lat = cfg.spp_conv_count, cfg.lateral_conv_count
    p5 = b.conv_stack("neck.spp_pre", l5, n_spp, W(512), W(1024), W(256))
    p5 = b.add("neck.spp", "spp", [p5], 4 * b.channels[p5], b.strides[p5], kernels=tc.SPP_KERNELS)
    p5 = b.conv_stack("neck.spp_post", p5, n_spp, W(512), W(1024), W(256))

    up5 = b.conv("neck.up5.conv", p5, W(256), 1, "leaky")
    up5 = b.add("neck.up5", "upsample", [up5], b.channels[up5], b.strides[up5] // 2)
    lat4 = b.lateral("neck.lateral4", l4, n_lat, W(256))
    p4 = b.concat("neck.cat4", [lat4, up5])
    p4 = b.conv_stack("neck.td4", p4, 5, W(256), W(512))

    up4 = b.conv("neck.up4.conv", p4, W(128), 1, "leaky")
    up4 = b.add("neck.up4", "upsample", [up4], b.channels[up4], b.strides[up4] // 2)
    lat3 = b.lateral("neck.lateral3", l3, n_lat, W(128))
    p3 = b.concat("neck.cat3", [lat3, up4])
    p3 = b.conv_stack("neck.td3", p3, 5, W(128), W(256))

    hc = cfg.head_channels
    h8 = b.conv("head8.conv", p3, W(256), 3, "leaky")
    h8 = b.add("head8.out", "head", [h8], hc, b.strides[h8])

    d3 = b.conv("neck.down3", p3, W(256), 3, "leaky", stride=2)
    p4 = b.concat("neck.cat4b", [d3, p4])
    p4 = b.conv_stack("neck.bu4", p4, 5, W(256), W(512))
    h16 = b.conv("head16.conv", p4, W(512), 3, "leaky")
    h16 = b.add("head16.out", "head", [h16], hc, b.strides[h16])

    d4 = b.conv("neck.down4", p4, W(512), 3, "leaky", stride=2)
    p5 = b.concat("neck.cat5b", [d4, p5])
    p5 = b.conv_stack("neck.bu5", p5, 5, W(512), W(1024))
    h32 = b.conv("head32.conv", p5, W(1024), 3, "leaky")
    h32 = b.add("head32.out", "head", [h32], hc, b.strides[h32])

    return tuple(b.nodes), (h8, h16, h32)


@dataclass(frozen=True)
class Model:
    cfg: NetConfig
    nodes: Tuple[Node, ...]
    outputs: Tuple[str, str, str]
    params: Optional[Dict[str, Dict[str, np.ndarray]]]
    seed: int

    def input_channels(self, node: Node) -> List[int]:
        chans = {"input": 3}
        for n in self.nodes:
            chans[n.name] = n.out_channels
        return [chans[i] for i in node.inputs]

    def param_shapes(self) -> Dict[str, Dict[str, Tuple[int, ...]]]:
        chans = {"input": 3}
        out = {}
        for n in self.nodes:
            shapes = node_param_shapes(n, [chans[i] for i in n.inputs])
            if shapes:
                out[n.name] = shapes
            chans[n.name] = n.out_channels
        return out


def _init_arrays(shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf.endswith(("gamma", "var")):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return arrays


def build_model(cfg: NetConfig, seed: int = 42, init_weights: bool = True) -> Model:
    """Build the graph; with ``init_weights`` also draw He-uniform weights.

    Each node gets its own generator seeded by ``(seed, node index)``.
    Biases and BN shifts start at zero, BN scales and variances at one.
    ``init_weights=False`` yields a weightless model good for audits only.
    """
    nodes, outputs = build_graph(cfg)
    model = Model(cfg, nodes, outputs, None, seed)
    if not init_weights:
        return model
    params = {}
    index = {n.name: i for i, n in enumerate(nodes)}
    for name, shapes in model.param_shapes().items():
        params[name] = _init_arrays(shapes, np.random.default_rng([seed, index[name]]))
    return replace(model, params=params)


def _conv_bn(x, arrays, prefix, k, stride, act):
    conv = tc.ConvParams(arrays[f"{prefix}weight"], None, stride, (k - 1) // 2)
    bn = tc.BNParams(arrays[f"{prefix}bn_gamma"], arrays[f"{prefix}bn_beta"],
                     arrays[f"{prefix}bn_mean"], arrays[f"{prefix}bn_var"])
    return tc.activate(tc.batchnorm_infer(tc.conv2d(x, conv), bn), act)


def ca_params_from_arrays(arrays: Dict[str, np.ndarray], reduction: int) -> CAParams:
    return CAParams(
        f1=tc.ConvParams(arrays["f1.weight"], arrays["f1.bias"]),
        bn=tc.BNParams(arrays["bn.gamma"], arrays["bn.beta"], arrays["bn.mean"], arrays["bn.var"]),
        fh=tc.ConvParams(arrays["fh.weight"], arrays["fh.bias"]),
        fw=tc.ConvParams(arrays["fw.weight"], arrays["fw.bias"]),
        reduction=reduction,
    )


def _cast(params, dtype):
    if dtype is None:
        return params
    return {n: {k: v.astype(dtype) for k, v in arrs.items()} for n, arrs in params.items()}


def forward(m: Model, x: np.ndarray, dtype=None) -> HeadOutput:
    """Inference pass; returns raw head maps at strides 8, 16, 32.

    ``dtype`` (e.g. ``np.float32``) casts input and weights first; the
    default keeps float64.
    """
    if m.params is None:
        raise ValueError("model was built without weights (init_weights=False)")
    size = m.cfg.input_size
    if not isinstance(x, np.ndarray) or x.ndim != 4 or x.shape[1:] != (3, size, size):
        raise ShapeError(f"expected input of shape (N, 3, {size}, {size}), got "
                         f"{getattr(x, 'shape', None)}")
    params = _cast(m.params, dtype)
    values = {"input": x if dtype is None else x.astype(dtype)}
    last_use = {}
    for i, node in enumerate(m.nodes):
        for src in node.inputs:
            last_use[src] = i
    keep = set(m.outputs)

    for i, node in enumerate(m.nodes):
        ins = [values[s] for s in node.inputs]
        a = node.attrs
        if node.kind == "conv-bn-act":
            out = _conv_bn(ins[0], params[node.name], "", a["k"], a["s"], a["act"])
        elif node.kind == "residual":
            arr = params[node.name]
            h = _conv_bn(ins[0], arr, "conv1.", 1, 1, a["act"])
            out = ins[0] + _conv_bn(h, arr, "conv2.", 3, 1, a["act"])
        elif node.kind == "coordinate-attention":
            out, _ = ca_forward(ins[0], ca_params_from_arrays(params[node.name], a["reduction"]))
        elif node.kind == "spp":
            out = tc.spp(ins[0], a["kernels"])
        elif node.kind == "upsample":
            out = tc.upsample2x(ins[0])
        elif node.kind == "concat":
            out = tc.concat_channels(ins)
        elif node.kind == "head":
            arr = params[node.name]
            out = tc.conv2d(ins[0], tc.ConvParams(arr["weight"], arr["bias"]))
        else:
            raise ValueError(f"unknown node kind {node.kind}")
        values[node.name] = out
        for src in node.inputs:
            if last_use[src] == i and src not in keep:
                del values[src]
    return HeadOutput(*(values[name] for name in m.outputs))


def node_param_count(node: Node, shapes: Dict[str, Tuple[int, ...]]) -> int:
    return sum(int(np.prod(s)) for k, s in shapes.items() if is_learnable(k))


def param_count(m: Model) -> Tuple[int, Dict[str, int]]:
    """Learnable scalars (weights, biases, BN gamma/beta) in total and per node."""
    shapes = m.param_shapes()
    per_node = {n.name: node_param_count(n, shapes.get(n.name, {})) for n in m.nodes}
    return sum(per_node.values()), per_node


@dataclass(frozen=True)
class LayerRow:
    name: str
    kind: str
    in_shapes: Tuple[Tuple[int, int, int], ...]
    out_shape: Tuple[int, int, int]
    params: int

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind,
                "in_shapes": [list(s) for s in self.in_shapes],
                "out_shape": list(self.out_shape), "params": self.params}


def describe(m: Model) -> List[LayerRow]:
    """One row per node in execution order, with (C, H, W) shapes at the configured size.

    Raises ShapeError if any edge is inconsistent (channel count, spatial
    size or concat alignment).
    """
    size = m.cfg.input_size
    shapes = {"input": (3, size, size)}
    pshapes = m.param_shapes()
    rows = []
    for n in m.nodes:
        ins = tuple(shapes[s] for s in n.inputs)
        c, h, w = ins[0]
        k = n.attrs.get("k", 1)
        if n.kind == "conv-bn-act":
            s = n.attrs["s"]
            pad = (k - 1) // 2
            out = (n.out_channels, (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)
        elif n.kind == "upsample":
            out = (c, 2 * h, 2 * w)
        elif n.kind == "concat":
            if any(i[1:] != (h, w) for i in ins):
                raise ShapeError(f"{n.name}: concat of mismatched maps {ins}")
            out = (sum(i[0] for i in ins), h, w)
        elif n.kind == "spp":
            out = (len(n.attrs["kernels"]) * c + c, h, w)
        else:
            out = (n.out_channels, h, w)
        if out[0] != n.out_channels:
            raise ShapeError(f"{n.name}: computed {out[0]} channels, node declares {n.out_channels}")
        if out[1] * n.stride != size or out[2] * n.stride != size:
            raise ShapeError(f"{n.name}: spatial {out[1:]} disagrees with stride {n.stride}")
        first = pshapes.get(n.name, {})
        wkey = {"residual": "conv1.weight", "coordinate-attention": "f1.weight"}.get(n.kind, "weight")
        if wkey in first and first[wkey][1] != c:
            raise ShapeError(f"{n.name}: weights expect {first[wkey][1]} input channels, edge carries {c}")
        shapes[n.name] = out
        rows.append(LayerRow(n.name, n.kind, ins, out, node_param_count(n, first)))
    return rows


def format_table(rows: Sequence[LayerRow]) -> str:
    lines = [f"{'name':<28} {'type':<22} {'in':<34} {'out':<18} {'params':>12}"]
    for r in rows:
        ins = " + ".join("x".join(map(str, s)) for s in r.in_shapes)
        lines.append(f"{r.name:<28} {r.kind:<22} {ins:<34} {'x'.join(map(str, r.out_shape)):<18} {r.params:>12,}")
    lines.append(f"{'total':<28} {'':<22} {'':<34} {'':<18} {sum(r.params for r in rows):>12,}")
    return "\n".join(lines)


def count_kinds(rows: Sequence[LayerRow]) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for r in rows:
        out[r.kind] = out.get(r.kind, 0) + 1
    return out


def mac_count(m: Model) -> int:
    """Multiply-accumulates of one forward pass at batch 1 (convs and attention only)."""
    total = 0
    pshapes = m.param_shapes()
    for r in describe(m):
        _, h, w = r.out_shape
        for key, shp in pshapes.get(r.name, {}).items():
            if key.endswith("weight"):
                if r.kind == "coordinate-attention":
                    total += int(np.prod(shp)) * (h + w)
                else:
                    total += int(np.prod(shp)) * h * w
    return total


# --- weight file -------------------------------------------------------------------

MAGIC = b"CAYK"
WEIGHTS_VERSION = 1


def save_weights(m: Model, path) -> dict:
    """Write the binary weight file and a JSON manifest next to it.

    Layout (little endian): magic ``CAYK``, u32 version, u32 block count; per
    block in describe() order: u32 array count, then per array a u32 element
    count followed by that many f32 values.  The manifest ``<path>.json``
    records names and shapes.
    """
    if m.params is None:
        raise ValueError("model has no weights to save")
    path = Path(path)
    blocks = [(n.name, m.params[n.name]) for n in m.nodes if n.name in m.params]
    manifest = {"format": "CAYK", "version": WEIGHTS_VERSION, "config": m.cfg.to_mapping(),
                "seed": m.seed, "blocks": [], "layers": [r.to_dict() for r in describe(m)]}
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(blocks)))
        for name, arrays in blocks:
            fh.write(struct.pack("<I", len(arrays)))
            entry = {"name": name, "arrays": []}
            for key, arr in arrays.items():
                data = np.ascontiguousarray(arr, dtype="<f4")
                fh.write(struct.pack("<I", data.size))
                fh.write(data.tobytes())
                entry["arrays"].append({"name": key, "shape": list(arr.shape)})
            manifest["blocks"].append(entry)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_weights(m: Model, path) -> Model:
    """Return a copy of ``m`` holding the weights stored at ``path`` (as float64)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a CAYK weight file")
    version, nblocks = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shapes = m.param_shapes()
    names = [n.name for n in m.nodes if n.name in shapes]
    if nblocks != len(names):
        raise ShapeError(f"{path}: {nblocks} blocks, model has {len(names)}")
    pos = 12
    params = {}
    for name in names:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if count != len(shapes[name]):
            raise ShapeError(f"{path}: block {name} has {count} arrays, expected {len(shapes[name])}")
        arrays = {}
        for key, shp in shapes[name].items():
            (size,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if size != int(np.prod(shp)):
                raise ShapeError(f"{path}: {name}/{key} has {size} values, expected shape {shp}")
            arrays[key] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(shp)
            pos += 4 * size
        params[name] = arrays
    if pos != len(raw):
        raise ShapeError(f"{path}: {len(raw) - pos} trailing bytes")
    return replace(m, params=params)


def ca_overhead(cfg: NetConfig) -> int:
    """Parameters added by the attention blocks alone."""
    W = _Builder(cfg).width
    return sum(ca_param_count(W(c), cfg.ca_reduction) for c in STAGE_WIDTHS)
