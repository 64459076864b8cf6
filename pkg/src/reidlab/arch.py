"""Shuffle-block forward passes on small tensors plus a symbolic
calculator for layer specs: parameter counts, multiply-accumulate counts,
and shape chaining over a whole network description.

Two reference network descriptions are provided ("1x" and "2x" widths) for
a dual-branch embedding CNN: a global branch of three shuffle-block stages
interleaved with attention blocks, and a local branch that processes four
cropped regions, both ending in generalized-mean pooling and a linear
embedding layer.

Conventions: convolution parameters count k*k*in*out/groups plus bias;
MACs count k*k*(in/groups)*out per output element; batch-norm layers hold
2*C parameters and cost C*H*W MACs unless counted as fused into the
preceding convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("conv3x3", "shuffle-a", "shuffle-b", "ha-block", "gem", "linear")
ATTENTION_REDUCTION = 16   # squeeze-excite bottleneck divisor
ATTENTION_REGIONS = 4      # hard-attention crops per level
REGION_COORDS = 2          # regressor outputs per region


# ---------------------------------------------------------------------------
# concrete small-tensor forwards

def channel_shuffle(x: np.ndarray, groups: int = 2) -> np.ndarray:
    """Reorder channels by transposing the (groups, C/groups) index grid."""
    c = x.shape[0]
    if c % groups != 0:
        raise ValueError(f"channel count {c} not divisible by {groups} groups")
    per = c // groups
    return x.reshape(groups, per, *x.shape[1:]).swapaxes(0, 1).reshape(x.shape)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 1, padding: int = 1, groups: int = 1) -> np.ndarray:
    """Grouped 2-d convolution on a (C, H, W) array via sliding windows.

    weight is (out, in/groups, k, k); output spatial size follows
    floor((H + 2p - k) / stride) + 1.
    """
    c_in, h, w = x.shape
    c_out, c_in_g, k, _ = weight.shape
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ValueError(
            f"conv2d: weight {weight.shape} incompatible with {c_in} input "
            f"channels in {groups} groups")
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, H', W', k, k)
    out_h, out_w = windows.shape[1], windows.shape[2]
    out = np.empty((c_out, out_h, out_w))
    per_in, per_out = c_in // groups, c_out // groups
    for g in range(groups):
        win = windows[g * per_in:(g + 1) * per_in]
        wgt = weight[g * per_out:(g + 1) * per_out]
        out[g * per_out:(g + 1) * per_out] = np.einsum(
            "chwkl,ockl->ohw", win, wgt, optimize=True)
    return out + bias[:, None, None]


def _pointwise(x, weight, bias):
    return conv2d(x, weight[:, :, None, None], bias, stride=1, padding=0)


def _depthwise3x3(x, weight, bias, stride):
    return conv2d(x, weight[:, None, :, :], bias, stride=stride, padding=1,
                  groups=x.shape[0])


@dataclass
class ShuffleAWeights:
    """1x1 -> depthwise 3x3 -> 1x1 applied to the second channel half."""
    pw1: np.ndarray
    pw1_bias: np.ndarray
    dw: np.ndarray
    dw_bias: np.ndarray
    pw2: np.ndarray
    pw2_bias: np.ndarray

    @classmethod
    def random(cls, channels: int, rng) -> "ShuffleAWeights":
        half = channels // 2
        return cls(rng.standard_normal((half, half)), rng.standard_normal(half),
                   rng.standard_normal((half, 3, 3)), rng.standard_normal(half),
                   rng.standard_normal((half, half)), rng.standard_normal(half))

    @classmethod
    def zeros(cls, channels: int) -> "ShuffleAWeights":
        half = channels // 2
        return cls(np.zeros((half, half)), np.zeros(half),
                   np.zeros((half, 3, 3)), np.zeros(half),
                   np.zeros((half, half)), np.zeros(half))

    @classmethod
    def identity(cls, channels: int) -> "ShuffleAWeights":
        half = channels // 2
        dw = np.zeros((half, 3, 3))
        dw[:, 1, 1] = 1.0
        return cls(np.eye(half), np.zeros(half), dw, np.zeros(half),
                   np.eye(half), np.zeros(half))


def shuffle_a_forward(x: np.ndarray, weights: ShuffleAWeights,
                      apply_shuffle: bool = True) -> np.ndarray:
    """Identity on the first channel half, three convolutions on the
    second, concat, then channel shuffle.  Output shape equals input."""
    c = x.shape[0]
    if c % 2 != 0:
        raise ValueError(f"shuffle-a needs even channel count, got {c}")
    keep, branch = x[:c // 2], x[c // 2:]
    y = _pointwise(branch, weights.pw1, weights.pw1_bias)
    y = _depthwise3x3(y, weights.dw, weights.dw_bias, stride=1)
    y = _pointwise(y, weights.pw2, weights.pw2_bias)
    out = np.concatenate([keep, y], axis=0)
    return channel_shuffle(out, 2) if apply_shuffle else out


@dataclass
class ShuffleBWeights:
    """Both branches convolve: depthwise+1x1 on branch one, 1x1 ->
    depthwise -> 1x1 on branch two.  Each branch emits out/2 channels."""
    b1_dw: np.ndarray
    b1_dw_bias: np.ndarray
    b1_pw: np.ndarray
    b1_pw_bias: np.ndarray
    b2_pw1: np.ndarray
    b2_pw1_bias: np.ndarray
    b2_dw: np.ndarray
    b2_dw_bias: np.ndarray
    b2_pw2: np.ndarray
    b2_pw2_bias: np.ndarray

    @classmethod
    def random(cls, in_ch: int, out_ch: int, rng) -> "ShuffleBWeights":
        half = out_ch // 2
        return cls(rng.standard_normal((in_ch, 3, 3)), rng.standard_normal(in_ch),
                   rng.standard_normal((half, in_ch)), rng.standard_normal(half),
                   rng.standard_normal((half, in_ch)), rng.standard_normal(half),
                   rng.standard_normal((half, 3, 3)), rng.standard_normal(half),
                   rng.standard_normal((half, half)), rng.standard_normal(half))


def shuffle_b_forward(x: np.ndarray, weights: ShuffleBWeights,
                      stride: int = 1, apply_shuffle: bool = True) -> np.ndarray:
    """Downsampling / channel-expanding block; stride 2 halves the spatial
    dims (ceiling division)."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    b1 = _depthwise3x3(x, weights.b1_dw, weights.b1_dw_bias, stride=stride)
    b1 = _pointwise(b1, weights.b1_pw, weights.b1_pw_bias)
    b2 = _pointwise(x, weights.b2_pw1, weights.b2_pw1_bias)
    b2 = _depthwise3x3(b2, weights.b2_dw, weights.b2_dw_bias, stride=stride)
    b2 = _pointwise(b2, weights.b2_pw2, weights.b2_pw2_bias)
    out = np.concatenate([b1, b2], axis=0)
    return channel_shuffle(out, 2) if apply_shuffle else out


def conv_out_hw(h: int, w: int, k: int = 3, stride: int = 1,
                padding: int = 1) -> tuple[int, int]:
    return ((h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1)


# ---------------------------------------------------------------------------
# symbolic network description

@dataclass(frozen=True)
class LayerSpec:
    """One row of a network description."""
    name: str
    kind: str
    in_ch: int
    out_ch: int
    in_h: int
    in_w: int
    stride: int = 1
    repeat: int = 1
    regions: int = 1          # parallel crops sharing weights (local branch)
    branch: str = "global"
    assumption: bool = False  # accounting rests on assumed internals

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.repeat < 1 or self.regions < 1:
            raise ValueError("repeat and regions must be positive")
        if self.kind == "shuffle-a":
            if self.in_ch != self.out_ch:
                raise ValueError(f"{self.name}: shuffle-a needs in_ch == out_ch")
            if self.in_ch % 2 != 0:
                raise ValueError(f"{self.name}: shuffle-a needs even channels")
        if self.kind == "shuffle-b" and self.out_ch % 2 != 0:
            raise ValueError(f"{self.name}: shuffle-b output channels must be even")

    def out_hw(self) -> tuple[int, int]:
        if self.kind in ("conv3x3", "shuffle-a", "shuffle-b"):
            return conv_out_hw(self.in_h, self.in_w, 3, self.stride, 1)
        if self.kind == "ha-block":
            return self.in_h, self.in_w
        return 1, 1  # gem pools to a vector; linear stays a vector


@dataclass
class NetSpec:
    variant: str
    feature_dim: int
    layers: list[LayerSpec] = field(default_factory=list)

    def branch(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.branch == name]


def build_net_spec(variant: str) -> NetSpec:
    """Reference dual-branch description at two complexity levels.

    160x64 input, three stages of shuffle-B / repeated shuffle-A /
    strided shuffle-B, attention blocks on each stage output, a local
    branch over four crops, GeM pooling, and linear embedding heads.
    """
    if variant == "1x":
        conv1_out, widths, repeats, fc_dim = 32, (128, 256, 384), (7, 10, 7), 512
    elif variant == "2x":
        conv1_out, widths, repeats, fc_dim = 36, (240, 320, 480), (8, 11, 8), 960
    else:
        raise ValueError(f"unknown variant {variant!r}; expected '1x' or '2x'")

    stage_hw = [(80, 32), (40, 16), (20, 8)]       # global stage inputs
    region_hw = [(24, 28), (12, 14), (6, 7)]       # local crop inputs
    layers = [LayerSpec("conv1", "conv3x3", 3, conv1_out, 160, 64, stride=2)]
    in_ch = conv1_out
    local_in = conv1_out
    for i, (width, rep) in enumerate(zip(widths, repeats), start=1):
        h, w = stage_hw[i - 1]
        layers.append(LayerSpec(f"stage{i}.expand", "shuffle-b", in_ch, width, h, w))
        layers.append(LayerSpec(f"stage{i}.blocks", "shuffle-a", width, width,
                                h, w, repeat=rep))
        layers.append(LayerSpec(f"stage{i}.down", "shuffle-b", width, width,
                                h, w, stride=2))
        oh, ow = conv_out_hw(h, w, 3, 2, 1)
        layers.append(LayerSpec(f"attn{i}", "ha-block", width, width, oh, ow,
                                assumption=True))
        rh, rw = region_hw[i - 1]
        layers.append(LayerSpec(f"local{i}", "shuffle-b", local_in, width, rh, rw,
                                stride=2, regions=ATTENTION_REGIONS, branch="local",
                                assumption=True))
        in_ch = width
        local_in = width

    final_hw = conv_out_hw(*stage_hw[2], 3, 2, 1)       # (10, 4)
    local_final = conv_out_hw(*region_hw[2], 3, 2, 1)   # (3, 4)
    width = widths[-1]
    layers.append(LayerSpec("pool.global", "gem", width, width, *final_hw))
    layers.append(LayerSpec("pool.local", "gem", width, width, *local_final,
                            regions=ATTENTION_REGIONS, branch="local"))
    layers.append(LayerSpec("fc.global", "linear", width, fc_dim, 1, 1))
    layers.append(LayerSpec("fc.local", "linear", width * ATTENTION_REGIONS,
                            fc_dim, 1, 1, branch="local"))
    return NetSpec(variant=variant, feature_dim=fc_dim, layers=layers)


# ---------------------------------------------------------------------------
# parameter and MAC accounting

def conv_params(k: int, c_in: int, c_out: int, groups: int = 1) -> int:
    return k * k * c_in * c_out // groups + c_out


def conv_macs(k: int, c_in: int, c_out: int, out_h: int, out_w: int,
              groups: int = 1) -> int:
    return k * k * (c_in // groups) * c_out * out_h * out_w


def bn_params(c: int) -> int:
    return 2 * c


def bn_macs(c: int, h: int, w: int) -> int:
    return c * h * w


def _shuffle_a_items(c: int, h: int, w: int) -> list[tuple[str, int, int]]:
    half = c // 2
    return [
        ("pw1", conv_params(1, half, half), conv_macs(1, half, half, h, w)),
        ("pw1.bn", bn_params(half), bn_macs(half, h, w)),
        ("dw", conv_params(3, half, half, groups=half),
         conv_macs(3, half, half, h, w, groups=half)),
        ("dw.bn", bn_params(half), bn_macs(half, h, w)),
        ("pw2", conv_params(1, half, half), conv_macs(1, half, half, h, w)),
        ("pw2.bn", bn_params(half), bn_macs(half, h, w)),
    ]


def _shuffle_b_items(c_in: int, c_out: int, h: int, w: int,
                     stride: int) -> list[tuple[str, int, int]]:
    half = c_out // 2
    oh, ow = conv_out_hw(h, w, 3, stride, 1)
    return [
        ("b1.dw", conv_params(3, c_in, c_in, groups=c_in),
         conv_macs(3, c_in, c_in, oh, ow, groups=c_in)),
        ("b1.dw.bn", bn_params(c_in), bn_macs(c_in, oh, ow)),
        ("b1.pw", conv_params(1, c_in, half), conv_macs(1, c_in, half, oh, ow)),
        ("b1.pw.bn", bn_params(half), bn_macs(half, oh, ow)),
        ("b2.pw1", conv_params(1, c_in, half), conv_macs(1, c_in, half, h, w)),
        ("b2.pw1.bn", bn_params(half), bn_macs(half, h, w)),
        ("b2.dw", conv_params(3, half, half, groups=half),
         conv_macs(3, half, half, oh, ow, groups=half)),
        ("b2.dw.bn", bn_params(half), bn_macs(half, oh, ow)),
        ("b2.pw2", conv_params(1, half, half), conv_macs(1, half, half, oh, ow)),
        ("b2.pw2.bn", bn_params(half), bn_macs(half, oh, ow)),
    ]


def _ha_block_items(c: int, h: int, w: int) -> list[tuple[str, int, int]]:
    """Attention-block accounting: squeeze-excite channel gate, a two-conv
    spatial gate, and a region-box regressor.  Internal widths follow the
    reduction-16 convention; rows are flagged as assumption-based."""
    mid = max(c // ATTENTION_REDUCTION, 1)
    items = [
        ("se.fc1", c * mid + mid, c * mid),
        ("se.fc2", mid * c + c, mid * c),
        ("spatial.pw", conv_params(1, c, mid), conv_macs(1, c, mid, h, w)),
        ("spatial.conv", conv_params(3, mid, 1), conv_macs(3, mid, 1, h, w)),
        ("regress", c * (ATTENTION_REGIONS * REGION_COORDS)
         + ATTENTION_REGIONS * REGION_COORDS,
         c * ATTENTION_REGIONS * REGION_COORDS),
    ]
    return items


def layer_accounting(layer: LayerSpec, fused_bn: bool = False) -> list[dict]:
    """Itemized (component, params, macs) rows for one layer spec; repeats
    multiply both, regions multiply MACs only (weights shared)."""
    h, w = layer.in_h, layer.in_w
    if layer.kind == "conv3x3":
        oh, ow = conv_out_hw(h, w, 3, layer.stride, 1)
        items = [("conv", conv_params(3, layer.in_ch, layer.out_ch),
                  conv_macs(3, layer.in_ch, layer.out_ch, oh, ow)),
                 ("bn", bn_params(layer.out_ch), bn_macs(layer.out_ch, oh, ow))]
    elif layer.kind == "shuffle-a":
        items = _shuffle_a_items(layer.in_ch, h, w)
    elif layer.kind == "shuffle-b":
        items = _shuffle_b_items(layer.in_ch, layer.out_ch, h, w, layer.stride)
    elif layer.kind == "ha-block":
        items = _ha_block_items(layer.in_ch, h, w)
    elif layer.kind == "gem":
        items = [("p", layer.in_ch, layer.in_ch * h * w)]
    else:  # linear
        items = [("fc", layer.in_ch * layer.out_ch + layer.out_ch,
                  layer.in_ch * layer.out_ch)]

    rows = []
    for comp, params, macs in items:
        if fused_bn and comp.endswith("bn"):
            macs = 0
        rows.append({
            "layer": layer.name,
            "component": comp,
            "params": params * layer.repeat,
            "macs": macs * layer.repeat * layer.regions,
            "assumption": layer.assumption,
        })
    return rows


def net_accounting(spec: NetSpec, fused_bn: bool = False) -> list[dict]:
    rows = []
    for layer in spec.layers:
        rows.extend(layer_accounting(layer, fused_bn=fused_bn))
    return rows


def count_params(spec: NetSpec) -> int:
    return sum(r["params"] for r in net_accounting(spec))


def count_flops(spec: NetSpec, convention: str = "mac",
                fused_bn: bool = False) -> int:
    """Total FLOPs; 'mac' counts one FLOP per multiply-accumulate, '2mac'
    doubles it."""
    if convention not in ("mac", "2mac"):
        raise ValueError(f"unknown FLOPs convention {convention!r}")
    macs = sum(r["macs"] for r in net_accounting(spec, fused_bn=fused_bn))
    return macs * (2 if convention == "2mac" else 1)


# ---------------------------------------------------------------------------
# shape chaining

def check_shape_chain(spec: NetSpec) -> list[dict]:
    """Walk both branches and verify every layer's computed output feeds
    the next layer's declared input exactly.  Returns the chained steps;
    raises ValueError on any mismatch."""
    steps = []

    def walk(layers: list[LayerSpec], tag: str):
        prev: LayerSpec | None = None
        prev_out: tuple[int, int, int] | None = None  # (ch, h, w)
        for layer in layers:
            if prev is not None:
                is_vector_head = layer.kind == "linear"
                expect_ch = prev.out_ch * (prev.regions if is_vector_head
                                           and prev.kind == "gem" else 1)
                got = (layer.in_ch, layer.in_h, layer.in_w)
                if is_vector_head:
                    if layer.in_ch != expect_ch:
                        raise ValueError(
                            f"{tag}: {layer.name} expects {layer.in_ch} inputs "
                            f"but {prev.name} emits {expect_ch}")
                else:
                    want = (expect_ch, *prev_out[1:])
                    if got != want:
                        raise ValueError(
                            f"{tag}: {layer.name} declares input {got} but "
                            f"{prev.name} emits {want}")
            oh, ow = layer.out_hw()
            prev, prev_out = layer, (layer.out_ch, oh, ow)
            steps.append({"branch": tag, "layer": layer.name,
                          "in": (layer.in_ch, layer.in_h, layer.in_w),
                          "out": prev_out})
        return prev_out

    walk(spec.branch("global"), "global")

    # local crops restart the spatial chain at level 1; verify the first
    # crop fits inside its source feature map, then chain normally
    local = spec.branch("local")
    source = spec.layers[0]  # conv1 output feeds the level-1 crops
    src_h, src_w = source.out_hw()
    first = local[0]
    if first.in_h > src_h or first.in_w > src_w:
        raise ValueError(
            f"local crop {first.in_h}x{first.in_w} exceeds source map "
            f"{src_h}x{src_w}")
    if first.in_ch != source.out_ch:
        raise ValueError(
            f"local branch expects {first.in_ch} channels, source has "
            f"{source.out_ch}")
    walk(local, "local")
    return steps
