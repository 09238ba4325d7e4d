"""Residual neuron-attention network for single-image super-resolution.

The network is a shallow 3x3 conv, a chain of global-context residual groups
with uniform-spaced feature fusion, a sub-pixel upsampler and a 3x3
reconstruction conv. Each group chains residual neuron-attention blocks,
fuses every M-th block output, adds a local skip and ends in a global-context
block.

All forward functions are functional: they take a tensor and a mapping from
relative parameter names to tensors, so the same code serves training,
inference and gradient checking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    G: int = 10
    B: int = 20
    C: int = 64
    scale: int = 2
    N: int = 2
    M: int = 2
    r: int = 16
    dw_kernel: int = 3
    rb_kernel: int = 3

    def __post_init__(self):
        for name in ("G", "B", "C", "N", "M", "r"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {v!r}")
        if self.scale not in (2, 3, 4):
            raise ValueError(f"ModelConfig.scale must be 2, 3 or 4, got {self.scale!r}")
        for name in ("dw_kernel", "rb_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"ModelConfig.{name} must be a positive odd integer, got {k!r}")

    @property
    def bottleneck(self) -> int:
        return max(1, self.C // self.r)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


def fusion_indices(count: int, interval: int) -> list[int]:
    """1-based indices {interval, 2*interval, ...} plus the last one."""
    idx = list(range(interval, count + 1, interval))
    if not idx or idx[-1] != count:
        idx.append(count)
    return idx


def upsampler_stages(scale: int) -> list[int]:
    return {2: [2], 3: [3], 4: [2, 2]}[scale]


# --------------------------------------------------------------------------
# parameter layout


def _conv(name: str, cin: int, cout: int, k: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.weight", (cout, cin, k, k)), (f"{name}.bias", (cout,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; the order is the serialization order."""
    C, k = cfg.C, cfg.rb_kernel
    out = _conv("head", 3, C, 3)
    for g in range(cfg.G):
        pre = f"gcrg.{g}"
        for b in range(cfg.B):
            blk = f"{pre}.rna.{b}"
            out += _conv(f"{blk}.rb.conv1", C, C, k)
            out += _conv(f"{blk}.rb.conv2", C, C, k)
            out.append((f"{blk}.na.depthwise.weight", (C, 1, cfg.dw_kernel, cfg.dw_kernel)))
            out.append((f"{blk}.na.depthwise.bias", (C,)))
            out += _conv(f"{blk}.na.pointwise", C, C, 1)
        nsel = len(fusion_indices(cfg.B, cfg.M))
        out += _conv(f"{pre}.fuse.reduce", nsel * C, C, 1)
        out += _conv(f"{pre}.fuse.conv", C, C, 3)
        cb = cfg.bottleneck
        out += _conv(f"{pre}.gc.key", C, 1, 1)
        out += _conv(f"{pre}.gc.value1", C, cb, 1)
        out += [(f"{pre}.gc.ln.gamma", (cb,)), (f"{pre}.gc.ln.beta", (cb,))]
        out += _conv(f"{pre}.gc.value2", cb, C, 1)
    nsel = len(fusion_indices(cfg.G, cfg.N))
    out += _conv("fuse.reduce", nsel * C, C, 1)
    out += _conv("fuse.conv", C, C, 3)
    for i, s in enumerate(upsampler_stages(cfg.scale)):
        out += _conv(f"upsample.{i}", C, C * s * s, 3)
    out += _conv("tail", C, 3, 3)
    return out


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form scalar counts per submodule (derived by hand, not by enumeration)."""
    C, k, dk, cb = cfg.C, cfg.rb_kernel, cfg.dw_kernel, cfg.bottleneck
    conv = lambda cin, cout, kk: cout * cin * kk * kk + cout  # noqa: E731
    rna = 2 * conv(C, C, k) + (C * dk * dk + C) + conv(C, C, 1)
    group_fuse = conv(len(fusion_indices(cfg.B, cfg.M)) * C, C, 1) + conv(C, C, 3)
    gc = conv(C, 1, 1) + conv(C, cb, 1) + 2 * cb + conv(cb, C, 1)
    return {
        "head": conv(3, C, 3),
        "rna_blocks": cfg.G * cfg.B * rna,
        "group_fusion": cfg.G * group_fuse,
        "gc_blocks": cfg.G * gc,
        "global_fusion": conv(len(fusion_indices(cfg.G, cfg.N)) * C, C, 1) + conv(C, C, 3),
        "upsampler": sum(conv(C, C * s * s, 3) for s in upsampler_stages(cfg.scale)),
        "tail": conv(C, 3, 3),
    }


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


class RNANWeights(Mapping[str, Tensor]):
    """Complete named parameter set of one network, in canonical order."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self._params = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def view(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by their remaining name."""
        return sub_params(self._params, prefix)

    def parameters(self) -> list[T.Parameter]:
        return [T.Parameter(k, v) for k, v in self._params.items()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def copy(self) -> "RNANWeights":
        return RNANWeights(
            self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self._params.items()}
        )


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> RNANWeights:
    """Kaiming-uniform conv weights with bound 1/sqrt(fan_in), zero biases.

    The second GC projection starts at zero so every group is initially the
    identity map; layer-norm scale/shift start at 1/0.
    """
    dtype = T.get_default_dtype() if dtype is None else np.dtype(dtype)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".beta")) or ".gc.value2." in name:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return RNANWeights(cfg, params)


# --------------------------------------------------------------------------
# forward


def sub_params(p: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in p.items() if k.startswith(prefix + ".")}


def _conv_same(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    w = p[f"{name}.weight"]
    return T.conv2d(x, w, p[f"{name}.bias"], stride=1, pad=w.shape[2] // 2)


def na_gate(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Per-element attention map sigmoid(pointwise(relu(depthwise(x))))."""
    if p["depthwise.weight"].shape[0] != x.shape[1] or p["pointwise.weight"].shape[1] != x.shape[1]:
        raise ValueError(f"neuron attention weights do not match {x.shape[1]} input channels")
    h = T.depthwise_conv2d(x, p["depthwise.weight"], p["depthwise.bias"])
    h = T.relu(h)
    h = T.pointwise_conv(h, p["pointwise.weight"], p["pointwise.bias"])
    return T.sigmoid(h)


def na_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.mul_broadcast(x, na_gate(x, p))


def rb_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """conv -> ReLU -> conv, no normalization."""
    return _conv_same(T.relu(_conv_same(x, p, "conv1")), p, "conv2")


def rna_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.add(x, na_forward(rb_forward(x, sub_params(p, "rb")), sub_params(p, "na")))


def gc_context(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Attention-pooled context vector [N, C, 1, 1]."""
    logits = T.pointwise_conv(x, p["key.weight"], p["key.bias"])
    return T.weighted_spatial_pool(x, T.softmax_positions(logits))


def gc_transform(context: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    t = T.pointwise_conv(context, p["value1.weight"], p["value1.bias"])
    t = T.relu(T.layer_norm(t, p["ln.gamma"], p["ln.beta"], LN_EPS))
    return T.pointwise_conv(t, p["value2.weight"], p["value2.bias"])


def gc_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """x plus a channel vector broadcast to every position."""
    return T.add(x, gc_transform(gc_context(x, p), p))


def _fuse(feats: list[Tensor], p: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.concat_channels(feats)
    h = _conv_same(h, p, f"{prefix}.reduce")
    return _conv_same(h, p, f"{prefix}.conv")


def gcrg_forward(x: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    outs = []
    h = x
    for b in range(cfg.B):
        h = rna_forward(h, sub_params(p, f"rna.{b}"))
        outs.append(h)
    fused = _fuse([outs[i - 1] for i in fusion_indices(cfg.B, cfg.M)], p, "fuse")
    return gc_forward(T.add(x, fused), sub_params(p, "gc"))


def upsample_forward(x: Tensor, weights: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    for i, s in enumerate(upsampler_stages(cfg.scale)):
        x = T.pixel_shuffle(_conv_same(x, weights, f"upsample.{i}"), s)
    return x


def rnan_forward(img_lr: Tensor, weights: RNANWeights | Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """[N, 3, h, w] in [0, 1] -> [N, 3, scale*h, scale*w]."""
    if cfg.scale not in (2, 3, 4):
        raise ValueError(f"unsupported scale {cfg.scale}")
    if img_lr.data.ndim != 4 or img_lr.shape[1] != 3:
        raise ValueError(f"expected an [N, 3, h, w] input, got {img_lr.shape}")
    f0 = _conv_same(img_lr, weights, "head")
    feats = []
    h = f0
    for g in range(cfg.G):
        h = gcrg_forward(h, sub_params(weights, f"gcrg.{g}"), cfg)
        feats.append(h)
    ff = T.add(f0, _fuse([feats[i - 1] for i in fusion_indices(cfg.G, cfg.N)], weights, "fuse"))
    return _conv_same(upsample_forward(ff, weights, cfg), weights, "tail")


def predict(weights: RNANWeights, img: np.ndarray) -> np.ndarray:
    """Inference on a float [3, h, w] array; returns float [3, s*h, s*w] (unclamped)."""
    with T.no_grad():
        x = Tensor(np.asarray(img, dtype=weights["head.weight"].dtype)[None])
        return rnan_forward(x, weights, weights.config).data[0]


# --------------------------------------------------------------------------
# weight files

MAGIC = b"RNANWGT\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_weights(f: BinaryIO, weights: RNANWeights) -> None:
    cfg_bytes = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    f.write(MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)))
    f.write(cfg_bytes)
    f.write(struct.pack("<I", len(weights)))
    for name, t in weights.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        nb = name.encode()
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("weight file truncated")
    return b


def read_weights(f: BinaryIO, expect: ModelConfig | None = None) -> RNANWeights:
    if _read_exact(f, len(MAGIC)) != MAGIC:
        raise ValueError("not an RNAN weight file (bad magic)")
    version, cfg_len = struct.unpack("<II", _read_exact(f, 8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weight format version {version} (expected {FORMAT_VERSION})")
    cfg = ModelConfig.from_dict(json.loads(_read_exact(f, cfg_len)))
    if expect is not None and cfg != expect:
        diff = {k: (v, getattr(cfg, k)) for k, v in expect.to_dict().items() if getattr(cfg, k) != v}
        raise ValueError(f"weight file config does not match: expected vs stored {diff}")
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    layout = param_shapes(cfg)
    if count != len(layout):
        raise ValueError(f"weight file has {count} tensors, config implies {len(layout)}")
    params = {}
    for exp_name, exp_shape in layout:
        (nlen,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, nlen).decode()
        code, ndim = struct.unpack("<BB", _read_exact(f, 2))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        if name != exp_name or tuple(shape) != exp_shape:
            raise ValueError(f"weight file record {name}{shape} does not match expected {exp_name}{exp_shape}")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(_read_exact(f, nbytes), dtype=dt).reshape(shape)
        params[name] = Tensor(arr.astype(dt.newbyteorder("="), copy=True), requires_grad=True)
    return RNANWeights(cfg, params)


def save_weights(weights: RNANWeights, path) -> None:
    with open(path, "wb") as f:
        write_weights(f, weights)


def load_weights(path, expect: ModelConfig | None = None) -> RNANWeights:
    with open(path, "rb") as f:
        return read_weights(f, expect)
