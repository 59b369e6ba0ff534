"""The LCNN scene classifier: construction, forward pass, persistence."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import CBAMParams, SEParams, cbam, init_cbam, init_se, se_block
from .config import LCNNConfig, from_text, to_text
from .errors import FormatError, ShapeError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    LinearParams,
    batchnorm,
    conv2d,
    conv_out_extent,
    flatten,
    init_batchnorm,
    init_conv,
    init_linear,
    linear,
    maxpool2d,
    mfm,
    pool_out_extent,
)
from .tensor import Tensor

MAGIC = b"LCN1"
FORMAT_VERSION = 1

CONV1_KERNEL = (7, 3)
CONV1_PADDING = (3, 0)


@dataclass
class Layer:
    name: str
    kind: str  # conv, mfm, pool, bn, se, cbam, flatten, fc
    params: object = None


def _layer_plan(cfg: LCNNConfig) -> list[tuple[str, str, dict]]:
    """Table of (name, kind, spec) in execution order."""
    c1, c2, c3, c4, c5 = cfg.channels

    def attn(block: int, width: int) -> list[tuple[str, str, dict]]:
        rows = []
        if cfg.attention in ("se", "se+cbam"):
            rows.append((f"SE_{block}", "se", {"channels": width}))
        if cfg.attention in ("cbam", "se+cbam"):
            rows.append((f"CBAM_{block}", "cbam", {"channels": width}))
        return rows

    def block(n: int, c_in: int, c_out: int) -> list[tuple[str, str, dict]]:
        return [
            (f"Conv_{n}a", "conv", {"c_in": c_in, "c_out": 2 * c_in, "kernel": (1, 1), "padding": (0, 0)}),
            (f"MFM_{n}a", "mfm", {}),
            (f"BatchNorm_{n}a", "bn", {"channels": c_in}),
            (f"Conv_{n}", "conv", {"c_in": c_in, "c_out": c_out, "kernel": (3, 3), "padding": (1, 1)}),
            (f"MFM_{n}", "mfm", {}),
            *attn(n, c_out // 2),
        ]

    pool = {"kernel": (2, 2), "stride": (2, 2)}
    return [
        ("Conv_1", "conv", {"c_in": 1, "c_out": c1, "kernel": CONV1_KERNEL, "padding": CONV1_PADDING}),
        ("MFM_1", "mfm", {}),
        ("MaxPool_1", "pool", pool),
        *block(2, c1 // 2, c2),
        ("MaxPool_2", "pool", pool),
        ("BatchNorm_2", "bn", {"channels": c2 // 2}),
        *block(3, c2 // 2, c3),
        ("MaxPool_3", "pool", pool),
        *block(4, c3 // 2, c4),
        ("BatchNorm_4", "bn", {"channels": c4 // 2}),
        *block(5, c4 // 2, c5),
        ("MaxPool_5", "pool", pool),
        ("Flatten", "flatten", {}),
        ("FC_1", "fc", {"d_out": 2 * cfg.embedding_dim}),
        ("MFM_FC1", "mfm", {}),
        ("FC_2", "fc", {"d_out": cfg.num_classes}),
    ]


def shape_trace(cfg: LCNNConfig, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape after every layer, from the closed-form extent formulas."""
    shape: tuple[int, ...] = (batch, 1, cfg.input_frames, cfg.input_bins)
    trace = []
    for name, kind, spec in _layer_plan(cfg):
        n = shape[0]
        if kind == "conv":
            kt, kf = spec["kernel"]
            pt, pf = spec["padding"]
            t = conv_out_extent(shape[2], kt, 1, pt)
            f = conv_out_extent(shape[3], kf, 1, pf)
            if t < 1 or f < 1:
                raise ShapeError(f"{name}: degenerate output extent ({t}, {f})")
            shape = (n, spec["c_out"], t, f)
        elif kind == "mfm":
            shape = (n, shape[1] // 2, *shape[2:])
        elif kind == "pool":
            (kt, kf), (st, sf) = spec["kernel"], spec["stride"]
            shape = (n, shape[1], pool_out_extent(shape[2], kt, st, True), pool_out_extent(shape[3], kf, sf, True))
        elif kind == "flatten":
            shape = (n, int(np.prod(shape[1:])))
        elif kind == "fc":
            shape = (n, spec["d_out"])
        trace.append((name, shape))
    return trace


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # per-layer streams: adding attention layers leaves other initial weights untouched
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


class LCNNModel:
    """Ordered layer list plus parameter records."""

    def __init__(self, cfg: LCNNConfig, layers: list[Layer]):
        self.cfg = cfg
        self.layers = layers
        self.attention_bypass = False
        self.norm_mean: np.ndarray | None = None
        self.norm_std: np.ndarray | None = None

    # -- parameters ---------------------------------------------------------

    def _records(self) -> Iterator[tuple[str, object, str]]:
        """Yield (full name, owning record, attribute) for every tensor."""
        for layer in self.layers:
            p = layer.params
            if isinstance(p, Conv2dParams):
                yield from ((f"{layer.name}.{a}", p, a) for a in ("weight", "bias"))
            elif isinstance(p, LinearParams):
                yield from ((f"{layer.name}.{a}", p, a) for a in ("weight", "bias"))
            elif isinstance(p, BatchNormParams):
                yield from ((f"{layer.name}.{a}", p, a) for a in ("gamma", "beta", "running_mean", "running_var"))
            elif isinstance(p, SEParams):
                for sub in ("fc1", "fc2"):
                    yield from ((f"{layer.name}.{sub}.{a}", getattr(p, sub), a) for a in ("weight", "bias"))
            elif isinstance(p, CBAMParams):
                for sub in ("fc1", "fc2", "spatial"):
                    yield from ((f"{layer.name}.{sub}.{a}", getattr(p, sub), a) for a in ("weight", "bias"))

    def state(self) -> dict[str, Tensor]:
        """Every tensor the model owns, trainable or not, in layer order."""
        return {name: getattr(rec, attr) for name, rec, attr in self._records()}

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors only."""
        return {k: v for k, v in self.state().items() if not k.endswith(("running_mean", "running_var"))}

    def set_tensor(self, name: str, value: Tensor) -> None:
        for full, rec, attr in self._records():
            if full == name:
                old = getattr(rec, attr)
                if old.shape != value.shape:
                    raise ShapeError(f"{name}: shape {value.shape} != {old.shape}")
                setattr(rec, attr, value)
                return
        raise KeyError(name)

    def astype(self, dtype) -> "LCNNModel":
        for name, t in self.state().items():
            self.set_tensor(name, Tensor(t.data.astype(dtype), grad_tracked=t.grad_tracked))
        return self

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    # -- forward ------------------------------------------------------------

    def _run(self, x: Tensor, training: bool, stop_after: str | None = None, trace: list | None = None) -> Tensor:
        cfg = self.cfg
        want = (cfg.input_frames, cfg.input_bins)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != want:
            raise ShapeError(f"LCNN expects (N,1,{want[0]},{want[1]}), got {x.shape}")
        for layer in self.layers:
            kind, p = layer.kind, layer.params
            if kind == "conv":
                x = conv2d(x, p)
            elif kind == "mfm":
                x = mfm(x)
            elif kind == "pool":
                x = maxpool2d(x, (2, 2), (2, 2), ceil_mode=True)
            elif kind == "bn":
                x = batchnorm(x, p, training)
            elif kind == "se":
                x = x if self.attention_bypass else se_block(x, p)
            elif kind == "cbam":
                x = x if self.attention_bypass else cbam(x, p)
            elif kind == "flatten":
                x = flatten(x)
            elif kind == "fc":
                x = linear(x, p)
            if trace is not None:
                trace.append((layer.name, x.shape))
            if layer.name == stop_after:
                break
        return x

    def forward(self, x: Tensor, training: bool = False, trace: list | None = None) -> Tensor:
        """Logits of shape (N, num_classes)."""
        return self._run(x, training, trace=trace)

    __call__ = forward

    def embed(self, x: Tensor) -> Tensor:
        """MFM_FC1 output, inference mode."""
        return self._run(x, training=False, stop_after="MFM_FC1")


def build(cfg: LCNNConfig | None = None, seed: int = 0, dtype=np.float32) -> LCNNModel:
    """Construct the network with deterministic per-layer initialization."""
    cfg = cfg or LCNNConfig()
    cfg.validate()
    trace = dict(shape_trace(cfg))
    layers = []
    prev_width = None
    for name, kind, spec in _layer_plan(cfg):
        rng = _layer_rng(seed, name)
        if kind == "conv":
            params = init_conv(rng, spec["c_in"], spec["c_out"], spec["kernel"], padding=spec["padding"], dtype=dtype)
        elif kind == "bn":
            params = init_batchnorm(spec["channels"], dtype)
        elif kind == "se":
            params = init_se(rng, spec["channels"], cfg.reduction, dtype)
        elif kind == "cbam":
            params = init_cbam(rng, spec["channels"], cfg.reduction, cfg.cbam_kernel, dtype)
        elif kind == "fc":
            params = init_linear(rng, prev_width, spec["d_out"], dtype)
        else:
            params = None
        layers.append(Layer(name, kind, params))
        prev_width = trace[name][1]
    return LCNNModel(cfg, layers)


def param_count(model: LCNNModel) -> int:
    return model.param_count()


def mfm_channel_trace(model: LCNNModel) -> list[int]:
    """Channel count after each convolutional block's closing MFM."""
    names = [f"MFM_{i}" for i in (1, 2, 3, 4, 5)]
    return [shape[1] for name, shape in shape_trace(model.cfg) if name in names]


# ---------------------------------------------------------------------------
# persistence


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save(model: LCNNModel, path) -> None:
    """Write the model file: magic, version, config text, tensor records."""
    cfg_text = to_text(model.cfg).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_text)), cfg_text]
    for name, t in model.state().items():
        chunks.append(_tensor_record(name, t.data))
    if model.norm_mean is not None:
        chunks.append(_tensor_record("norm.mean", model.norm_mean))
        chunks.append(_tensor_record("norm.std", model.norm_std))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: {what} needs {n} bytes at byte offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load(path) -> LCNNModel:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte offset 4")
    n_cfg = r.u32("config length")
    cfg_at = r.pos
    try:
        cfg = from_text(LCNNConfig, r.take(n_cfg, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid config text at byte offset {cfg_at}: {exc}") from None

    model = build(cfg, seed=0)
    expected = {name: t.shape for name, t in model.state().items()}
    seen = set()
    while not r.done:
        at = r.pos
        name_len = r.u32("record name length")
        try:
            name = r.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"record name is not UTF-8 at byte offset {at + 4}") from None
        rank = r.take(1, "rank")[0]
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape).astype(np.float32)
        if name in ("norm.mean", "norm.std"):
            setattr(model, "norm_mean" if name == "norm.mean" else "norm_std", data)
        elif name in expected:
            if shape != expected[name]:
                raise FormatError(f"record {name} at byte offset {at}: shape {shape} != {expected[name]}")
            tracked = not name.endswith(("running_mean", "running_var"))
            model.set_tensor(name, Tensor(data, grad_tracked=tracked))
        else:
            raise FormatError(f"unexpected record {name!r} at byte offset {at}")
        seen.add(name)
    missing = [n for n in expected if n not in seen]
    if missing:
        raise FormatError(f"truncated file: {len(missing)} record(s) missing at byte offset {r.pos}, first {missing[0]}")
    return model
