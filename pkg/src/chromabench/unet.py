"""Five-stage encoder-decoder network with skip connections.

Encoder stages double the channel count (the fifth keeps the fourth's
width) and downsample with 2x2 max pooling; the decoder upsamples with
4x4 stride-2 transposed convolutions, concatenates the matching encoder
features and fuses them with a 1x1 convolution.  Every conv block is two
3x3 convolutions, each followed by batch norm and ReLU.  The final layer
is a bare 3x3 convolution with linear output.

One code path serves both the full-size configuration (base width 64 at
256x256) and the desk-scale one (base width 8 at 64x64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, DimensionError
from .ppm import atomic_write_bytes

CHECKPOINT_MAGIC = b"CBCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    base_width: int = 64
    stages: int = 5
    out_channels: int = 2
    input_channels: int = 3
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.base_width < 1:
            raise ContractError("UNetConfig: base_width must be >= 1")
        if self.stages != 5:
            raise ContractError("UNetConfig: the architecture is fixed at 5 stages")
        if self.out_channels not in (2, 3):
            raise ContractError("UNetConfig: out_channels must be 2 or 3")

    @property
    def widths(self) -> tuple[int, ...]:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w, 8 * w)  # stage 5 keeps stage 4's width


def _conv_shapes(config: UNetConfig):
    """Ordered (name, kind, shape) table; kind is 'param' or 'buffer'."""
    w1, w2, w3, w4, w5 = config.widths
    c = config.out_channels
    entries: list[tuple[str, str, tuple[int, ...]]] = []

    def block(name: str, cin: int, cout: int):
        for i, (ci, co) in enumerate(((cin, cout), (cout, cout)), start=1):
            entries.append((f"{name}.conv{i}.w", "param", (co, ci, 3, 3)))
            entries.append((f"{name}.conv{i}.b", "param", (co,)))
            entries.append((f"{name}.bn{i}.gamma", "param", (co,)))
            entries.append((f"{name}.bn{i}.beta", "param", (co,)))
            entries.append((f"{name}.bn{i}.running_mean", "buffer", (co,)))
            entries.append((f"{name}.bn{i}.running_var", "buffer", (co,)))

    enc_in = [config.input_channels, w1, w2, w3, w4]
    enc_out = [w1, w2, w3, w4, w5]
    for i in range(5):
        block(f"enc{i + 1}", enc_in[i], enc_out[i])
    # decoder level j: upsample, fuse with encoder skip, conv block
    tconv_ch = [w5, w3, w2, w1]
    skip_ch = [w4, w3, w2, w1]
    dec_out = [w3, w2, w1, w1]
    for j in range(4):
        entries.append((f"up{j + 1}.tconv.w", "param", (tconv_ch[j], tconv_ch[j], 4, 4)))
        entries.append((f"up{j + 1}.tconv.b", "param", (tconv_ch[j],)))
        entries.append((f"up{j + 1}.fuse.w", "param",
                        (tconv_ch[j], tconv_ch[j] + skip_ch[j], 1, 1)))
        entries.append((f"up{j + 1}.fuse.b", "param", (tconv_ch[j],)))
        block(f"dec{j + 1}", tconv_ch[j], dec_out[j])
    entries.append(("final.w", "param", (c, w1, 3, 3)))
    entries.append(("final.b", "param", (c,)))
    return entries


class UNetWeights:
    """Full parameter set plus batch-norm running statistics.

    ``meta`` is a free-form string dict persisted in checkpoints (the
    pipeline stores the training strategy and normalization constants
    there so inference cannot mismatch training).
    """

    def __init__(self, config: UNetConfig, params: dict[str, T.Tensor],
                 buffers: dict[str, np.ndarray], meta: dict[str, str] | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.meta = dict(meta or {})
        self._bn_states: dict[str, T.BatchNormState] = {}
        for name in buffers:
            if name.endswith(".running_mean"):
                base = name[: -len(".running_mean")]
                st = T.BatchNormState(len(buffers[name]), config.bn_momentum,
                                      config.bn_epsilon)
                st.running_mean = buffers[base + ".running_mean"]
                st.running_var = buffers[base + ".running_var"]
                self._bn_states[base] = st

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def bn_state(self, name: str) -> T.BatchNormState:
        return self._bn_states[name]

    def sync_buffers(self) -> None:
        """Copy (possibly replaced) running-stat arrays back to ``buffers``."""
        for base, st in self._bn_states.items():
            self.buffers[base + ".running_mean"] = st.running_mean
            self.buffers[base + ".running_var"] = st.running_var

    def snapshot_bn(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {k: (st.running_mean.copy(), st.running_var.copy())
                for k, st in self._bn_states.items()}

    def restore_bn(self, snap) -> None:
        for k, (mean, var) in snap.items():
            self._bn_states[k].running_mean = mean
            self._bn_states[k].running_var = var
        self.sync_buffers()


def build(config: UNetConfig, seed: int) -> UNetWeights:
    """Initialize weights deterministically from ``seed``.

    Convolutions get zero-mean normals with std sqrt(2 / fan_in), biases
    and BN shifts start at zero, BN scales at one.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, T.Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, kind, shape in _conv_shapes(config):
        if kind == "buffer":
            buffers[name] = (np.ones(shape, dtype=np.float32)
                             if name.endswith("running_var")
                             else np.zeros(shape, dtype=np.float32))
            continue
        if name.endswith(".w") and len(shape) == 4:
            if ".tconv." in name:
                fan_in = shape[0] * shape[2] * shape[3]  # [Cin, Cout, kh, kw]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = T.Tensor(data.astype(np.float32), requires_grad=True)
    return UNetWeights(config, params, buffers)


def _block(w: UNetWeights, name: str, x: T.Tensor, mode: str) -> T.Tensor:
    for i in (1, 2):
        x = T.conv2d(x, w.params[f"{name}.conv{i}.w"], w.params[f"{name}.conv{i}.b"],
                     stride=1, padding=1)
        x = T.batchnorm2d(x, w.params[f"{name}.bn{i}.gamma"],
                          w.params[f"{name}.bn{i}.beta"],
                          w.bn_state(f"{name}.bn{i}"), mode)
        x = T.relu(x)
    return x


def forward(w: UNetWeights, x: T.Tensor, mode: str = "train",
            record: list | None = None) -> T.Tensor:
    """Run the network on [N, 3, H, W]; H and W must be divisible by 16.

    ``record``, when given, collects (label, shape) pairs for each
    block's output resolution.
    """
    if x.data.ndim != 4 or x.data.shape[1] != w.config.input_channels:
        raise DimensionError(
            f"forward: expected [N, {w.config.input_channels}, H, W], got {x.data.shape}")
    h, wd = x.data.shape[2], x.data.shape[3]
    if h % 16 or wd % 16:
        raise DimensionError(f"forward: H and W must be divisible by 16, got {h}x{wd}")

    def note(label, t):
        if record is not None:
            record.append((label, tuple(t.data.shape)))

    note("input", x)
    skips = []
    cur = x
    for i in range(1, 5):
        e = _block(w, f"enc{i}", cur, mode)
        skips.append(e)
        cur = T.maxpool2d(e, 2)
        note(f"conv{i}+pool", cur)
    cur = _block(w, "enc5", cur, mode)
    for j in range(1, 5):
        cur = T.conv_transpose2d(cur, w.params[f"up{j}.tconv.w"],
                                 w.params[f"up{j}.tconv.b"], stride=2)
        note(f"conv{j + 4}+tconv{j}", cur)
        cur = T.concat_channels(cur, skips[4 - j])
        cur = T.conv2d(cur, w.params[f"up{j}.fuse.w"], w.params[f"up{j}.fuse.b"],
                       stride=1, padding=0)
        cur = _block(w, f"dec{j}", cur, mode)
    note("conv9", cur)
    out = T.conv2d(cur, w.params["final.w"], w.params["final.b"], stride=1, padding=1)
    note("conv10", out)
    return out


def table_resolutions(h: int, w: int, config: UNetConfig):
    """Expected (label, shape) pairs of :func:`forward` for an input of
    H x W with batch 1, one per architecture-table row."""
    w1, w2, w3, w4, w5 = config.widths
    return [
        ("input", (1, config.input_channels, h, w)),
        ("conv1+pool", (1, w1, h // 2, w // 2)),
        ("conv2+pool", (1, w2, h // 4, w // 4)),
        ("conv3+pool", (1, w3, h // 8, w // 8)),
        ("conv4+pool", (1, w4, h // 16, w // 16)),
        ("conv5+tconv1", (1, w5, h // 8, w // 8)),
        ("conv6+tconv2", (1, w3, h // 4, w // 4)),
        ("conv7+tconv3", (1, w2, h // 2, w // 2)),
        ("conv8+tconv4", (1, w1, h, w)),
        ("conv9", (1, w1, h, w)),
        ("conv10", (1, config.out_channels, h, w)),
    ]


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError("truncated", f"{self.path}: unexpected end of file")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save(w: UNetWeights, path) -> None:
    """Serialize weights, running stats, config and metadata (bit-exact)."""
    w.sync_buffers()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = w.config
    out += struct.pack("<IIII", cfg.base_width, cfg.stages, cfg.out_channels,
                       cfg.input_channels)
    out += struct.pack("<dd", cfg.bn_momentum, cfg.bn_epsilon)
    out += struct.pack("<I", len(w.meta))
    for key in sorted(w.meta):
        out += _pack_str(key)
        out += _pack_str(w.meta[key])
    table = _conv_shapes(cfg)
    out += struct.pack("<I", len(table))
    arrays = []
    for name, kind, shape in table:
        arr = w.params[name].data if kind == "param" else w.buffers[name]
        if tuple(arr.shape) != shape:
            raise CheckpointError("shape_mismatch",
                                  f"{name}: have {arr.shape}, expected {shape}")
        out += _pack_str(name)
        out += struct.pack("<BI", 0 if kind == "param" else 1, len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        arrays.append(arr)
    for arr in arrays:
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load(path) -> UNetWeights:
    """Reload a checkpoint written by :func:`save`, bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad_magic", f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("bad_version", f"{path}: unsupported version {version}")
    base_width, stages, out_channels, input_channels = (r.u32() for _ in range(4))
    bn_momentum, bn_epsilon = r.f64(), r.f64()
    config = UNetConfig(base_width=base_width, stages=stages, out_channels=out_channels,
                        input_channels=input_channels, bn_momentum=bn_momentum,
                        bn_epsilon=bn_epsilon)
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.string()
    expected = _conv_shapes(config)
    count = r.u32()
    if count != len(expected):
        raise CheckpointError("shape_mismatch",
                              f"{path}: {count} entries, expected {len(expected)}")
    entries = []
    for name, kind, shape in expected:
        got_name = r.string()
        got_kind, ndim = struct.unpack("<BI", r.take(5))
        got_shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        if got_name != name or got_shape != shape or \
                got_kind != (0 if kind == "param" else 1):
            raise CheckpointError(
                "shape_mismatch",
                f"{path}: entry {got_name} {got_shape} does not match {name} {shape}")
        entries.append((name, kind, shape))
    params: dict[str, T.Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, kind, shape in entries:
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        if kind == "param":
            params[name] = T.Tensor(arr, requires_grad=True)
        else:
            buffers[name] = arr
    if r.off != len(raw):
        raise CheckpointError("truncated", f"{path}: trailing bytes")
    return UNetWeights(config, params, buffers, meta)
