"""Training objectives: squared-error, absolute-error (both channel
couplings), feature reconstruction loss and an LPIPS-style weighted
feature distance.  All of them are differentiable tensor expressions.

The deep feature extractor is pluggable: the built-in one is a small
stack of fixed, seeded random convolutions, and precomputed feature maps
can be imported from ``.cbfe`` files instead (see ``write_features`` /
``read_features``).
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError

LPIPS_NORM_EPS = 1e-10


def _as_batch(t: T.Tensor) -> T.Tensor:
    if t.data.ndim == 3:
        return T.Tensor(t.data[None], requires_grad=False) if not t.requires_grad else t
    return t


def mse_sum(u: T.Tensor, v: T.Tensor) -> T.Tensor:
    """Sum of squared differences over all entries."""
    d = T.sub(u, v)
    return T.sum_all(T.mul(d, d))


def mse_mean(u: T.Tensor, v: T.Tensor) -> T.Tensor:
    """mse_sum divided by the number of entries."""
    return T.mul_scalar(mse_sum(u, v), 1.0 / u.size)


def mae(u: T.Tensor, v: T.Tensor) -> T.Tensor:
    """Sum of absolute differences (l1 coupling across channels)."""
    return T.sum_all(T.abs_val(T.sub(u, v)))


def mae_coupled(u: T.Tensor, v: T.Tensor) -> T.Tensor:
    """Sum over pixels of the Euclidean norm of the channel difference.

    Inputs are CHW or NCHW.  Subgradient is 0 where the per-pixel
    difference is exactly zero.
    """
    return T.channel_norm_sum(T.sub(u, v))


class FeatureExtractor:
    """Fixed stack of strided convolutions with ReLU activations.

    Weights are deterministic in the seed and never trained; gradients
    flow through them into the image being compared.
    """

    def __init__(self, weights: list[np.ndarray], strides: list[int], seed: int | None):
        if len(weights) != len(strides):
            raise ContractError("FeatureExtractor: one stride per layer required")
        self.weights = [T.Tensor(np.asarray(w, dtype=np.float32)) for w in weights]
        self.strides = list(strides)
        self.seed = seed

    @classmethod
    def default(cls, seed: int = 0, in_channels: int = 3,
                channels: tuple[int, ...] = (8, 16, 16),
                stride: int = 2) -> "FeatureExtractor":
        rng = np.random.Generator(np.random.PCG64(seed))
        weights = []
        cin = in_channels
        for cout in channels:
            fan_in = cin * 9
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
            weights.append(w.astype(np.float32))
            cin = cout
        return cls(weights, [stride] * len(channels), seed)

    @property
    def channel_counts(self) -> list[int]:
        return [w.data.shape[0] for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def features(self, img: T.Tensor) -> list[T.Tensor]:
        """Per-layer activations for an NCHW (or CHW) image tensor."""
        x = _as_batch(img)
        outs = []
        for w, s in zip(self.weights, self.strides):
            x = T.relu(T.conv2d(x, w, stride=s, padding=1))
            outs.append(x)
        return outs

    def pooled_vector(self, img: T.Tensor) -> np.ndarray:
        """Global average pooling of the last layer; used for set statistics."""
        with T.no_grad():
            last = self.features(img)[-1]
        return last.data.mean(axis=(0, 2, 3)).astype(np.float64)


class LpipsWeights:
    """Nonnegative per-channel weight vectors, one per extractor layer."""

    def __init__(self, vectors: list[np.ndarray]):
        self.vectors = [np.asarray(v, dtype=np.float32) for v in vectors]
        for v in self.vectors:
            if v.ndim != 1:
                raise ContractError("LpipsWeights: each entry must be a 1-D vector")
            if np.any(v < 0):
                raise ContractError("LpipsWeights: weights must be nonnegative")

    @classmethod
    def ones(cls, phi: FeatureExtractor) -> "LpipsWeights":
        return cls([np.ones(c, dtype=np.float32) for c in phi.channel_counts])

    def validate_against(self, phi: FeatureExtractor) -> None:
        counts = phi.channel_counts
        if len(self.vectors) != len(counts):
            raise DimensionError("LpipsWeights: layer count mismatch")
        for v, c in zip(self.vectors, counts):
            if v.shape != (c,):
                raise DimensionError(
                    f"LpipsWeights: vector length {v.shape[0]} != {c} channels")


def feature_loss(u: T.Tensor, v: T.Tensor, phi: FeatureExtractor, layer: int) -> T.Tensor:
    """Normalized squared feature distance at one extractor layer.

    Value is ||phi_l(u) - phi_l(v)||^2 / (C_l * W_l * H_l), averaged over
    the batch if inputs are batched.
    """
    if not 0 <= layer < phi.num_layers:
        raise ContractError(f"feature_loss: layer {layer} out of range")
    fu = phi.features(u)[layer]
    fv = phi.features(v)[layer]
    n = fu.data.shape[0]
    _, c, h, w = fu.data.shape
    return T.mul_scalar(mse_sum(fu, fv), 1.0 / (n * c * h * w))


def _lpips_terms(feats_u: list[T.Tensor], feats_v: list[T.Tensor],
                 w: LpipsWeights) -> T.Tensor:
    total = None
    for fu, fv, wl in zip(feats_u, feats_v, w.vectors):
        nu = T.channel_unit_normalize(fu, LPIPS_NORM_EPS)
        nv = T.channel_unit_normalize(fv, LPIPS_NORM_EPS)
        d = T.scale_channels(T.sub(nu, nv), wl)
        n, _, h, wd = fu.data.shape
        term = T.mul_scalar(T.sum_all(T.mul(d, d)), 1.0 / (n * h * wd))
        total = term if total is None else T.add(total, term)
    return total


def lpips(u: T.Tensor, v: T.Tensor, phi: FeatureExtractor, w: LpipsWeights) -> T.Tensor:
    """Weighted squared distance between channel-unit-normalized features,
    spatially averaged per layer and summed over layers."""
    w.validate_against(phi)
    return _lpips_terms(phi.features(u), phi.features(v), w)


def lpips_value(features_u: list[np.ndarray], features_v: list[np.ndarray],
                weight_vectors: list[np.ndarray]) -> float:
    """LPIPS form evaluated on precomputed per-layer feature maps (C,H,W)."""
    if len(features_u) != len(features_v) or len(features_u) != len(weight_vectors):
        raise DimensionError("lpips_value: layer count mismatch")
    total = 0.0
    for fu, fv, wl in zip(features_u, features_v, weight_vectors):
        if fu.shape != fv.shape:
            raise DimensionError("lpips_value: feature shapes differ")
        if wl.shape != (fu.shape[0],):
            raise DimensionError("lpips_value: weight length mismatch")
        nu = fu / (np.sqrt(np.sum(np.square(fu), axis=0, keepdims=True)) + LPIPS_NORM_EPS)
        nv = fv / (np.sqrt(np.sum(np.square(fv), axis=0, keepdims=True)) + LPIPS_NORM_EPS)
        d = (nu - nv) * wl[:, None, None]
        total += float(np.sum(np.square(d), dtype=np.float64) / (fu.shape[1] * fu.shape[2]))
    return total


# ---------------------------------------------------------------------------
# feature-map files (.cbfe)
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"CBFE"
FEATURE_VERSION = 1


def write_features(path, blocks: list[np.ndarray]) -> None:
    """Write a sequence of (C, H, W) float32 feature maps.

    Layout: magic "CBFE", version u32, block count u32, per-block
    (C, H, W) u32 triples, then the raw little-endian float32 payload in
    block order.
    """
    header = bytearray()
    header += FEATURE_MAGIC
    header += struct.pack("<II", FEATURE_VERSION, len(blocks))
    payload = bytearray()
    for b in blocks:
        b = np.asarray(b, dtype=np.float32)
        if b.ndim != 3:
            raise ContractError("write_features: blocks must be (C, H, W) arrays")
        header += struct.pack("<III", *b.shape)
        payload += b.astype("<f4").tobytes()
    from .ppm import atomic_write_bytes
    atomic_write_bytes(path, bytes(header) + bytes(payload))


def read_features(path) -> list[np.ndarray]:
    """Read back a feature file written by :func:`write_features`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise DataError(f"feature file {path}: truncated header")
    if raw[:4] != FEATURE_MAGIC:
        raise DataError(f"feature file {path}: bad magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"feature file {path}: unsupported version {version}")
    off = 12
    shapes = []
    for _ in range(count):
        if off + 12 > len(raw):
            raise DataError(f"feature file {path}: truncated shape table")
        shapes.append(struct.unpack_from("<III", raw, off))
        off += 12
    blocks = []
    for shape in shapes:
        nbytes = int(np.prod(shape)) * 4
        if off + nbytes > len(raw):
            raise DataError(f"feature file {path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=off)
        blocks.append(arr.reshape(shape).copy())
        off += nbytes
    if off != len(raw):
        raise DataError(f"feature file {path}: trailing bytes")
    return blocks
