"""Finite-difference verification of every differentiable operation.

Each check evaluates the operation in float64, compares the recorded
backward pass against central differences (h = 1e-4) and reports the
worst relative error.  Random inputs are kept away from nondifferentiable
points (kinks, ties, clip boundaries) by at least 1e-2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import colorspace as cs
from . import losses as L
from . import tensor as T

FD_STEP = 1e-4
TOLERANCE = 1e-3


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the numeric gradient's magnitude."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_gradients(name: str, build: Callable[[list[T.Tensor]], T.Tensor],
                    arrays: list[np.ndarray]) -> CheckResult:
    """Compare backward() against finite differences for every input."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    T.backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        # the FD probe perturbs the live buffer in place, so re-evaluate
        # through fresh no-grad tensors each time
        numeric = numeric_grad(lambda: _eval(build, tensors), t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name, worst)


def _eval(build, tensors) -> float:
    with T.no_grad():
        return build([T.Tensor(t.data) for t in tensors]).item()


def _away_from(x: np.ndarray, points: list[float], margin: float = 2e-2) -> np.ndarray:
    """Nudge values off nondifferentiable points by at least ``margin``."""
    for pt in points:
        near = np.abs(x - pt) < margin
        x = np.where(near, pt + margin * np.where(x >= pt, 1.0, -1.0), x)
    return x


def _pool_safe(rng: np.random.Generator, shape) -> np.ndarray:
    """Random input whose 2x2 window maxima win by a clear margin."""
    x = rng.uniform(0.0, 1.0, size=shape)
    n, c, h, w = shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    bumped = np.take_along_axis(flat, idx[..., None], axis=-1) + 0.5
    np.put_along_axis(flat, idx[..., None], bumped, axis=-1)
    return flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(shape)


def default_suite(seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """The full battery: every tensor op and every loss."""
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.uniform(0.1, 0.9, (3, 4, 4))
    v = _away_from(u + rng.uniform(-0.5, 0.5, u.shape), [0.0])
    v = np.where(np.abs(u - v) < 2e-2, u + 3e-2, v)  # keep |u-v| off ties

    phi = L.FeatureExtractor.default(seed=seed)
    lw = L.LpipsWeights.ones(phi)

    conv_x = rng.standard_normal((2, 3, 6, 6))
    conv_w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    conv_b = rng.standard_normal(4) * 0.1
    tconv_x = rng.standard_normal((2, 3, 4, 4))
    tconv_w = rng.standard_normal((3, 2, 4, 4)) * 0.5
    tconv_b = rng.standard_normal(2) * 0.1
    bn_x = rng.standard_normal((2, 3, 4, 4))
    bn_g = rng.uniform(0.5, 1.5, 3)
    bn_b = rng.uniform(-0.5, 0.5, 3)
    relu_x = _away_from(rng.standard_normal((3, 5)), [0.0])
    clamp_x = _away_from(rng.uniform(-0.5, 1.5, (3, 5)), [0.0, 1.0])
    pool_x = _pool_safe(rng, (2, 3, 4, 4))
    cat_a = rng.standard_normal((1, 2, 3, 3))
    cat_b = rng.standard_normal((1, 3, 3, 3))
    lab = np.stack([rng.uniform(20, 90, (4, 4)),
                    rng.uniform(-40, 40, (4, 4)),
                    rng.uniform(-40, 40, (4, 4))])
    norm_x = rng.standard_normal((1, 4, 3, 3)) + 0.5

    def bn_state():
        return T.BatchNormState(3, momentum=0.1, eps=1e-5, dtype=np.float64)

    mat = rng.standard_normal((2, 3))

    suite: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("add", lambda ts: T.sum_all(T.mul(T.add(ts[0], ts[1]), ts[1])), [u, v]),
        ("sub", lambda ts: T.sum_all(T.mul(T.sub(ts[0], ts[1]), ts[0])), [u, v]),
        ("mul", lambda ts: T.sum_all(T.mul(ts[0], ts[1])), [u, v]),
        ("scalar_ops", lambda ts: T.sum_all(T.add_scalar(T.mul_scalar(ts[0], 2.5), -1.0)),
         [u]),
        ("abs", lambda ts: T.sum_all(T.abs_val(ts[0])), [_away_from(v - u, [0.0])]),
        ("relu", lambda ts: T.sum_all(T.mul(T.relu(ts[0]), ts[0])), [relu_x]),
        ("clamp01", lambda ts: T.sum_all(T.mul(T.clamp01(ts[0]), ts[0])), [clamp_x]),
        ("mean_all", lambda ts: T.mean_all(T.mul(ts[0], ts[0])), [u]),
        ("concat_channels",
         lambda ts: T.sum_all(T.mul(T.concat_channels(ts[0], ts[1]),
                                    T.concat_channels(ts[0], ts[1]))),
         [cat_a, cat_b]),
        ("channel_linear",
         lambda ts: T.sum_all(T.mul(T.channel_linear(ts[0], mat, np.array([0.1, -0.2])),
                                    T.channel_linear(ts[0], mat, np.array([0.1, -0.2])))),
         [u]),
        ("scale_channels",
         lambda ts: T.sum_all(T.mul(T.scale_channels(ts[0], np.array([1.5, -2.0, 0.5])),
                                    ts[0])), [u]),
        ("channel_norm_sum", lambda ts: T.channel_norm_sum(ts[0]), [norm_x]),
        ("channel_unit_normalize",
         lambda ts: T.sum_all(T.mul(T.channel_unit_normalize(ts[0]), ts[0])), [norm_x]),
        ("conv2d_s1p1",
         lambda ts: T.sum_all(T.mul(T.conv2d(ts[0], ts[1], ts[2], 1, 1),
                                    T.conv2d(ts[0], ts[1], ts[2], 1, 1))),
         [conv_x, conv_w, conv_b]),
        ("conv2d_s2p0",
         lambda ts: T.sum_all(T.conv2d(ts[0], ts[1], ts[2], 2, 0)),
         [conv_x, conv_w, conv_b]),
        ("conv_transpose2d",
         lambda ts: T.sum_all(T.mul(T.conv_transpose2d(ts[0], ts[1], ts[2]),
                                    T.conv_transpose2d(ts[0], ts[1], ts[2]))),
         [tconv_x, tconv_w, tconv_b]),
        ("maxpool2d", lambda ts: T.sum_all(T.mul(T.maxpool2d(ts[0]), T.maxpool2d(ts[0]))),
         [pool_x]),
        ("batchnorm2d_train",
         lambda ts: T.sum_all(T.mul(T.batchnorm2d(ts[0], ts[1], ts[2], bn_state(),
                                                  "train"), ts[0])),
         [bn_x, bn_g, bn_b]),
        ("batchnorm2d_eval",
         lambda ts: T.sum_all(T.mul(T.batchnorm2d(ts[0], ts[1], ts[2], bn_state(),
                                                  "eval"), ts[0])),
         [bn_x, bn_g, bn_b]),
        ("composite_conv_bn_relu",
         lambda ts: T.sum_all(T.relu(T.batchnorm2d(
             T.conv2d(ts[0], ts[1], ts[2], 1, 1), ts[3], ts[4], bn_state(), "train"))),
         [conv_x, conv_w, conv_b, bn_g, bn_b]),
        ("lab_f_inv", lambda ts: T.sum_all(cs.lab_f_inv_t(ts[0])),
         [_away_from(rng.uniform(0.0, 1.0, (3, 4, 4)), [cs.LAB_DELTA])]),
        ("lab_to_rgb",
         lambda ts: T.sum_all(T.mul(cs.lab_to_rgb_t(ts[0]), cs.lab_to_rgb_t(ts[0]))),
         [lab]),
        ("yuv_to_rgb", lambda ts: T.sum_all(T.mul(cs.yuv_to_rgb_t(ts[0]), ts[0])), [u]),
        ("loss_mse_sum", lambda ts: L.mse_sum(ts[0], ts[1]), [u, v]),
        ("loss_mse_mean", lambda ts: L.mse_mean(ts[0], ts[1]), [u, v]),
        ("loss_mae", lambda ts: L.mae(ts[0], ts[1]), [u, v]),
        ("loss_mae_coupled", lambda ts: L.mae_coupled(ts[0], ts[1]), [u, v]),
        ("loss_feature", lambda ts: L.feature_loss(ts[0], ts[1], phi, 1), [u, v]),
        ("loss_lpips", lambda ts: L.lpips(ts[0], ts[1], phi, lw), [u, v]),
    ]
    return suite


def run_all(seed: int = 0, only: str | None = None) -> list[CheckResult]:
    """Run the whole battery (optionally filtered by substring)."""
    results = []
    for name, build, arrays in default_suite(seed):
        if only and only not in name:
            continue
        results.append(check_gradients(name, build, arrays))
    return results
