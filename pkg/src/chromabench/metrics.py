"""Evaluation measures: PSNR, SSIM, Gaussian feature statistics, a PSD
matrix square root and the Fréchet distance between feature Gaussians,
plus directory-level evaluation producing CSV reports.

Evaluation always runs on RGB images in [0, 1].  The Fréchet distance is
the standard form d^2 = ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}),
i.e. the matrix square root applies to the covariance product only; see
the README for a note on the alternative parenthesization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import losses as L
from . import tensor as T
from .colorspace import ColorImage, Space, luminance
from .errors import ContractError, DataError, DimensionError, NumericalError
from .ppm import IMAGE_SUFFIXES, atomic_write_text, read_image

logger = logging.getLogger("chromabench.metrics")

SSIM_C1 = 0.01 ** 2  # (0.01 * dynamic range)^2, range = 1
SSIM_C2 = 0.03 ** 2
SSIM_C3 = SSIM_C2 / 2.0


def psnr(u: np.ndarray, v: np.ndarray, channels: int | None = None) -> float:
    """Peak signal-to-noise ratio in dB: 20 log10(max u) - 10 log10(mse).

    ``u`` is the reference; identical inputs return +inf (serialized as
    "inf").  ``channels`` optionally asserts the channel count used in
    the mean.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"psnr: shape mismatch {u.shape} vs {v.shape}")
    if channels is not None and u.shape[-1] != channels:
        raise DimensionError(f"psnr: expected {channels} channels, got {u.shape[-1]}")
    mse = float(np.mean(np.square(u - v), dtype=np.float64))
    if mse == 0.0:
        return float("inf")
    with np.errstate(divide="ignore"):
        return float(20.0 * np.log10(u.max()) - 10.0 * np.log10(mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _luma_plane(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return luminance(ColorImage(Space.RGB, img)).planes[..., 0]
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise DimensionError(f"ssim: cannot take a luminance plane of shape {img.shape}")


def ssim(u: np.ndarray, v: np.ndarray, window: str = "global") -> float:
    """Structural similarity on the luminance planes of two images.

    ``window="global"`` (default) uses one set of whole-image statistics,
    giving the plain three-factor product; ``window="gaussian"`` computes
    the common 11x11 / sigma 1.5 sliding-window mean of the local SSIM
    map instead.
    """
    pu, pv = _luma_plane(u), _luma_plane(v)
    if pu.shape != pv.shape:
        raise DimensionError(f"ssim: shape mismatch {pu.shape} vs {pv.shape}")
    if window == "global":
        mu, mv = pu.mean(), pv.mean()
        var_u, var_v = pu.var(), pv.var()
        cov = ((pu - mu) * (pv - mv)).mean()
        su_sv = np.sqrt(var_u * var_v)
        lum_term = (2.0 * mu * mv + SSIM_C1) / (mu * mu + mv * mv + SSIM_C1)
        con_term = (2.0 * su_sv + SSIM_C2) / (var_u + var_v + SSIM_C2)
        str_term = (cov + SSIM_C3) / (su_sv + SSIM_C3)
        return float(lum_term * con_term * str_term)
    if window != "gaussian":
        raise ContractError(f"ssim: unknown window {window!r}")
    k = _gaussian_kernel()
    if min(pu.shape) < k.shape[0]:
        raise DimensionError("ssim: image smaller than the 11x11 window")

    def local(img, weights):
        w = sliding_window_view(img, weights.shape)
        return np.einsum("hwij,ij->hw", w, weights)

    mu, mv = local(pu, k), local(pv, k)
    var_u = local(pu * pu, k) - mu * mu
    var_v = local(pv * pv, k) - mv * mv
    cov = local(pu * pv, k) - mu * mv
    num = (2 * mu * mv + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu * mu + mv * mv + SSIM_C1) * (var_u + var_v + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class GaussianStats:
    """Mean vector and covariance matrix of a feature set."""

    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance (symmetrized) of D-vectors."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError(f"gaussian_stats: expected (N, D) samples, got {feats.shape}")
    if feats.shape[0] < 2:
        raise ContractError("gaussian_stats: need at least 2 samples")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu=mu, sigma=sigma)


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Small negative eigenvalues (>= -1e-6) are clamped to zero; anything
    more negative means the input is genuinely indefinite.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd: expected a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-6:
        raise ContractError("matrix_sqrt_psd: input is not symmetric within 1e-6")
    sym = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise ContractError(
            f"matrix_sqrt_psd: input is indefinite (min eigenvalue {vals.min():g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(r: GaussianStats, g: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    Computed via the symmetrized product S_r^{1/2} Sigma_g S_r^{1/2} so the
    square-rooted matrix is itself PSD.  Tiny negative results (>= -1e-8)
    clamp to 0.
    """
    if r.mu.shape != g.mu.shape or r.sigma.shape != g.sigma.shape:
        raise DimensionError("frechet_distance: dimension mismatch")
    sr = matrix_sqrt_psd(r.sigma)
    inner = sr @ g.sigma @ sr
    inner = 0.5 * (inner + inner.T)
    cross = matrix_sqrt_psd(inner)
    diff = r.mu - g.mu
    val = float(diff @ diff + np.trace(r.sigma) + np.trace(g.sigma) - 2.0 * np.trace(cross))
    if val < 0:
        if val < -1e-8:
            raise NumericalError(f"frechet_distance: negative value {val:g}")
        val = 0.0
    return val


# ---------------------------------------------------------------------------
# directory evaluation / reports
# ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    id: str
    l1: float = float("nan")
    l2: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    lpips: float = float("nan")
    error: str | None = None


@dataclass
class MetricReport:
    """Per-image rows plus one aggregate row and one set-level Fréchet value."""

    rows: list[MetricRow]
    fid: float | None
    metadata: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> MetricRow:
        ok = [r for r in self.rows if r.error is None]
        if not ok:
            return MetricRow(id="AGGREGATE")
        mean = lambda xs: float(np.mean(xs))  # noqa: E731
        return MetricRow(
            id="AGGREGATE",
            l1=mean([r.l1 for r in ok]),
            l2=mean([r.l2 for r in ok]),
            psnr=mean([r.psnr for r in ok]),
            ssim=mean([r.ssim for r in ok]),
            lpips=mean([r.lpips for r in ok]),
        )


def _to_chw(planes: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(planes.transpose(2, 0, 1)).astype(np.float32)


def evaluate_pair(truth: ColorImage, pred: ColorImage, phi: L.FeatureExtractor,
                  w: L.LpipsWeights) -> MetricRow:
    """All per-image metrics for one truth/prediction RGB pair.

    L1 and L2 are per-entry means (sums divided by C*M*N), matching the
    magnitude convention of the report layout.
    """
    if truth.space is not Space.RGB or pred.space is not Space.RGB:
        raise ContractError("evaluate_pair: RGB images required")
    if truth.planes.shape != pred.planes.shape:
        raise DimensionError(
            f"evaluate_pair: shape mismatch {truth.planes.shape} vs {pred.planes.shape}")
    n = truth.planes.size
    diff = truth.planes.astype(np.float64) - pred.planes.astype(np.float64)
    with T.no_grad():
        lp = L.lpips(T.Tensor(_to_chw(truth.planes)), T.Tensor(_to_chw(pred.planes)),
                     phi, w).item()
    return MetricRow(
        id="",
        l1=float(np.sum(np.abs(diff), dtype=np.float64) / n),
        l2=float(np.sum(np.square(diff), dtype=np.float64) / n),
        psnr=psnr(truth.planes, pred.planes),
        ssim=ssim(truth.planes, pred.planes),
        lpips=lp,
    )


def _list_images(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(p.name for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def evaluate_dirs(truth_dir, pred_dir, phi: L.FeatureExtractor, w: L.LpipsWeights,
                  truth_features: list[np.ndarray] | None = None,
                  pred_features: list[np.ndarray] | None = None,
                  metadata: dict | None = None) -> MetricReport:
    """Evaluate matching filenames between two directories.

    Per-row failures (missing counterpart, decode error, size mismatch)
    are recorded on the row and skipped in the aggregate; the run
    continues.  The Fréchet value uses pooled last-layer features of the
    built-in extractor, or precomputed per-image feature maps when
    ``*_features`` are supplied (one last-layer block per image, in
    sorted filename order).
    """
    truth_names = _list_images(truth_dir)
    pred_names = set(_list_images(pred_dir))
    if not truth_names:
        raise DataError(f"{truth_dir}: no images found")
    rows: list[MetricRow] = []
    tfeats: list[np.ndarray] = []
    pfeats: list[np.ndarray] = []
    matched_idx: list[int] = []
    for i, name in enumerate(truth_names):
        if name not in pred_names:
            rows.append(MetricRow(id=name, error="missing prediction"))
            continue
        try:
            t_planes = read_image(Path(truth_dir) / name)
            p_planes = read_image(Path(pred_dir) / name)
        except DataError as exc:
            rows.append(MetricRow(id=name, error=f"decode failure: {exc}"))
            continue
        if t_planes.shape != p_planes.shape:
            rows.append(MetricRow(
                id=name, error=f"dimension mismatch {t_planes.shape} vs {p_planes.shape}"))
            continue
        truth = ColorImage(Space.RGB, t_planes)
        pred = ColorImage(Space.RGB, p_planes)
        row = evaluate_pair(truth, pred, phi, w)
        row.id = name
        rows.append(row)
        matched_idx.append(i)
        if truth_features is None:
            tfeats.append(phi.pooled_vector(T.Tensor(_to_chw(t_planes))))
        if pred_features is None:
            pfeats.append(phi.pooled_vector(T.Tensor(_to_chw(p_planes))))
    for extra in sorted(pred_names.difference(truth_names)):
        rows.append(MetricRow(id=extra, error="missing ground truth"))
    if truth_features is not None:
        tfeats = [truth_features[i].mean(axis=(1, 2)) for i in matched_idx]
    if pred_features is not None:
        pfeats = [pred_features[i].mean(axis=(1, 2)) for i in matched_idx]
    fid = None
    if len(tfeats) >= 2 and len(pfeats) >= 2:
        fid = frechet_distance(gaussian_stats(np.asarray(tfeats)),
                               gaussian_stats(np.asarray(pfeats)))
    else:
        logger.warning("fewer than 2 valid pairs; Fréchet value not computed")
    failed = [r for r in rows if r.error is not None]
    for r in failed:
        logger.warning("row %s skipped: %s", r.id, r.error)
    meta = dict(metadata or {})
    meta.setdefault("feature_seed", str(phi.seed))
    return MetricReport(rows=rows, fid=fid, metadata=meta)


def _fmt(x: float) -> str:
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    if np.isnan(x):
        return "nan"
    return f"{x:.9g}"


def report_csv(report: MetricReport) -> str:
    """Serialize a report: header, per-image rows, AGGREGATE, FID, then
    one ERROR line per failed row (UTF-8, LF)."""
    lines = ["id,L1,L2,PSNR,SSIM,LPIPS"]
    for r in report.rows:
        if r.error is not None:
            continue
        lines.append(",".join([r.id, _fmt(r.l1), _fmt(r.l2), _fmt(r.psnr),
                               _fmt(r.ssim), _fmt(r.lpips)]))
    agg = report.aggregate
    lines.append(",".join(["AGGREGATE", _fmt(agg.l1), _fmt(agg.l2), _fmt(agg.psnr),
                           _fmt(agg.ssim), _fmt(agg.lpips)]))
    lines.append(f"FID,{_fmt(report.fid) if report.fid is not None else 'nan'}")
    for r in report.rows:
        if r.error is not None:
            lines.append(f"ERROR,{r.id},{r.error}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, path) -> None:
    atomic_write_text(path, report_csv(report))
