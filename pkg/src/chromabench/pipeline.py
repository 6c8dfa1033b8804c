"""Dataset ingestion, the four training strategies, the training loop,
and inference at original resolution.

Strategy summary: the network always takes a 3-channel replicated
luminance image.  RGB predicts the color image directly and the loss is
taken there; YUV and Lab predict normalized chrominance and the loss
compares chrominance; LabRGB predicts Lab chrominance but routes the loss
through the differentiable Lab->RGB conversion and the [0,1] clip.  The
LPIPS-form loss always compares RGB, so chrominance strategies convert
(and clip) inside the graph for it as well.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import colorspace as cs
from . import losses as L
from . import tensor as T
from . import unet
from .errors import ContractError, DataError, DimensionError, NumericalError
from .ppm import IMAGE_SUFFIXES, atomic_write_text, read_image

logger = logging.getLogger("chromabench.pipeline")


class Strategy(str, Enum):
    RGB = "rgb"
    YUV = "yuv"
    LAB = "lab"
    LABRGB = "labrgb"

    @property
    def out_channels(self) -> int:
        return 3 if self is Strategy.RGB else 2

    @property
    def loss_space(self) -> str:
        return "rgb" if self in (Strategy.RGB, Strategy.LABRGB) else "chroma"

    @property
    def chroma_scale(self) -> tuple[float, float] | None:
        if self is Strategy.YUV:
            return (cs.U_MAX, cs.V_MAX)
        if self in (Strategy.LAB, Strategy.LABRGB):
            return (cs.AB_MAX, cs.AB_MAX)
        return None


PRESETS = {
    "paper": dict(base_width=64, crop=256, batch_size=16, lr=2e-5),
    "desk": dict(base_width=8, crop=64, batch_size=4, lr=1e-3),
}


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.YUV
    loss: str = "l2"  # "l2" or "lpips"
    lr: float = 2e-5
    batch_size: int = 16
    crop: int = 256
    steps: int = 100
    seed: int = 0
    dataset_dir: str = ""
    out_dir: str = ""
    checkpoint_every: int = 0  # 0: final checkpoint only
    base_width: int = 64
    feature_seed: int = 0
    grayscale_tol: float = cs.GRAYSCALE_DEFAULT_TOL

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.loss not in ("l2", "lpips"):
            raise ContractError(f"TrainConfig: unknown loss {self.loss!r}")
        if self.crop % 16:
            raise ContractError("TrainConfig: crop size must be divisible by 16")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractError("TrainConfig: bad batch size or step count")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ContractError(f"unknown preset {name!r}")
        merged = dict(PRESETS[name])
        merged.update(overrides)
        return cls(**merged)


@dataclass
class Sample:
    """One training example: replicated-luminance input, strategy target,
    and the RGB crop everything derives from (all CHW float32)."""

    input: np.ndarray
    target: np.ndarray
    rgb: np.ndarray
    source_id: str
    crop_offset: tuple[int, int]


def resize_bilinear(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array (half-pixel centers)."""
    h, w = planes.shape[:2]
    if (h, w) == (out_h, out_w):
        return planes
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    p00 = planes[np.ix_(y0, x0)]
    p01 = planes[np.ix_(y0, x1)]
    p10 = planes[np.ix_(y1, x0)]
    p11 = planes[np.ix_(y1, x1)]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return top * (1 - wy) + bot * wy


def resize_min_dim(planes: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize so the smaller dimension equals ``size``;
    the other dimension rounds to nearest."""
    h, w = planes.shape[:2]
    if h <= w:
        return resize_bilinear(planes, size, int(round(w * size / h)))
    return resize_bilinear(planes, int(round(h * size / w)), size)


def scan_dataset(directory, tol: float = cs.GRAYSCALE_DEFAULT_TOL) -> list[str]:
    """Usable image ids in ``directory``: decodable color images, sorted.

    Grayscale images (channel spread <= tol everywhere) are excluded and
    counted; unreadable files are skipped with a warning; an empty result
    is fatal.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    ids = []
    excluded = 0
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            planes = read_image(p)
        except DataError as exc:
            logger.warning("skipping unreadable image %s: %s", p.name, exc)
            continue
        if cs.is_grayscale(cs.ColorImage(cs.Space.RGB, planes), tol):
            excluded += 1
            continue
        ids.append(p.name)
    if excluded:
        logger.info("excluded %d grayscale image(s) from %s", excluded, directory)
    if not ids:
        raise DataError(f"{directory}: empty dataset (no usable color images)")
    return ids


def encode_luminance(img: cs.ColorImage, strategy: Strategy) -> np.ndarray:
    """The [0,1] luminance plane the network sees for ``strategy``.

    YUV and RGB use the weighted-sum luminance; Lab strategies use L/100
    of the Lab conversion, so reassembling with the same plane preserves
    the channel exactly.
    """
    if strategy in (Strategy.LAB, Strategy.LABRGB):
        return cs.rgb_to_lab(img).planes[..., 0] / cs.L_MAX
    return cs.luminance(img).planes[..., 0]


def _crop_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    # counter-based generator: same (seed, index, epoch) -> same offsets
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    counter = np.array([epoch & 0xFFFFFFFFFFFFFFFF, 0, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def prepare_sample(img: cs.ColorImage, strategy: Strategy, crop: int, seed: int,
                   index: int, epoch: int = 0, source_id: str = "") -> Sample:
    """Resize so min(H, W) == crop, take a seeded square crop, and encode
    input/target planes for the strategy.

    Normalized chrominance targets are clamped to [-1, 1]; out-of-range
    values are counted and logged.
    """
    if img.space is not cs.Space.RGB:
        raise ContractError("prepare_sample: RGB input required")
    resized = resize_min_dim(img.planes, crop)
    h, w = resized.shape[:2]
    rng = _crop_rng(seed, index, epoch)
    off_y = int(rng.integers(0, h - crop + 1))
    off_x = int(rng.integers(0, w - crop + 1))
    patch = cs.ColorImage(cs.Space.RGB, resized[off_y:off_y + crop, off_x:off_x + crop])

    lum = encode_luminance(patch, strategy)
    inp = np.repeat(lum[None, :, :], 3, axis=0).astype(np.float32)
    rgb_chw = np.ascontiguousarray(patch.planes.transpose(2, 0, 1)).astype(np.float32)

    if strategy in (Strategy.RGB, Strategy.LABRGB):
        target = rgb_chw
    else:
        if strategy is Strategy.YUV:
            conv = cs.rgb_to_yuv(patch)
            scale = np.array([cs.U_MAX, cs.V_MAX])
        else:
            conv = cs.rgb_to_lab(patch)
            scale = np.array([cs.AB_MAX, cs.AB_MAX])
        chroma = conv.planes[..., 1:3] / scale
        outside = int(np.sum(np.abs(chroma) > 1.0))
        if outside:
            logger.info("sample %s: %d normalized chrominance value(s) clamped",
                        source_id, outside)
        chroma = np.clip(chroma, -1.0, 1.0)
        target = np.ascontiguousarray(chroma.transpose(2, 0, 1)).astype(np.float32)

    return Sample(input=inp, target=target, rgb=rgb_chw, source_id=source_id,
                  crop_offset=(off_y, off_x))


def _assemble_graph(strategy: Strategy, lum: T.Tensor, chroma: T.Tensor) -> T.Tensor:
    """Differentiable luminance+chrominance -> RGB (pre-clip)."""
    scale = strategy.chroma_scale
    raw = T.scale_channels(chroma, np.array(scale))
    if strategy is Strategy.YUV:
        return cs.yuv_to_rgb_t(T.concat_channels(lum, raw))
    lab_l = T.mul_scalar(lum, cs.L_MAX)
    return cs.lab_to_rgb_t(T.concat_channels(lab_l, raw))


def training_loss(strategy: Strategy, loss_kind: str, pred: T.Tensor,
                  lum: T.Tensor, target: T.Tensor, target_rgb: T.Tensor,
                  phi: L.FeatureExtractor | None = None,
                  lpips_w: L.LpipsWeights | None = None) -> T.Tensor:
    """The per-strategy training objective as a graph tensor."""
    if loss_kind == "l2":
        if strategy is Strategy.RGB:
            return L.mse_sum(pred, target)
        if strategy in (Strategy.YUV, Strategy.LAB):
            return L.mse_sum(pred, target)
        rgb = T.clamp01(_assemble_graph(strategy, lum, pred))
        return L.mse_sum(rgb, target_rgb)
    # LPIPS form: always compared on RGB
    if strategy is Strategy.RGB:
        return L.lpips(pred, target_rgb, phi, lpips_w)
    rgb = T.clamp01(_assemble_graph(strategy, lum, pred))
    return L.lpips(rgb, target_rgb, phi, lpips_w)


def training_step(w: unet.UNetWeights, samples: list[Sample], cfg: TrainConfig,
                  opt: T.AdamState, phi: L.FeatureExtractor | None = None,
                  lpips_w: L.LpipsWeights | None = None) -> float:
    """One optimizer step on a batch; returns the loss value.

    A non-finite loss aborts the step: batch-norm statistics are rolled
    back, weights are untouched, and a NumericalError is raised.
    """
    inputs = np.stack([s.input for s in samples])
    targets = np.stack([s.target for s in samples])
    rgbs = np.stack([s.rgb for s in samples])
    input_t = T.Tensor(inputs)
    target_t = T.Tensor(targets)
    rgb_t = T.Tensor(rgbs)
    lum_t = T.Tensor(np.ascontiguousarray(inputs[:, :1]))
    snapshot = w.snapshot_bn()
    T.zero_grad(w.parameters())
    try:
        pred = unet.forward(w, input_t, mode="train")
        loss = training_loss(cfg.strategy, cfg.loss, pred, lum_t, target_t, rgb_t,
                             phi, lpips_w)
        if cfg.strategy.loss_space == "chroma" and cfg.loss == "l2":
            scale = np.array(cfg.strategy.chroma_scale, dtype=np.float64)
            raw_scale = float(np.sum(
                np.square((pred.data - targets) * scale[None, :, None, None]),
                dtype=np.float64))
            logger.debug("raw-scale chrominance loss: %.9g", raw_scale)
        T.backward(loss)
    except NumericalError:
        w.restore_bn(snapshot)
        raise
    T.adam_step(w.parameters(), opt)
    return loss.item()


@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    losses: list[float] = field(default_factory=list)


def _checkpoint_meta(cfg: TrainConfig) -> dict[str, str]:
    meta = {
        "strategy": cfg.strategy.value,
        "loss": cfg.loss,
        "seed": str(cfg.seed),
        "lr": repr(cfg.lr),
        "crop": str(cfg.crop),
        "feature_seed": str(cfg.feature_seed),
    }
    scale = cfg.strategy.chroma_scale
    if scale is not None:
        meta["chroma_scale_0"] = repr(scale[0])
        meta["chroma_scale_1"] = repr(scale[1])
    return meta


def train(cfg: TrainConfig) -> TrainResult:
    """Full training run: deterministic in ``cfg`` (same config, same
    bytes out).  Writes ``loss_log.csv`` and ``checkpoint.cbck`` (plus
    cadence checkpoints) under ``cfg.out_dir``."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = scan_dataset(cfg.dataset_dir, cfg.grayscale_tol)
    images = {i: cs.ColorImage(cs.Space.RGB, read_image(Path(cfg.dataset_dir) / i))
              for i in ids}
    net_cfg = unet.UNetConfig(base_width=cfg.base_width,
                              out_channels=cfg.strategy.out_channels)
    w = unet.build(net_cfg, cfg.seed)
    w.meta = _checkpoint_meta(cfg)
    params = w.parameters()
    opt = T.AdamState(params, lr=cfg.lr)
    phi = lpips_w = None
    if cfg.loss == "lpips":
        phi = L.FeatureExtractor.default(seed=cfg.feature_seed)
        lpips_w = L.LpipsWeights.ones(phi)

    log_lines = ["step,loss,wall_ms"]
    losses: list[float] = []
    ckpt_path = out_dir / "checkpoint.cbck"
    log_path = out_dir / "loss_log.csv"
    counter = 0
    try:
        for step in range(1, cfg.steps + 1):
            batch = []
            for _ in range(cfg.batch_size):
                idx = counter % len(ids)
                epoch = counter // len(ids)
                counter += 1
                batch.append(prepare_sample(images[ids[idx]], cfg.strategy, cfg.crop,
                                            cfg.seed, idx, epoch, source_id=ids[idx]))
            t0 = time.perf_counter()
            loss = training_step(w, batch, cfg, opt, phi, lpips_w)
            wall_ms = int((time.perf_counter() - t0) * 1000)
            losses.append(loss)
            log_lines.append(f"{step},{loss:.9g},{wall_ms}")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                unet.save(w, out_dir / f"ckpt_{step:06d}.cbck")
    finally:
        # on any failure the last cadence checkpoint stays on disk
        atomic_write_text(log_path, "\n".join(log_lines) + "\n")
    unet.save(w, ckpt_path)
    return TrainResult(checkpoint=ckpt_path, loss_log=log_path, losses=losses)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _pad_to_multiple(plane: np.ndarray, mult: int = 16) -> np.ndarray:
    h, w = plane.shape
    ph = (-h) % mult
    pw = (-w) % mult
    if ph == 0 and pw == 0:
        return plane
    return np.pad(plane, ((0, ph), (0, pw)), mode="reflect")


def colorize_preclip(w: unet.UNetWeights, gray: cs.ColorImage,
                     strategy: Strategy | None = None) -> np.ndarray:
    """RGB prediction before gamut clipping, HxWx3 float64.

    The input is reflection-padded to multiples of 16 for the forward
    pass and cropped back; chrominance strategies reattach the original
    (unpadded, unmodified) luminance plane.
    """
    if gray.space is not cs.Space.GRAY:
        raise ContractError("colorize: grayscale input required")
    if strategy is None:
        if "strategy" not in w.meta:
            raise ContractError("colorize: checkpoint carries no strategy; pass one")
        strategy = Strategy(w.meta["strategy"])
    if w.config.out_channels != strategy.out_channels:
        raise ContractError(
            f"colorize: checkpoint has {w.config.out_channels} output channels, "
            f"strategy {strategy.value} needs {strategy.out_channels}")
    h, wd = gray.planes.shape[:2]
    if h < 16 or wd < 16:
        raise DimensionError("colorize: input must be at least 16x16")
    rgb_rep = cs.ColorImage(cs.Space.RGB, np.repeat(gray.planes, 3, axis=2))
    lum = encode_luminance(rgb_rep, strategy)
    padded = _pad_to_multiple(lum)
    net_in = np.repeat(padded[None, None], 3, axis=1).astype(np.float32)
    with T.no_grad():
        pred = unet.forward(w, T.Tensor(net_in), mode="eval")
    pred = pred.data[0, :, :h, :wd].astype(np.float64)
    if strategy is Strategy.RGB:
        return pred.transpose(1, 2, 0)
    scale = np.array(strategy.chroma_scale)
    chroma = pred.transpose(1, 2, 0) * scale
    if strategy is Strategy.YUV:
        stacked = np.concatenate([lum[..., None], chroma], axis=2)
        return cs.yuv_to_rgb(cs.ColorImage(cs.Space.YUV, stacked)).planes
    stacked = np.concatenate([lum[..., None] * cs.L_MAX, chroma], axis=2)
    return cs.lab_to_rgb(cs.ColorImage(cs.Space.LAB, stacked)).planes


def colorize(w: unet.UNetWeights, gray: cs.ColorImage,
             strategy: Strategy | None = None) -> cs.ColorImage:
    """Colorize a grayscale image at its original resolution (clipped)."""
    planes = np.clip(colorize_preclip(w, gray, strategy), 0.0, 1.0)
    return cs.ColorImage(cs.Space.RGB, planes)
