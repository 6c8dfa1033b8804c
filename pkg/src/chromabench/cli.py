"""Command-line entry point: convert, train, colorize, evaluate,
gradcheck and features subcommands.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
or contract failure.  Every failure prints one machine-parsable line
``ERROR <code> <detail>`` on stderr; every produced file is written
atomically, and each run echoes its fully resolved configuration next to
its primary output.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import colorspace as cs
from . import gradcheck
from . import losses as L
from . import metrics
from . import pipeline
from . import tensor as T
from . import unet
from .errors import (ChromaBenchError, ConfigError, ContractError, DataError,
                     NumericalError)
from .ppm import atomic_write_text, read_image, write_ppm

logger = logging.getLogger("chromabench")

SEED_ENV_VAR = "CHROMABENCH_SEED"

_RUN_KEYS = {
    "preset", "strategy", "loss", "lr", "batch_size", "crop", "steps", "seed",
    "checkpoint_every", "base_width", "feature_seed", "grayscale_tol",
}
_PATH_KEYS = {"dataset", "out_dir"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _space(name: str) -> cs.Space:
    try:
        return cs.Space(name.lower())
    except ValueError:
        raise ConfigError(f"unknown color space {name!r}") from None


# per-space encodings into the [0, 1] file range, and their inverses
def _encode_for_file(img: cs.ColorImage) -> np.ndarray:
    p = img.planes
    if img.space is cs.Space.RGB:
        return p
    if img.space is cs.Space.YUV:
        return np.stack([p[..., 0],
                         (p[..., 1] / cs.U_MAX + 1) / 2,
                         (p[..., 2] / cs.V_MAX + 1) / 2], axis=-1)
    if img.space is cs.Space.LAB:
        return np.stack([p[..., 0] / cs.L_MAX,
                         (p[..., 1] / cs.AB_MAX + 1) / 2,
                         (p[..., 2] / cs.AB_MAX + 1) / 2], axis=-1)
    if img.space is cs.Space.XYZ:
        return p / cs.WHITE_POINT.as_array()
    return np.repeat(p, 3, axis=2)  # gray


def _decode_from_file(planes: np.ndarray, space: cs.Space) -> cs.ColorImage:
    if space is cs.Space.RGB:
        return cs.ColorImage(space, planes)
    if space is cs.Space.GRAY:
        return cs.ColorImage(space, planes[..., :1])
    if space is cs.Space.YUV:
        out = np.stack([planes[..., 0],
                        (planes[..., 1] * 2 - 1) * cs.U_MAX,
                        (planes[..., 2] * 2 - 1) * cs.V_MAX], axis=-1)
    elif space is cs.Space.LAB:
        out = np.stack([planes[..., 0] * cs.L_MAX,
                        (planes[..., 1] * 2 - 1) * cs.AB_MAX,
                        (planes[..., 2] * 2 - 1) * cs.AB_MAX], axis=-1)
    else:
        out = planes * cs.WHITE_POINT.as_array()
    return cs.ColorImage(space, out)


def _echo_config(path, sections: dict[str, dict]) -> None:
    cp = configparser.ConfigParser()
    for section, values in sections.items():
        cp[section] = {k: str(v) for k, v in values.items()}
    import io

    buf = io.StringIO()
    cp.write(buf)
    atomic_write_text(path, buf.getvalue())


def _sidecar(path) -> Path:
    return Path(str(path) + ".cfg")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_convert(args) -> int:
    if args.show_constants:
        print(cs.constants_text())
        if args.input is None:
            return 0
    if args.input is None or args.output is None:
        raise ConfigError("convert requires input and output paths")
    src, dst = _space(getattr(args, "from")), _space(args.to)
    planes = read_image(args.input)
    img = _decode_from_file(planes, src)
    if src is cs.Space.GRAY or dst is cs.Space.GRAY:
        if dst is cs.Space.GRAY:
            out = cs.luminance(img if src is cs.Space.RGB else cs.convert(img, cs.Space.RGB))
        else:
            out = cs.convert(cs.ColorImage(cs.Space.RGB, np.repeat(img.planes, 3, axis=2)),
                             dst)
    else:
        out = cs.convert(img, dst)
    if args.and_back:
        back = (cs.convert(out, src) if cs.Space.GRAY not in (src, dst)
                else None)
        if back is not None:
            err = float(np.max(np.abs(back.planes - img.planes)))
            print(f"round-trip max abs error: {err:.3e}")
    if args.clip and out.space is cs.Space.RGB:
        out = cs.clip_rgb(out)
    write_ppm(args.output, _encode_for_file(out))
    _echo_config(_sidecar(args.output), {"convert": {
        "input": args.input, "output": args.output,
        "from": src.value, "to": dst.value, "clip": args.clip,
    }})
    return 0


def _resolve_train_config(args) -> tuple[pipeline.TrainConfig, str]:
    preset = args.preset or "desk"
    file_vals: dict[str, str] = {}
    if args.config:
        cp = configparser.ConfigParser()
        read = cp.read(args.config)
        if not read:
            raise ConfigError(f"config file {args.config} not found")
        for section in cp.sections():
            if section not in ("run", "paths"):
                raise ConfigError(f"unknown config section [{section}]")
        for key, val in cp.items("run") if cp.has_section("run") else []:
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown config key [run] {key}")
            file_vals[key] = val
        for key, val in cp.items("paths") if cp.has_section("paths") else []:
            if key not in _PATH_KEYS:
                raise ConfigError(f"unknown config key [paths] {key}")
            file_vals[key] = val
        preset = file_vals.pop("preset", preset)
    if args.preset:
        preset = args.preset
    if preset not in pipeline.PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")

    merged = dict(pipeline.PRESETS[preset])
    merged.update({
        "strategy": pipeline.Strategy.YUV,
        "loss": "l2",
        "steps": 100,
        "seed": 0,
        "checkpoint_every": 0,
        "feature_seed": 0,
        "grayscale_tol": cs.GRAYSCALE_DEFAULT_TOL,
    })
    casts = {
        "strategy": pipeline.Strategy, "loss": str, "lr": float, "batch_size": int,
        "crop": int, "steps": int, "seed": int, "checkpoint_every": int,
        "base_width": int, "feature_seed": int, "grayscale_tol": float,
        "dataset": str, "out_dir": str,
    }
    for key, val in file_vals.items():
        merged["dataset_dir" if key == "dataset" else key] = casts[key](val)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from None
    for key in ("strategy", "loss", "lr", "batch_size", "crop", "steps", "seed",
                "checkpoint_every", "base_width", "feature_seed"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = casts[key](val)
    if args.dataset is not None:
        merged["dataset_dir"] = args.dataset
    if args.out_dir is not None:
        merged["out_dir"] = args.out_dir
    if not merged.get("dataset_dir"):
        raise ConfigError("train requires a dataset directory")
    if not merged.get("out_dir"):
        raise ConfigError("train requires an output directory")
    try:
        return pipeline.TrainConfig(**merged), preset
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg, preset = _resolve_train_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir / "resolved_config.cfg", {
        "run": {
            "preset": preset, "strategy": cfg.strategy.value, "loss": cfg.loss,
            "lr": repr(cfg.lr), "batch_size": cfg.batch_size, "crop": cfg.crop,
            "steps": cfg.steps, "seed": cfg.seed,
            "checkpoint_every": cfg.checkpoint_every, "base_width": cfg.base_width,
            "feature_seed": cfg.feature_seed, "grayscale_tol": repr(cfg.grayscale_tol),
        },
        "paths": {"dataset": cfg.dataset_dir, "out_dir": cfg.out_dir},
    })
    result = pipeline.train(cfg)
    if result.losses:
        print(f"trained {cfg.steps} step(s); first loss {result.losses[0]:.6g}, "
              f"final loss {result.losses[-1]:.6g}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log: {result.loss_log}")
    return 0


def cmd_colorize(args) -> int:
    w = unet.load(args.checkpoint)
    planes = read_image(args.input)
    gray = cs.luminance(cs.ColorImage(cs.Space.RGB, planes))
    strategy = pipeline.Strategy(args.strategy) if args.strategy else None
    out = pipeline.colorize(w, gray, strategy)
    write_ppm(args.output, out.planes)
    _echo_config(_sidecar(args.output), {"colorize": {
        "checkpoint": args.checkpoint, "input": args.input, "output": args.output,
        "strategy": (strategy or pipeline.Strategy(w.meta.get("strategy", "rgb"))).value,
    }})
    return 0


def cmd_evaluate(args) -> int:
    phi = L.FeatureExtractor.default(seed=args.feature_seed)
    weights = L.LpipsWeights.ones(phi)
    tfeats = L.read_features(args.truth_features) if args.truth_features else None
    pfeats = L.read_features(args.pred_features) if args.pred_features else None
    report = metrics.evaluate_dirs(args.truth_dir, args.pred_dir, phi, weights,
                                   truth_features=tfeats, pred_features=pfeats)
    metrics.write_report(report, args.output)
    _echo_config(_sidecar(args.output), {"evaluate": {
        "truth_dir": args.truth_dir, "pred_dir": args.pred_dir,
        "output": args.output, "feature_seed": args.feature_seed,
        "truth_features": args.truth_features or "",
        "pred_features": args.pred_features or "",
    }})
    agg = report.aggregate
    print(f"evaluated {sum(1 for r in report.rows if r.error is None)} pair(s); "
          f"aggregate L2 {agg.l2:.6g}, "
          f"FID {report.fid if report.fid is not None else 'nan'}")
    failures = [r for r in report.rows if r.error is not None]
    if failures:
        print(f"{len(failures)} row(s) failed; see ERROR lines in the report")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, only=args.module)
    if not results:
        raise ConfigError(f"no gradcheck entries match {args.module!r}")
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel error {r.max_rel_error:.3e}  {status}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed "
          f"(tolerance {gradcheck.TOLERANCE:g})")
    if failed:
        raise NumericalError(f"{failed} gradient check(s) exceeded tolerance")
    return 0


def cmd_features(args) -> int:
    phi = L.FeatureExtractor.default(seed=args.feature_seed)
    names = metrics._list_images(args.input_dir)
    if not names:
        raise DataError(f"{args.input_dir}: no images found")
    blocks = []
    for name in names:
        planes = read_image(Path(args.input_dir) / name)
        chw = np.ascontiguousarray(planes.transpose(2, 0, 1)).astype(np.float32)
        with T.no_grad():
            feats = phi.features(T.Tensor(chw))
        blocks.append(feats[-1].data[0])
    L.write_features(args.output, blocks)
    _echo_config(_sidecar(args.output), {"features": {
        "input_dir": args.input_dir, "output": args.output,
        "feature_seed": args.feature_seed,
        "images": " ".join(names),
    }})
    print(f"wrote {len(blocks)} feature block(s) to {args.output}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="chromabench",
                description="Colorization training, conversion and evaluation toolkit")
    p.add_argument("--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="convert an image between color spaces")
    c.add_argument("input", nargs="?")
    c.add_argument("output", nargs="?")
    c.add_argument("--from", default="rgb")
    c.add_argument("--to", default="rgb")
    c.add_argument("--clip", action="store_true", help="clip RGB output to [0,1]")
    c.add_argument("--and-back", action="store_true",
                   help="also convert back and print the max round-trip error")
    c.add_argument("--show-constants", action="store_true",
                   help="print matrices, inverses and the white point")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train a colorization network")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    t.add_argument("--strategy", choices=[s.value for s in pipeline.Strategy])
    t.add_argument("--loss", choices=["l2", "lpips"])
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--base-width", dest="base_width", type=int)
    t.add_argument("--feature-seed", dest="feature_seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--out-dir", dest="out_dir")
    t.set_defaults(func=cmd_train)

    cz = sub.add_parser("colorize", help="colorize a grayscale image")
    cz.add_argument("checkpoint")
    cz.add_argument("input")
    cz.add_argument("output")
    cz.add_argument("--strategy", choices=[s.value for s in pipeline.Strategy],
                    help="override the strategy stored in the checkpoint")
    cz.set_defaults(func=cmd_colorize)

    e = sub.add_parser("evaluate", help="compare a prediction directory to ground truth")
    e.add_argument("truth_dir")
    e.add_argument("pred_dir")
    e.add_argument("output")
    e.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    e.add_argument("--truth-features", help=".cbfe file replacing computed features")
    e.add_argument("--pred-features", help=".cbfe file replacing computed features")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    g.add_argument("--module", help="only run checks whose name contains this")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("features", help="extract feature maps for a directory")
    f.add_argument("input_dir")
    f.add_argument("output")
    f.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("chromabench").setLevel(logging.DEBUG)
        return args.func(args)
    except ConfigError as exc:
        print(f"ERROR 1 {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"ERROR 2 {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ContractError) as exc:
        print(f"ERROR 3 {exc}", file=sys.stderr)
        return 3
    except ChromaBenchError as exc:  # any future subclass
        print(f"ERROR 3 {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
