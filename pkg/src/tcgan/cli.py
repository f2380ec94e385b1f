"""``tcgan`` command line: synth, train, train-msm, infer, eval, dump-features.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .config import ConfigError, build_config, load_mapping
from .data import DataError, UnpairedDataset, list_images, resize, synthesize_corpus
from .inference import dump_ste_features, remove_shadow, remove_shadow_fixed
from .losses import NonFiniteLossError
from .metrics import EvalReport, RandomConvEmbedding, extract_features, fid, kid, masked_rmse, rmse_n_i
from .tensors import ImageFileError, load_image, load_mask, save_image
from .trainer import TrainConfig, TrainState, load_generators, load_msm, save_msm, train, train_msm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("tcgan")


def code_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def write_manifest(path: Path, command: str, argv: list[str], config: dict, seeds: dict,
                   started: float, outputs: list[str]) -> None:
    """Write the run manifest atomically (temp file + rename)."""
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "code_version": code_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": outputs,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)


def _train_config(args) -> TrainConfig:
    values = load_mapping(args.config)
    if args.preset == "desk":
        base = asdict(TrainConfig.desk())
        base.update(values)
        values = base
    return build_config("train", values)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv) -> int:
    started = time.time()
    spec = build_config("synth", load_mapping(args.config))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    synthesize_corpus(spec).write(out)
    write_manifest(out / MANIFEST_NAME, "synth", argv, asdict(spec), {"seed": spec.seed}, started,
                   [str(out)])
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = time.time()
    if args.resume:
        state = TrainState.load(args.resume)
        cfg = state.cfg
    else:
        cfg = _train_config(args)
        state = TrainState(cfg)
    ds = UnpairedDataset.from_root(args.data)
    if len(ds.nonshadow_paths) < 2:
        raise DataError("training needs at least two shadow-free images: each step feeds two "
                        "distinct real samples, one to each discriminator "
                        f"(found {len(ds.nonshadow_paths)} in {args.data}/nonshadow)")
    out = Path(args.out)
    train(cfg, ds, out, state=state)
    seeds = {k: cfg.init_seed(k) for k in ("g1", "g2", "d1", "d2")} | {"seed": cfg.seed}
    write_manifest(out / MANIFEST_NAME, "train", argv, asdict(cfg), seeds, started,
                   [str(out / "final.ckpt"), str(out / "losses.csv"), str(out / "lr.csv")])
    return EXIT_OK


def cmd_train_msm(args, argv) -> int:
    started = time.time()
    cfg = _train_config(args)
    ds = UnpairedDataset.from_root(args.data)
    shadow = [ds.shadow(i) for i in range(len(ds.shadow_paths))]
    nonshadow = [ds.nonshadow(i) for i in range(len(ds.nonshadow_paths))]
    result = train_msm(cfg, shadow, nonshadow)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_msm(result.model, out, cfg.msm_channels, result.holdout_accuracy)
    print(f"held-out accuracy: {result.holdout_accuracy:.4f}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "train-msm", argv, asdict(cfg),
                   {"seed": cfg.seed, "msm": cfg.init_seed("msm")}, started, [str(out)])
    return EXIT_OK


def _valid_size(n: int) -> int:
    # 32 is the smallest size the selection classifier accepts
    return max(32, int(round(n / 8.0)) * 8)


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = list_images(path)
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.is_file():
        raise DataError(f"input not found: {path}")
    return [path]


def cmd_infer(args, argv) -> int:
    started = time.time()
    if args.branch == "msm" and not args.msm:
        raise ConfigError("--branch msm needs --msm (or pick --branch 1 / 2)")
    gens = load_generators(args.checkpoint)
    msm = load_msm(args.msm) if args.branch == "msm" else None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written, selections = [], {}
    for path in _inputs(Path(args.input)):
        x = load_image(path)
        h, w = x.shape[-2:]
        size = (_valid_size(h), _valid_size(w))
        xr = x if size == (h, w) else resize(x, size)
        if args.branch == "msm":
            res = remove_shadow(gens, msm, xr)
            y, cands = res.selected, (res.y1, res.y2)
            selections[path.name] = {"branch": res.selected_branch, "prob1": res.prob1, "prob2": res.prob2}
        else:
            y = remove_shadow_fixed(gens.g1 if args.branch == "1" else gens.g2, xr)
            cands = None
        if size != (h, w):
            y = resize(y, (h, w))
        target = out / (path.stem + ".png")
        save_image(y, target)
        written.append(str(target))
        if args.dump_candidates:
            cdir = out / "candidates"
            cdir.mkdir(exist_ok=True)
            if cands is None:
                cands = tuple(remove_shadow_fixed(g, xr) for g in (gens.g1, gens.g2))
            for i, c in enumerate(cands, start=1):
                save_image(c if size == (h, w) else resize(c, (h, w)), cdir / f"{path.stem}_branch{i}.png")
    if selections:
        (out / "selection.json").write_text(json.dumps(selections, indent=2, sort_keys=True))
    write_manifest(out / MANIFEST_NAME, "infer", argv, vars(args) | {"func": None},
                   {"generators": [gens.seed1, gens.seed2]}, started, written)
    return EXIT_OK


def _by_stem(directory: str) -> dict[str, Path]:
    return {p.stem: p for p in list_images(directory)}


def cmd_eval(args, argv) -> int:
    started = time.time()
    opts = build_config("eval", load_mapping(args.config))
    opts = replace(opts, metrics=args.metrics or opts.metrics, space=args.space or opts.space)
    metrics = [m.strip() for m in opts.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"fid", "kid", "rmse"}
    if bad:
        raise ConfigError(f"unknown metric(s): {', '.join(sorted(bad))}")
    preds = _by_stem(args.pred)
    refs = _by_stem(args.ref)
    if not preds or not refs:
        raise DataError("prediction and reference directories must both contain images")
    report = EvalReport()
    if "fid" in metrics or "kid" in metrics:
        extractor = RandomConvEmbedding(seed=opts.extractor_seed)
        fp = extract_features([load_image(p) for p in preds.values()], extractor)
        fr = extract_features([load_image(p) for p in refs.values()], extractor)
        report.extractor_id = extractor.extractor_id
        if "fid" in metrics:
            report.fid = fid(fp, fr)
        if "kid" in metrics:
            size = min(opts.kid_subset_size, fp.n, fr.n)
            report.kid_mean, report.kid_std = kid(fp, fr, size, opts.kid_subsets,
                                                  np.random.default_rng(opts.seed))
            report.kid_subset_size, report.kid_subsets = size, opts.kid_subsets
    if "rmse" in metrics:
        if not args.mask:
            raise ConfigError("rmse needs --mask")
        masks = _by_stem(args.mask)
        inputs = _by_stem(args.input) if args.input else {}
        names = sorted(set(preds) & set(refs) & set(masks))
        if not names:
            raise DataError("no basenames shared by --pred, --ref and --mask")
        sums: dict[str, list[float]] = {"S": [], "N": [], "A": [], "N-I": []}
        for name in names:
            p, r, m = load_image(preds[name]), load_image(refs[name]), load_mask(masks[name])
            for region in ("S", "N", "A"):
                if region == "A" or (m == (1 if region == "S" else 0)).any():
                    sums[region].append(masked_rmse(p, r, m, region, opts.space))
            if name in inputs and (m == 0).any():
                sums["N-I"].append(rmse_n_i(p, load_image(inputs[name]), m, opts.space))
        report.rmse = {k: float(np.mean(v)) for k, v in sums.items() if v}
        report.color_space = opts.space
    report.to_json(args.report)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    write_manifest(Path(args.report).with_name(Path(args.report).name + ".manifest.json"), "eval", argv,
                   asdict(opts), {"seed": opts.seed, "extractor_seed": opts.extractor_seed}, started,
                   [str(args.report)])
    return EXIT_OK


def cmd_dump_features(args, argv) -> int:
    started = time.time()
    gens = load_generators(args.checkpoint)
    x = load_image(args.input)
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        x = resize(x, (_valid_size(h), _valid_size(w)))
    files = dump_ste_features(gens, x, args.channels, args.out, stem=Path(args.input).stem)
    write_manifest(Path(args.out) / MANIFEST_NAME, "dump-features", argv, vars(args) | {"func": None},
                   {"generators": [gens.seed1, gens.seed2]}, started, [str(f) for f in files])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="tcgan", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shadow corpus", formatter_class=fmt)
    p.add_argument("--config", default=None, help="synthesis config (YAML key-value)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config / TCGAN_SEED seed")
    p.add_argument("--out", required=True, help="output corpus root")
    p.set_defaults(func=cmd_synth)

    for name, func, out_help in (("train", cmd_train, "run directory"),
                                 ("train-msm", cmd_train_msm, "classifier file")):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on root/shadow + root/nonshadow",
                           formatter_class=fmt)
        p.add_argument("--config", default=None, help="training config (YAML key-value)")
        p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                       help="defaults the config is applied on top of")
        p.add_argument("--data", required=True, help="dataset root")
        p.add_argument("--out", required=True, help=out_help)
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="remove shadows from an image or directory", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--msm", default=None, help="selection classifier (needed for --branch msm)")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--branch", choices=("1", "2", "msm"), default="msm", help="which output to keep")
    p.add_argument("--dump-candidates", action="store_true", default=False,
                   help="also write both branch outputs to output/candidates")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="FID / KID / masked RMSE", formatter_class=fmt)
    p.add_argument("--config", default=None, help="eval options (YAML key-value)")
    p.add_argument("--pred", required=True, help="directory of outputs")
    p.add_argument("--ref", required=True, help="reference directory (shadow-free set or ground truth)")
    p.add_argument("--mask", default=None, help="binary shadow masks, matched by basename")
    p.add_argument("--input", default=None, help="input shadow images for the N-I score")
    p.add_argument("--metrics", default=None, help="comma list of fid,kid,rmse (default: config or all)")
    p.add_argument("--space", choices=("lab", "rgb"), default=None, help="RMSE colour space (default lab)")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-features", help="save encoder feature heatmaps", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--input", required=True, help="input image")
    p.add_argument("--channels", type=int, default=10, help="number of leading channels to show")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"tcgan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageFileError) as exc:
        print(f"tcgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"tcgan: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
