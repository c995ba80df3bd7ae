"""Command-line entry point.

    seuda make-phantoms --config phantoms.yaml --out runs/data
    seuda train-seg   --source runs/data/source/manifest.tsv --out runs/exp
    seuda train-uda   --source ... --target ... --segmenter runs/exp/checkpoints/segmenter.pt --out runs/exp
    seuda transform   --adaptation runs/exp/checkpoints/adaptation.pt --target ... --out runs/exp
    seuda predict     --segmenter ... --manifest ... --out runs/exp [--adaptation ckpt | --histogram file]
    seuda eval        --pred-dir runs/exp/predictions --gt ... --out runs/exp
    seuda bench       --settings S-test,T-noDA,T-HistM,T-STL,CyUDA,SeUDA --out runs/bench
    seuda stability   --n-runs 5 --lambdas 0,0.5 --out runs/stab

Exit codes: 0 success, 1 usage or missing prerequisite, 2 non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import adaptation as ad
from . import data as D
from .baselines import build_reference_histogram, histogram_match, load_histogram, save_histogram
from .experiment import ToyConfig, ToyData, run_bench, stability_study
from .metrics import SETTINGS, evaluate, format_table
from .segmenter import (NonFiniteLossError, build_segmenter, load_segmenter, predict_labels,
                        save_segmenter, train_segmenter)

log = logging.getLogger("seuda")

PHANTOM_KEYS = {"working_size", "seed", "n_source", "n_target", "lobe_offset", "center_jitter",
                "half_width", "half_height", "max_tilt_deg"}
APPEARANCE_KEYS = {f.name for f in dataclasses.fields(D.Appearance)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _layout(out: Path) -> dict[str, Path]:
    dirs = {k: out / k for k in ("checkpoints", "transforms", "reports", "logs")}
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def _write_jsonl(path: Path, header: dict, records: list[dict]) -> None:
    lines = [json.dumps({"kind": "header", **header}, sort_keys=True)]
    lines += [json.dumps({"kind": "epoch", **r}, sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + "\n")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def _toy_config(args) -> ToyConfig:
    cfg = ToyConfig.load(args.config) if getattr(args, "config", None) else ToyConfig()
    overrides = {"alpha": "alpha", "beta": "beta", "lambda_sem": "lambda_sem",
                 "pool_size": "pool_size", "seed": "seed", "working_size": "working_size",
                 "spacing_mm": "spacing_mm"}
    for attr, key in overrides.items():
        val = getattr(args, attr, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def _load(manifest: str, root: str | None, domain: str, cfg: ToyConfig) -> D.Dataset:
    path = Path(manifest)
    ds = D.load_dataset(Path(root) if root else path.parent, path, domain, cfg.spacing_mm)
    return D.preprocess_dataset(ds, cfg.working_size)


def _splits(ds: D.Dataset, seed: int):
    return D.split(ds, (7, 1, 2), seed)


# --------------------------------------------------------------- commands

def cmd_make_phantoms(args) -> int:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"missing config file: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
    geo = {k: v for k, v in raw.items() if k in PHANTOM_KEYS}
    app = {}
    for dom in ("source", "target"):
        app[dom] = {k[len(dom) + 1:]: v for k, v in raw.items() if k.startswith(dom + "_")}
        bad = set(app[dom]) - APPEARANCE_KEYS
        if bad:
            raise UsageError(f"unknown {dom} appearance keys: {sorted(bad)}")
    unknown = set(raw) - PHANTOM_KEYS - {f"{d}_{k}" for d in app for k in app[d]}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else int(geo.pop("seed", 0))
    geo.pop("seed", None)
    n = {"source": int(geo.pop("n_source", 60)), "target": int(geo.pop("n_target", 50))}
    for k in ("half_width", "half_height"):
        if k in geo:
            geo[k] = tuple(geo[k])
    out = Path(args.out)
    counts = {}
    for i, dom in enumerate(("source", "target")):
        params = D.phantom_params(dom, 2 * seed + i, **geo)
        params.appearance = dataclasses.replace(params.appearance, **app[dom])
        ds = D.generate_phantoms(params, n[dom])
        D.save_dataset(ds, out / dom)
        counts[dom] = len(ds)
    print(f"wrote {counts['source']} source and {counts['target']} target phantoms "
          f"({params.working_size}px, seed {seed}) to {out}")
    return 0


def cmd_train_seg(args) -> int:
    cfg = _toy_config(args)
    if args.epochs is not None:
        cfg.seg_epochs = args.epochs
    _seed_everything(cfg.seed)
    src = _load(args.source, args.root, "source", cfg)
    train, val, _ = _splits(src, cfg.seed)
    model = build_segmenter(cfg.segmenter_config(), seed=cfg.seed)
    model, history = train_segmenter(model, train, val, cfg.train_options())
    dirs = _layout(Path(args.out))
    model.freeze()
    save_segmenter(model, dirs["checkpoints"] / "segmenter.pt")
    _write_jsonl(dirs["logs"] / "segmenter.jsonl", {"config": cfg.to_dict()}, history)
    best = max((h.get("val_dice", -1) for h in history), default=float("nan"))
    print(f"segmenter trained for {len(history)} epochs, best val Dice {best:.2f}")
    return 0


def cmd_train_uda(args) -> int:
    cfg = _toy_config(args)
    if args.epochs is not None:
        cfg.uda_epochs = args.epochs
    _seed_everything(cfg.seed)
    segmenter = load_segmenter(args.segmenter).freeze()
    src_train = _splits(_load(args.source, args.root, "source", cfg), cfg.seed)[0]
    tgt_train = _splits(_load(args.target, args.root, "target", cfg), cfg.seed)[0]
    state = cfg.build_adaptation()
    state, history = ad.train_adaptation(state, segmenter, src_train, tgt_train, cfg.uda_epochs)
    dirs = _layout(Path(args.out))
    name = "SeUDA" if cfg.lambda_sem > 0 else "CyUDA"
    ad.save_adaptation(state, dirs["checkpoints"] / "adaptation.pt")
    _write_jsonl(dirs["logs"] / "adaptation.jsonl",
                 {"method": name, "lambda_sem": cfg.lambda_sem, "config": cfg.to_dict()}, history)
    print(f"{name} adaptation trained for {len(history)} epochs")
    return 0


def cmd_transform(args) -> int:
    state = ad.load_adaptation(args.adaptation)
    cfg = _toy_config(args)
    tgt = _load(args.target, args.root, "target", cfg)
    if args.split != "all":
        tgt = _splits(tgt, cfg.seed)[("train", "val", "test").index(args.split)]
    dirs = _layout(Path(args.out))
    lines = []
    for case in tgt:
        out = ad.transform(state, case.image)
        D.write_image(dirs["transforms"] / f"{case.case_id}.png", out.pixels)
        row = [case.case_id, f"{case.case_id}.png"]
        if case.label is not None:
            D.write_mask(dirs["transforms"] / f"{case.case_id}_mask.png", case.label)
            row.append(f"{case.case_id}_mask.png")
        lines.append("\t".join(row))
    (dirs["transforms"] / "manifest.tsv").write_text("\n".join(lines) + "\n")
    print(f"transformed {len(tgt)} target images into {dirs['transforms']}")
    return 0


def cmd_predict(args) -> int:
    cfg = _toy_config(args)
    model = load_segmenter(args.segmenter).freeze()
    ds = _load(args.manifest, args.root, "target", cfg)
    if args.split != "all":
        ds = _splits(ds, cfg.seed)[("train", "val", "test").index(args.split)]
    images = ds.images
    if args.adaptation:
        state = ad.load_adaptation(args.adaptation)
        images = [ad.transform(state, im) for im in images]
    elif args.histogram:
        ref = load_histogram(args.histogram)
        images = [histogram_match(im, ref) for im in images]
    out = Path(args.out) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    for case, pred in zip(ds, predict_labels(model, images)):
        D.write_mask(out / f"{case.case_id}.png", pred)
    print(f"wrote {len(ds)} predictions to {out}")
    return 0


def cmd_histogram(args) -> int:
    cfg = _toy_config(args)
    train = _splits(_load(args.source, args.root, "source", cfg), cfg.seed)[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_histogram(build_reference_histogram(train), out)
    print(f"reference histogram of {len(train)} images written to {out}")
    return 0


def cmd_eval(args) -> int:
    gt_path = Path(args.gt)
    gt = D.load_dataset(Path(args.root) if args.root else gt_path.parent, gt_path)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"missing prediction directory: {pred_dir}")
    preds, gts, ids = [], [], []
    for case in gt:
        if case.label is None:
            raise UsageError(f"ground-truth case {case.case_id!r} has no mask")
        preds.append(D.read_mask(pred_dir / f"{case.case_id}.png"))
        gts.append(case.label)
        ids.append(case.case_id)
    report = evaluate(preds, gts, args.spacing_mm, args.setting, ids,
                      {"pred_dir": str(pred_dir), "gt": str(gt_path), "spacing_mm": args.spacing_mm})
    dirs = _layout(Path(args.out))
    report.save(dirs["reports"] / f"{args.setting}.jsonl")
    table = format_table([report])
    (dirs["reports"] / f"{args.setting}.txt").write_text(table)
    print(table, end="")
    return 0


def _real_data(args, cfg: ToyConfig) -> ToyData | None:
    if not args.source and not args.target:
        return None
    if not (args.source and args.target):
        raise UsageError("--source and --target must be given together")
    s_tr, s_va, s_te = _splits(_load(args.source, args.root, "source", cfg), cfg.seed)
    t_tr, _, t_te = _splits(_load(args.target, args.root, "target", cfg), cfg.seed)
    return ToyData(s_tr, s_va, s_te, t_tr, t_te)


def cmd_bench(args) -> int:
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    if not settings:
        raise UsageError("empty settings list")
    bad = [s for s in settings if s not in SETTINGS]
    if bad:
        raise UsageError(f"unknown settings {bad}; choose from {', '.join(SETTINGS)}")
    cfg = _toy_config(args)
    if args.epochs is not None:
        cfg.uda_epochs = args.epochs
    _seed_everything(cfg.seed)
    reports, _ = run_bench(cfg, settings, data=_real_data(args, cfg))
    dirs = _layout(Path(args.out))
    for name, rep in reports.items():
        rep.save(dirs["reports"] / f"{name}.jsonl")
    table = format_table(list(reports.values()))
    (dirs["reports"] / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_stability(args) -> int:
    if args.n_runs < 2:
        raise UsageError("--n-runs must be >= 2")
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    cfg = _toy_config(args)
    if args.epochs is not None:
        cfg.uda_epochs = args.epochs
    _seed_everything(cfg.seed)
    seeds = [int(s) for s in args.run_seeds.split(",")] if args.run_seeds else None
    result = stability_study(cfg, args.n_runs, lambdas, data=_real_data(args, cfg), seeds=seeds)
    dirs = _layout(Path(args.out))
    (dirs["reports"] / "stability.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    lines = [f"{'lambda':>8}{'Dice mean':>12}{'Dice std':>10}{'ASD mean':>10}{'ASD std':>10}"]
    for lam, r in result["lambda"].items():
        lines.append(f"{lam:>8}{r['dice_mean']:>12.2f}{r['dice_std']:>10.2f}"
                     f"{r['asd_mean']:>10.2f}{r['asd_std']:>10.2f}")
    table = "\n".join(lines) + "\n"
    (dirs["reports"] / "stability.txt").write_text(table)
    print(table, end="")
    return 0


# ------------------------------------------------------------------ parser

def _common(p, uda=False):
    p.add_argument("--config", help="flat YAML key/value config")
    p.add_argument("--seed", type=int)
    p.add_argument("--working-size", dest="working_size", type=int)
    p.add_argument("--spacing-mm", dest="spacing_mm", type=float)
    p.add_argument("--root", help="base directory for manifest paths (default: manifest dir)")
    p.add_argument("--epochs", type=int)
    if uda:
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--lambda-sem", dest="lambda_sem", type=float)
        p.add_argument("--pool-size", dest="pool_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seuda", description="Semantic-aware unsupervised domain adaptation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-phantoms", help="write synthetic source/target datasets")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("train-seg", help="train the source segmenter")
    _common(p)
    p.add_argument("--source", required=True, help="source manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-uda", help="train the target-to-source transformer")
    _common(p, uda=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_uda)

    p = sub.add_parser("transform", help="map target images to source appearance")
    _common(p)
    p.add_argument("--adaptation", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("predict", help="segment images, optionally after adaptation")
    _common(p)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--adaptation")
    g.add_argument("--histogram")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("histogram", help="store the pooled source-train reference histogram")
    _common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True, help="output text file (256 lines)")
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--root")
    p.add_argument("--spacing-mm", dest="spacing_mm", type=float, default=1.0)
    p.add_argument("--setting", choices=SETTINGS, default="S-test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("bench", cmd_bench, "run several evaluation settings"),
                              ("stability", cmd_stability, "repeat adaptation over seeds")):
        p = sub.add_parser(name, help=help_)
        _common(p, uda=True)
        p.add_argument("--source", help="optional real source manifest (default: phantoms)")
        p.add_argument("--target", help="optional real target manifest")
        p.add_argument("--out", required=True)
        if name == "bench":
            p.add_argument("--settings", default=",".join(SETTINGS))
        else:
            p.add_argument("--n-runs", dest="n_runs", type=int, default=5)
            p.add_argument("--lambdas", default="0,0.5")
            p.add_argument("--run-seeds", dest="run_seeds", help="comma-separated seed per run")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"seuda: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, UsageError, ValueError, OSError) as exc:
        print(f"seuda: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
