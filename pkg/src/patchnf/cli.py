"""Command-line front end: train, score, eval, synth, inspect.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Every command is deterministic given --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, DataError, NumericalError
from .pipeline import (
    evaluate,
    model_from_checkpoint,
    run_ablation,
    score_manifest,
    score_stack_file,
    train_from_manifest,
)
from .scoring import apply_threshold, write_pbm, write_pgm16
from .synth import SynthSpec, generate, load_synth_spec
from .tensor_io import load_checkpoint, load_manifest, read_tensor_sequence, save_checkpoint
from .training import save_loss_history


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are exit 1
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (RunConfig field names)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="worker threads across images")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="FIELD=VALUE",
        help="override any config field",
    )


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects FIELD=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return apply_overrides(cfg, overrides) if overrides else cfg.validate()


def cmd_train(args) -> int:
    cfg = _build_config(args)
    manifest = load_manifest(args.manifest)
    result = train_from_manifest(manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out)
    save_loss_history(result.history, out.parent / (out.stem + ".loss.csv"))
    print(f"checkpoint written to {out}")
    print(f"best epoch {result.best_epoch} loss {result.history[result.best_epoch][1]:.6f}")
    print(f"threshold ({cfg.threshold_policy}) = {result.threshold:.6f}")
    return 0


def cmd_score(args) -> int:
    ck = load_checkpoint(args.model)
    model, cfg = model_from_checkpoint(ck)
    if args.threads is not None:
        cfg.threads = args.threads
    threshold = ck.config.get("threshold")
    features = Path(args.features)
    if features.suffix == ".json":
        manifest = load_manifest(features)
        results = score_manifest(model, cfg, manifest, threshold)
    else:
        results = [score_stack_file(model, cfg, features, features.stem, threshold)]
    heatmap_dir = Path(args.heatmap_out) if args.heatmap_out else None
    if heatmap_dir:
        heatmap_dir.mkdir(parents=True, exist_ok=True)
    mask_dir = Path(args.mask_out) if args.mask_out else None
    if mask_dir:
        mask_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        sys.stdout.write(f"{r.image_id}\t{r.image_score!r}\n")
        if heatmap_dir:
            write_pgm16(r.map, heatmap_dir / f"{r.image_id}.pgm")
        if mask_dir:
            if threshold is None:
                raise ConfigError("checkpoint has no threshold; cannot emit masks")
            write_pbm(apply_threshold(r.map, threshold), mask_dir / f"{r.image_id}.pbm")
    return 0


def _parse_ablate(spec: str) -> tuple[str, list[int]]:
    if "=" not in spec:
        raise ConfigError(f"--ablate expects PARAM=LO..HI or PARAM=a,b,c, got {spec!r}")
    param, values = spec.split("=", 1)
    param = param.strip()
    if ".." in values:
        lo, hi = values.split("..", 1)
        parsed = list(range(int(lo), int(hi) + 1))
    else:
        parsed = [int(v) for v in values.split(",")]
    if not parsed:
        raise ConfigError(f"--ablate {spec!r} selects no values")
    return param, parsed


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.model)
    model, cfg = model_from_checkpoint(ck)
    if args.threads is not None:
        cfg.threads = args.threads
    manifest = load_manifest(args.manifest)
    threshold = ck.config.get("threshold")
    report = evaluate(model, cfg, manifest, threshold)

    if args.ablate:
        if not args.train_manifest:
            raise ConfigError("--ablate needs --train-manifest to retrain per row")
        train_manifest = load_manifest(args.train_manifest)
        report["ablation"] = {}
        for spec in args.ablate:
            param, values = _parse_ablate(spec)
            rows = run_ablation(train_manifest, manifest, cfg, param, values)
            report["ablation"][param] = rows
            print(f"ablation over {param}:")
            print(f"  {param:>10}  {'auroc':>8}  {'aupro':>8}")
            for row in rows:
                aupro_txt = "-" if row["aupro"] is None else f"{row['aupro']:.4f}"
                print(f"  {row[param]:>10}  {row['auroc']:>8.4f}  {aupro_txt:>8}")

    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    aupro_txt = "n/a" if report.get("aupro") is None else f"{report['aupro']:.4f}"
    print(f"auroc {report['auroc']:.4f}  aupro {aupro_txt}")
    return 0


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    train_manifest, test_manifest = generate(spec, args.out)
    print(f"train manifest: {train_manifest}")
    print(f"test manifest:  {test_manifest}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    head = path.open("rb").read(4)
    if head == b"PFCK":
        ck = load_checkpoint(path)
        print(f"checkpoint v{ck.format_version}, seed {ck.rng_seed}")
        print(f"config: {json.dumps(ck.config, sort_keys=True)}")
        for name in sorted(ck.tensors):
            t = ck.tensors[name]
            print(f"  {name}  {t.dtype}  {list(t.shape)}")
    elif head == b"PFTN":
        for i, t in enumerate(read_tensor_sequence(path)):
            print(f"  tensor {i}: {t.dtype} {list(t.shape)}")
    else:
        manifest = load_manifest(path)
        print(f"{manifest.split} manifest, {len(manifest.entries)} entries")
        for e in manifest.entries[:10]:
            mask = f" mask={e.mask_path}" if e.mask_path else ""
            print(f"  {e.image_id}  {e.label}  {e.feature_path}{mask}")
        if len(manifest.entries) > 10:
            print(f"  ... {len(manifest.entries) - 10} more")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchnf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow on a normal-only manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score feature stacks with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="manifest JSON or a .pftn stack")
    p.add_argument("--heatmap-out", help="directory for 16-bit PGM heatmaps")
    p.add_argument("--mask-out", help="directory for PBM masks (needs a threshold)")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="metrics JSON output path")
    p.add_argument("--ablate", action="append", default=[], metavar="PARAM=LO..HI")
    p.add_argument("--train-manifest", help="training manifest (required for --ablate)")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--spec", help="synth spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="describe a tensor, checkpoint, or manifest file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
