"""Command-line entry point: ``glus <verb> [options] [key=value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print a single tab-separated line ``error<TAB>verb<TAB>kind<TAB>message``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C

log = logging.getLogger("glus")

USAGE_ERROR, RUNTIME_ERROR = 2, 1

VERBS = {
    "generate": "write a synthetic referring-video corpus",
    "train": "train a segmenter; checkpoints under the run directory",
    "infer": "segment every expression of a corpus",
    "eval": "score a predictions directory against a corpus",
    "annotate": "pseudo-label frames with an early checkpoint's IoU",
    "train-selector": "fit the key-frame selector on pseudo-labels",
    "ablate": "run the ablation rows, stride sweep and selector comparison",
}


class UsageError(Exception):
    pass


def _keys_epilog(verb: str) -> str:
    keys = C.keys_for(verb)
    if not keys:
        return "config keys: none"
    width = max(len(k) for k in keys)
    lines = ["config keys (file or key=value override):"]
    lines += [f"  {k:<{width}}  {C.KEYS[k].help} [default: {C.format_value(C.KEYS[k].default)}]" for k in keys]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glus", description="Global-local referring video segmentation on a synthetic corpus.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    for verb, help_text in VERBS.items():
        p = sub.add_parser(verb, help=help_text, description=help_text, epilog=_keys_epilog(verb), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
        p.add_argument("--config", type=Path, help="flat key = value file")
        p.add_argument("--out", type=Path, required=True, help="output directory (or file for annotate)")
        if verb in ("train", "infer", "eval", "annotate", "train-selector"):
            p.add_argument("--data", type=Path, required=True, help="corpus directory written by 'generate'")
        if verb in ("infer", "annotate"):
            p.add_argument("--checkpoint", type=Path, required=True, help="segmenter checkpoint file or step directory")
        if verb == "infer":
            p.add_argument("--use-selector", action="store_true", help="key-frame selection with bidirectional propagation")
            p.add_argument("--selector", type=Path, help="selector checkpoint (required with --use-selector)")
            p.add_argument("--stride", type=int, help="memory stride (overrides memory.infer_stride)")
        if verb == "eval":
            p.add_argument("--predictions", type=Path, required=True, help="predictions directory written by 'infer'")
        if verb == "train-selector":
            p.add_argument("--labels", type=Path, required=True, help="pseudo-label file written by 'annotate'")
        if verb == "generate":
            p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if verb == "ablate":
            p.add_argument("--no-selector", action="store_true", help="skip the key-frame selection row")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    return parser


def _load_config(args) -> C.Config:
    cfg = C.load(args.config, args.overrides)
    unused = sorted(set(cfg) - set(C.keys_for(args.verb)))
    if unused:
        log.warning("%s ignores config key(s) %s", args.verb, ", ".join(unused))
    return cfg


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args, cfg: C.Config) -> None:
    from .dataset import generate_world, write_dataset

    ds = generate_world(C.world_config(cfg))
    write_dataset(ds, args.out, force=args.force)
    print(f"videos\t{len(ds.videos)}\tsamples\t{len(ds.samples)}\tpath\t{args.out}")


def cmd_train(args, cfg: C.Config) -> None:
    import torch

    from .dataset import load_dataset
    from .model import Segmenter
    from .trainer import train

    ds = load_dataset(args.data)
    tc = C.train_config(cfg)
    torch.manual_seed(tc.seed)
    model = Segmenter(C.model_config(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(C.dump(cfg))
    result = train(ds, model, tc, C.loss_weights(cfg), args.out)
    last = result.losses[-1]
    print(f"steps\t{tc.steps}\tloss\t{last['total']:.6f}\tcheckpoint\t{result.checkpoints[tc.steps]}")


def cmd_infer(args, cfg: C.Config) -> None:
    from .dataset import load_dataset
    from .trainer import infer, load_checkpoint

    use_selector = args.use_selector or cfg["infer.use_selector"]
    if use_selector and not args.selector:
        raise UsageError("--use-selector needs --selector PATH")
    model, tc = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    opts = C.infer_options(cfg, **({"stride": args.stride} if args.stride else {}))
    selector = None
    if use_selector:
        from .selector import load_selector

        selector = load_selector(args.selector)
    infer(model, ds, args.out, tc, opts, selector)
    print(f"samples\t{len(ds.samples)}\tpath\t{args.out}")


def cmd_eval(args, cfg: C.Config) -> None:
    from .dataset import load_dataset
    from .metrics import evaluate_dataset
    from .report import format_table

    ds = load_dataset(args.data)
    rep = evaluate_dataset(args.predictions, ds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1))
    per_sample = [{"sample": k, "J": j, "F": f, "J&F": (j + f) / 2} for k, (j, f) in sorted(rep.per_sample.items())]
    (args.out / "per_sample.tsv").write_text(format_table(per_sample, ["sample", "J", "F", "J&F"]))
    table = format_table([{"dataset": args.data.name or str(args.data), **rep.row()}], ["dataset", "J", "F", "J&F"])
    (args.out / "metrics.tsv").write_text(table)
    sys.stdout.write(table)


def cmd_annotate(args, cfg: C.Config) -> None:
    from .dataset import load_dataset
    from .selector import annotate_pseudo_labels, write_labels
    from .trainer import load_checkpoint

    model, tc = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    labels = annotate_pseudo_labels(model, ds, cfg["selector.fraction"], tc, C.infer_options(cfg))
    path = args.out if args.out.suffix else args.out / "pseudo_labels.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_labels(labels, path)
    print(f"labels\t{len(labels)}\tpath\t{path}")


def cmd_train_selector(args, cfg: C.Config) -> None:
    from .dataset import load_dataset
    from .selector import read_labels, save_selector, train_selector

    ds = load_dataset(args.data)
    labels = read_labels(args.labels)
    sel, history = train_selector(ds, labels, C.selector_config(cfg))
    path = save_selector(args.out, sel)
    print(f"steps\t{len(history)}\tloss\t{history[-1]['loss']:.6f}\tcheckpoint\t{path}")


def cmd_ablate(args, cfg: C.Config) -> None:
    from .ablation import run_ablation

    run_ablation(cfg, args.out, with_selector=not args.no_selector)
    sys.stdout.write((args.out / "report.txt").read_text())


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "annotate": cmd_annotate,
    "train-selector": cmd_train_selector,
    "ablate": cmd_ablate,
}


def _fail(verb: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error\t{verb}\t{type(exc).__name__}\t{msg}", file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except (C.ConfigParseError, OSError) as exc:
        return _fail(args.verb, exc, USAGE_ERROR)
    try:
        COMMANDS[args.verb](args, cfg)
    except UsageError as exc:
        return _fail(args.verb, exc, USAGE_ERROR)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        log.debug("failure", exc_info=True)
        return _fail(args.verb, exc, RUNTIME_ERROR)
    return 0


def main() -> None:
    sys.exit(run())
