"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import gen_synthetic, load_dataset, load_image
from .errors import ConfigError, CxrNetError
from .model import assemble, count_flops, load_weights
from .regnet import REGNET_X002, RegNetSpec, generate_widths
from .train import TrainConfig, evaluate, fit, predict_proba

WEIGHTS_FILE = "weights.bin"
LOG_FILE = "train_log.csv"
RUN_FILE = "run.json"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxrnet", description="RegNetX002 + ConvLSTM + SE classifier workbench")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="per-layer parameter and FLOP report as CSV")
    a.add_argument("--model", choices=("proposed", "baseline"), default="proposed")
    a.add_argument("--input-size", type=int, default=224)
    a.add_argument("--classes", type=int, default=3)
    a.add_argument("--out", help="write the CSV here instead of stdout")

    w = sub.add_parser("widths", help="print the RegNet width plan")
    w.add_argument("--d", type=int, default=REGNET_X002.d)
    w.add_argument("--w0", type=int, default=REGNET_X002.w0)
    w.add_argument("--wa", type=float, default=REGNET_X002.wa)
    w.add_argument("--wm", type=float, default=REGNET_X002.wm)
    w.add_argument("--b", type=int, default=REGNET_X002.b)
    w.add_argument("--g", type=int, default=REGNET_X002.g)

    s = sub.add_parser("gen-synthetic", help="write a synthetic grating dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=3)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="run directory for weights, log and run metadata")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--root", help="image root (default: manifest directory)")
    t.add_argument("--model", choices=("proposed", "baseline"), default="proposed")
    t.add_argument("--input-size", type=int, default=224)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)

    e = sub.add_parser("eval", help="write confusion, metrics and ROC CSVs")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--root")

    r = sub.add_parser("predict", help="print class probabilities for one image")
    r.add_argument("--run", required=True)
    r.add_argument("--image", required=True)
    return p


def _train_config(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {"seed": args.seed, "epochs": args.epochs, "learning_rate": args.lr,
                 "batch_size": args.batch_size}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / RUN_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run metadata in {run_dir}: {exc}") from exc
    g = assemble(meta["model"], meta["input_size"], len(meta["classes"]))
    load_weights(g, run_dir / WEIGHTS_FILE)
    g.eval()
    return g, meta


def cmd_analyze(args) -> None:
    g = assemble(args.model, args.input_size, args.classes)
    text = count_flops(g).to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_widths(args) -> None:
    plan = generate_widths(RegNetSpec(d=args.d, w0=args.w0, wa=args.wa, wm=args.wm, b=args.b, g=args.g))
    print("j,u_j,s_j,w_j,stage")
    for j, (u, s, w, st) in enumerate(zip(plan.u, plan.s, plan.w, plan.stage_ids())):
        print(f"{j},{u:.4f},{s:.4f},{w},{st}")
    print(f"# stages={len(plan.stages)} widths={','.join(map(str, plan.stage_widths))} "
          f"depths={','.join(map(str, plan.stage_depths))}")


def cmd_gen_synthetic(args) -> None:
    manifest = gen_synthetic(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {len(manifest.rows)} images and {Path(args.out) / 'manifest.csv'}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    x, y, vocab = load_dataset(args.manifest, args.root, size=args.input_size)
    g = assemble(args.model, args.input_size, len(vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = fit(g, (x, y), cfg, weights_path=out / WEIGHTS_FILE, log_path=out / LOG_FILE)
    meta = {"model": args.model, "input_size": args.input_size, "classes": vocab, "config": cfg.to_dict()}
    (out / RUN_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    last = log.records[-1]
    print(f"epochs={last.epoch} loss={last.loss:.6g} train_accuracy={last.train_accuracy:.4f}")


def cmd_eval(args) -> None:
    g, meta = _load_run(args.run)
    x, y, vocab = load_dataset(args.manifest, args.root, size=meta["input_size"], classes=meta["classes"])
    report = evaluate(g, (x, y), vocab)
    report.write_csv(args.out)
    m = report.metrics
    print(f"accuracy={m.accuracy:.4f} macro_precision={m.macro_precision:.4f} "
          f"macro_recall={m.macro_recall:.4f} macro_f1={m.macro_f1:.4f}")


def cmd_predict(args) -> None:
    g, meta = _load_run(args.run)
    img = load_image(args.image, meta["input_size"])
    probs = predict_proba(g, img[np.newaxis])[0]
    for name, p in zip(meta["classes"], probs):
        print(f"{name},{p:.6f}")


COMMANDS = {"analyze": cmd_analyze, "widths": cmd_widths, "gen-synthetic": cmd_gen_synthetic,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except (CxrNetError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
