"""Command line entry point: ``refseg {gen,train,eval,ablate,params,plot}``.

Tabular results go to stdout as CSV; progress goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import TrainConfig, load_config, parse_grid_text
from .datamodel import BinaryMask, read_dataset, write_dataset
from .metrics import report
from .synthbench import dataset_header, generate
from .trainer import (
    GRID_COLUMNS, LAMBDA_GRID, MODULE_GRID, VARIANT_GRID, PreparedData, TrainState, ablation_grid,
    load_checkpoint, predict, read_grid_csv, save_checkpoint, train,
)

log = logging.getLogger("refseg")

PRESET_GRIDS = {"modules": MODULE_GRID, "variants": VARIANT_GRID, "lambda": LAMBDA_GRID}


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def _load_split(path: str, split: str):
    ds = read_dataset(path)
    examples = ds.split(split)
    if not examples:
        raise SystemExit(f"error: split {split!r} of {path} is empty")
    log.info("%s: %d examples in split %s", path, len(examples), split)
    return examples


def _config(path: Optional[str]) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    examples = generate(args.seed, args.n, args.nta_fraction, args.canvas, args.max_instances)
    header = dataset_header(args.seed, args.n, args.nta_fraction, args.canvas, args.max_instances)
    checksum = write_dataset(args.out, examples, header)
    w = _writer()
    w.writerow(["path", "n", "n_val", "n_nta_eligible", "sha256"])
    n_elig = sum(1 for ex in examples if ex.sibling_masks)
    w.writerow([args.out, len(examples), len(header["val_indices"]), n_elig, checksum])
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = PreparedData(_load_split(args.data, args.split))
    w = _writer()
    cols = ["epoch", "lr", "dis", "cpcl", "tccl", "total"]
    w.writerow(cols)
    state = load_checkpoint(args.resume) if args.resume else None
    state = train(cfg, data, state, dump_path=args.dump,
                  on_epoch=lambda row: (w.writerow([row[c] for c in cols]), sys.stdout.flush()))
    save_checkpoint(state, args.out)
    log.info("wrote %s", args.out)
    return 0


PREDS_FILE = "preds.jsonl"


def write_preds(pred_dir: str | Path, masks) -> Path:
    """One JSON line per example: index, height, width and the mask as RLE."""
    path = Path(pred_dir) / PREDS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for i, m in enumerate(masks):
            f.write(json.dumps({"index": i, "height": m.height, "width": m.width, "rle": m.to_rle()}) + "\n")
    return path


def read_preds(pred_dir: str | Path, n: int) -> list[BinaryMask]:
    path = Path(pred_dir) / PREDS_FILE
    masks: list[Optional[BinaryMask]] = [None] * n
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            rec = json.loads(line)
            i = rec["index"]
            if not 0 <= i < n or masks[i] is not None:
                raise SystemExit(f"error: {path}:{lineno}: bad or repeated index {i}")
            masks[i] = BinaryMask.from_rle(rec["rle"], rec["height"], rec["width"])
    missing = [i for i, m in enumerate(masks) if m is None]
    if missing:
        raise SystemExit(f"error: {path}: no prediction for {len(missing)} examples, first {missing[0]}")
    return masks


def cmd_eval(args) -> int:
    examples = _load_split(args.data, args.split)
    if args.pred_dir:
        preds = read_preds(args.pred_dir, len(examples))
    else:
        preds = predict(load_checkpoint(args.ckpt).model, PreparedData(examples))
    rep = report(preds, examples, with_nta=args.nta)
    rows = rep.rows() if args.nta else [r for r in rep.rows() if r[0] != "NTA-IoU"]
    w = _writer()
    w.writerow(["metric", "value", "n"])
    w.writerows(rows)
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as f:
            fw = csv.writer(f)
            fw.writerow(["metric", "value", "n"])
            fw.writerows(rows)
    if args.save_preds:
        log.info("wrote %s", write_preds(args.save_preds, preds))
    return 0


def load_grid(spec: str) -> list[tuple[str, dict]]:
    if spec in PRESET_GRIDS:
        return list(PRESET_GRIDS[spec])
    return parse_grid_text(Path(spec).read_text())


def expand_seeds(grid: Sequence[tuple[str, dict]], seeds: Optional[Sequence[int]]) -> list[tuple[str, dict]]:
    if not seeds:
        return list(grid)
    return [(name, {**delta, "train.seed": str(s)}) for s in seeds for name, delta in grid]


def cmd_ablate(args) -> int:
    base = _config(args.base_config)
    grid = expand_seeds(load_grid(args.grid), args.seeds)
    ds = read_dataset(args.data)
    train_data, eval_data = PreparedData(ds.split("train")), PreparedData(ds.split(args.eval_split))
    rows = ablation_grid(base, grid, train_data, eval_data, args.out_csv)
    w = _writer()
    w.writerow(GRID_COLUMNS)
    for r in rows:
        w.writerow([r.get(k, "") for k in GRID_COLUMNS])
    if args.plot_dir:
        from .plotting import plot_report

        for p in plot_report(read_grid_csv(args.out_csv), args.plot_dir):
            log.info("wrote %s", p)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_params(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
    else:
        model = TrainState.initial(_config(args.config)).model
    rep = model.param_report()
    w = _writer()
    w.writerow(["group", "count"])
    for k, v in rep.items():
        w.writerow([k, v])
    w.writerow(["frozen_to_tunable_ratio", f"{rep['frozen_total'] / max(rep['tunable_total'], 1):.2f}"])
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_report

    written = plot_report(read_grid_csv(args.csv), args.out_dir)
    w = _writer()
    w.writerow(["figure"])
    for p in written:
        w.writerow([str(p)])
    return 0 if written else 1


# ---------------------------------------------------------------- parser


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--nta-fraction", type=float, default=0.5)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--max-instances", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", "--dataset", dest="data", required=True)
    t.add_argument("--split", default="train", choices=["train", "val", "all"])
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--dump", help="where to write the diagnostic dump on divergence")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or stored predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="predict with this checkpoint")
    src.add_argument("--pred-dir", help=f"score stored predictions ({PREDS_FILE} from --save-preds)")
    e.add_argument("--data", "--dataset", dest="data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "all"])
    e.add_argument("--nta", action="store_true", help="also report NTA-IoU on the co-category subset")
    e.add_argument("--out-csv")
    e.add_argument("--save-preds", help=f"directory to write {PREDS_FILE} (RLE, one JSON per line)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    a.add_argument("--base-config")
    a.add_argument("--grid", required=True, help="grid file or preset: " + ", ".join(PRESET_GRIDS))
    a.add_argument("--data", "--dataset", dest="data", required=True)
    a.add_argument("--eval-split", default="val", choices=["train", "val", "all"])
    a.add_argument("--seeds", type=_seeds, help="comma-separated run seeds; repeats the grid per seed")
    a.add_argument("--out-csv", required=True)
    a.add_argument("--plot-dir", help="also render figures from the finished CSV")
    a.set_defaults(fn=cmd_ablate)

    q = sub.add_parser("params", help="frozen vs tunable parameter counts")
    src = q.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--config")
    q.set_defaults(fn=cmd_params)

    pl = sub.add_parser("plot", help="render figures from an ablation CSV")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out-dir", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads:
        torch.set_num_threads(args.threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
