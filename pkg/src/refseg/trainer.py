"""Training, evaluation, checkpoints and the ablation grid."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .config import TrainConfig
from .datamodel import BinaryMask, RISExample
from .metrics import MetricReport, report
from .model import RefSegModel
from .objective import dis_loss, predict_mask, total_loss
from .tlm import cpcl_loss, tccl_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RSEGCKPT"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, dump: dict):
        super().__init__(f"non-finite loss at epoch {dump['epoch']} step {dump['step']}: {dump['losses']}")
        self.dump = dump


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- data


class PreparedData:
    """Dataset tensors plus memoised frozen-encoder outputs.

    Text is encoded once per distinct token sequence; the frozen vision prefix
    is computed once per (encoder weights, first adapter layer).
    """

    def __init__(self, examples: Sequence[RISExample]):
        if not examples:
            raise ValueError("empty dataset")
        self.examples = list(examples)
        self.images = torch.from_numpy(np.stack([ex.image for ex in examples])).float()
        self.masks = torch.from_numpy(np.stack([ex.target_mask.bits for ex in examples]))
        texts: dict[tuple[int, ...], int] = {}
        for ex in examples:
            for t in (ex.positive_text, *ex.negative_texts):
                texts.setdefault(t, len(texts))
        self.tokens = torch.tensor(list(texts), dtype=torch.long)
        self.pos_idx = torch.tensor([texts[ex.positive_text] for ex in examples])
        kmax = max((len(ex.negative_texts) for ex in examples), default=0)
        neg = torch.full((len(examples), kmax), -1, dtype=torch.long)
        for i, ex in enumerate(examples):
            for k, t in enumerate(ex.negative_texts):
                neg[i, k] = texts[t]
        self.neg_idx = neg
        self._text: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self._prefix: dict[tuple, dict[int, torch.Tensor]] = {}

    def __len__(self) -> int:
        return len(self.examples)

    def text(self, model: RefSegModel) -> tuple[torch.Tensor, torch.Tensor]:
        key = model.text.fingerprint()
        if key not in self._text:
            feats, sents = [], []
            for chunk in self.tokens.split(256):
                f, s = model.encode_text(chunk)
                feats.append(f)
                sents.append(s)
            self._text[key] = (torch.cat(feats), torch.cat(sents))
        return self._text[key]

    def prefix(self, model: RefSegModel) -> dict[int, torch.Tensor]:
        key = (model.vision.fingerprint(), model.start_layer, tuple(model.cfg.tlm_cpcl_layers),
               model.vision.patch_w.dtype)
        if key not in self._prefix:
            parts = [model.frozen_prefix(chunk.to(model.vision.patch_w.dtype))
                     for chunk in self.images.split(256)]
            self._prefix[key] = {i: torch.cat([p[i] for p in parts]) for i in parts[0]}
        return self._prefix[key]


def as_prepared(data) -> PreparedData:
    return data if isinstance(data, PreparedData) else PreparedData(data)


def pick_negatives(batch: torch.Tensor, data: PreparedData, k: int,
                   rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Same-image negatives first, topped up to ``k`` with positive texts of
    other batch members. Returns text indices [B, k] and a validity mask."""
    idx = torch.zeros((len(batch), k), dtype=torch.long)
    mask = torch.zeros((len(batch), k), dtype=torch.bool)
    if k == 0:
        return idx, mask
    pos = data.pos_idx[batch].tolist()
    for b, i in enumerate(batch.tolist()):
        own = [n for n in data.neg_idx[i].tolist() if n >= 0][:k]
        pool = sorted({p for p in pos if p != pos[b] and p not in own})
        if len(own) < k and pool:
            extra = rng.permutation(len(pool))[: k - len(own)]
            own += [pool[j] for j in extra]
        idx[b, : len(own)] = torch.tensor(own, dtype=torch.long)
        mask[b, : len(own)] = True
    return idx, mask


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    config: TrainConfig
    model: RefSegModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    rng: np.random.Generator = None  # type: ignore[assignment]
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "TrainState":
        model = RefSegModel(cfg).float()
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, foreach=True)
        return cls(cfg, model, opt, 0, np.random.default_rng(cfg.seed))

    def lr_at(self, epoch: int) -> float:
        lr = self.config.learning_rate
        return lr * self.config.lr_decay_factor if epoch >= self.config.decay_epoch else lr


def batch_losses(model: RefSegModel, data: PreparedData, batch: torch.Tensor, cfg: TrainConfig,
                 rng: Optional[np.random.Generator] = None) -> dict[str, torch.Tensor]:
    feats, sents = data.text(model)
    prefix = {i: v[batch] for i, v in data.prefix(model).items()}
    pos = data.pos_idx[batch]
    tokens = data.tokens[pos]
    out = model(prefix, feats[pos], sents[pos], data.images[batch], tokens == 0)
    dis = dis_loss(out.seg, data.masks[batch]).mean()
    zero = dis.new_zeros(())
    cpcl = cpcl_loss([out.layers[i] for i in cfg.tlm_cpcl_layers], out.sentence).mean() if cfg.use_cpcl else zero
    if cfg.use_tccl:
        nidx, nmask = pick_negatives(batch, data, cfg.tlm_k_negatives, rng or np.random.default_rng(0))
        negs = model.sentence_proj(sents[nidx])
        tccl = tccl_loss(out.prototype, out.sentence, negs, nmask).mean()
    else:
        tccl = zero
    total = total_loss(dis, cpcl, tccl, cfg.weights)
    return {"dis": dis, "cpcl": cpcl, "tccl": tccl, "total": total}


def train(cfg: TrainConfig, data, state: Optional[TrainState] = None,
          epochs: Optional[int] = None, dump_path: Optional[str | Path] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Optimise the total objective over the tunable parameters.

    Resumes from ``state`` when given and runs until ``cfg.epochs`` (or for
    ``epochs`` more epochs). Each epoch appends ``{epoch, lr, dis, cpcl,
    tccl, total}`` (batch-size weighted means) to ``state.history``.
    """
    data = as_prepared(data)
    state = state or TrainState.initial(cfg)
    model, opt = state.model, state.optimizer
    end = cfg.epochs if epochs is None else state.epoch + epochs
    n = len(data)
    while state.epoch < end:
        lr = state.lr_at(state.epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = torch.from_numpy(state.rng.permutation(n))
        sums = {"dis": 0.0, "cpcl": 0.0, "tccl": 0.0, "total": 0.0}
        for step, batch in enumerate(order.split(cfg.batch_size)):
            losses = batch_losses(model, data, batch, cfg, state.rng)
            if not torch.isfinite(losses["total"]):
                dump = {"epoch": state.epoch, "step": step, "batch": batch.tolist(),
                        "losses": {k: float(v.detach()) for k, v in losses.items()}}
                if dump_path:
                    Path(dump_path).write_text(json.dumps(dump, indent=2))
                raise TrainingDiverged(dump)
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            for k in sums:
                sums[k] += float(losses[k].detach()) * len(batch)
        row = {"epoch": state.epoch + 1, "lr": lr, **{k: v / n for k, v in sums.items()}}
        state.history.append(row)
        state.epoch += 1
        log.info("epoch %d  lr %.2e  dis %.4f  cpcl %.4f  tccl %.4f  total %.4f", row["epoch"], lr,
                 row["dis"], row["cpcl"], row["tccl"], row["total"])
        if on_epoch:
            on_epoch(row)
    return state


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model: RefSegModel, data, batch_size: int = 64, threshold: Optional[float] = None
            ) -> list[BinaryMask]:
    """Masks from the positive expression only; negatives are never read."""
    data = as_prepared(data)
    thr = model.cfg.predict_threshold if threshold is None else threshold
    model.eval()
    feats, sents = data.text(model)
    prefix_all = data.prefix(model)
    out_masks = []
    for batch in torch.arange(len(data)).split(batch_size):
        pos = data.pos_idx[batch]
        out = model({i: v[batch] for i, v in prefix_all.items()}, feats[pos], sents[pos],
                    data.images[batch], data.tokens[pos] == 0)
        for m in predict_mask(out.seg, thr):
            out_masks.append(BinaryMask(m.numpy()))
    return out_masks


def evaluate(state_or_model, data, with_nta: bool = True) -> MetricReport:
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    data = as_prepared(data)
    preds = predict(model, data)
    return report(preds, data.examples, with_nta)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "config": json.dumps(state.config.to_flat()),
        "params": {k: v.detach().clone() for k, v in state.model.named_parameters()},
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "rng": json.dumps(state.rng.bit_generator.state),
        "history": json.dumps(state.history),
        "frozen_checksums": json.dumps(state.model.frozen_checksums()),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(buf.getvalue())


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[len(CKPT_MAGIC): len(CKPT_MAGIC) + 4])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload = torch.load(io.BytesIO(raw[len(CKPT_MAGIC) + 4:]), weights_only=True)
    cfg = TrainConfig().with_overrides(json.loads(payload["config"]))
    state = TrainState.initial(cfg)
    if state.model.frozen_checksums() != json.loads(payload["frozen_checksums"]):
        raise CheckpointError(f"{path}: frozen encoder weights do not match the checkpoint")
    missing = set(dict(state.model.named_parameters())) ^ set(payload["params"])
    if missing:
        raise CheckpointError(f"{path}: parameter table mismatch: {sorted(missing)}")
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            p.copy_(payload["params"][name])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = int(payload["epoch"])
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = json.loads(payload["rng"])
    state.history = json.loads(payload["history"])
    return state


# ---------------------------------------------------------------- ablation grid

GRID_COLUMNS = ["cell", "seed", "use_rca", "use_cpcl", "use_tccl", "variant", "lambda_cpcl",
                "lambda_tccl", "mIoU", "oIoU", "NTA-IoU", "n_nta", "Pr@0.5", "Pr@0.7", "Pr@0.9",
                "final_total", "runtime_s", "status"]

# the incremental module grid: baseline, +adapters, +consistency, +contrastive, full
MODULE_GRID = [
    ("baseline", {"use_rca": False, "use_cpcl": False, "use_tccl": False}),
    ("rca", {"use_rca": True, "use_cpcl": False, "use_tccl": False}),
    ("rca+cpcl", {"use_rca": True, "use_cpcl": True, "use_tccl": False}),
    ("rca+tccl", {"use_rca": True, "use_cpcl": False, "use_tccl": True}),
    ("full", {"use_rca": True, "use_cpcl": True, "use_tccl": True}),
]
VARIANT_GRID = [(f"#{i}", {"rca_variant": str(i)}) for i in range(1, 7)]
LAMBDA_GRID = [
    (f"l{c}_{t}", {"lambda_cpcl": c, "lambda_tccl": t})
    for c, t in [(0.3, 0.1), (0.2, 0.2), (0.2, 0.1), (0.1, 0.3), (0.1, 0.2), (0.1, 0.1),
                 (0.1, 0.0), (0.0, 0.1), (0.0, 0.0)]
]


def run_cell(cfg: TrainConfig, train_data, eval_data) -> tuple[TrainState, MetricReport]:
    state = train(cfg, train_data)
    return state, evaluate(state, eval_data, with_nta=True)


def ablation_grid(base: TrainConfig, grid: Iterable[tuple[str, dict]], train_data, eval_data,
                  out_csv: Optional[str | Path] = None) -> list[dict]:
    """Train and evaluate one model per cell; a failing cell is recorded and
    the grid continues. Rows are appended to ``out_csv`` as they finish."""
    train_data, eval_data = as_prepared(train_data), as_prepared(eval_data)
    rows = []
    fh = None
    if out_csv:
        fh = open(out_csv, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        writer.writeheader()
    try:
        for name, delta in grid:
            t0 = time.perf_counter()
            row = {"cell": name}
            try:
                cfg = base.with_overrides(delta)
                row.update(seed=cfg.seed, use_rca=cfg.use_rca, use_cpcl=cfg.use_cpcl,
                           use_tccl=cfg.use_tccl, variant=cfg.rca_variant,
                           lambda_cpcl=cfg.lambda_cpcl, lambda_tccl=cfg.lambda_tccl)
                state, rep = run_cell(cfg, train_data, eval_data)
                row.update({
                    "mIoU": rep.miou, "oIoU": rep.oiou,
                    "NTA-IoU": "n/a" if rep.nta_iou is None else rep.nta_iou,
                    "n_nta": rep.n_nta_defined,
                    **{f"Pr@{x:g}": v for x, v in rep.prec_at.items()},
                    "final_total": state.history[-1]["total"] if state.history else math.nan,
                    "status": "ok",
                })
            except Exception as e:  # noqa: BLE001 -- recorded per cell
                log.exception("grid cell %s failed", name)
                row["status"] = f"error: {type(e).__name__}: {e}"
            row["runtime_s"] = round(time.perf_counter() - t0, 2)
            log.info("cell %s: %s", name, {k: row.get(k) for k in ("mIoU", "NTA-IoU", "runtime_s", "status")})
            rows.append(row)
            if fh:
                writer.writerow({k: row.get(k, "") for k in GRID_COLUMNS})
                fh.flush()
    finally:
        if fh:
            fh.close()
    return rows


def read_grid_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
