"""Training, evaluation, ablation, and export drivers.

A run directory accumulates:
    config.resolved      the exact configuration used
    train_log.csv        step, loss columns (deterministic bytes)
    timing.csv           step, seconds (wall time lives apart from the
                         deterministic log so reruns stay byte-identical)
    checkpoint.awmb      final parameters
    metrics.csv          per-sample rows plus the pixel-pooled aggregate
    maps/*.ppm           colored change maps (white/black/green/red for
                         TP/TN/FP/FN)
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import data as D
from . import losses
from . import metrics as M
from . import nn
from . import tensor as T
from .checkpoint import load_into_model, save_checkpoint
from .config import RunConfig, config_hash, save_config
from .networks import BCDNet, SCDNet
from .optim import AdamW


class TrainingDiverged(RuntimeError):
    pass


def build_model(cfg: RunConfig):
    kw = dict(widths=cfg.widths, depths=cfg.depths, decoder_width=cfg.decoder_width,
              strategy=cfg.scan_strategy, rates=cfg.rates, window_mode=cfg.window_mode,
              state_dim=cfg.state_dim, merge_mode=cfg.merge_mode, zoh_mode=cfg.zoh_mode)
    if cfg.task == "bcd":
        model = BCDNet(**kw)
    else:
        model = SCDNet(num_classes=cfg.num_classes, **kw)
    nn.init_model(model, cfg.seed)
    return model


def synthetic_spec(cfg: RunConfig) -> D.SyntheticSpec:
    return D.SyntheticSpec(height=cfg.image_size, width=cfg.image_size,
                           train=cfg.train_count, val=cfg.val_count, test=cfg.test_count,
                           seed=cfg.seed, num_classes=cfg.num_classes, noise=cfg.noise)


def _batch(cfg: RunConfig, ds: D.Dataset, idx: np.ndarray, rng: np.random.Generator):
    dt = T.default_dtype()
    b1 = ds.img1[idx].astype(dt) / 255.0
    b2 = ds.img2[idx].astype(dt) / 255.0
    m = ds.mask[idx].astype(dt)
    s1 = ds.sem1[idx].astype(np.int64)
    s2 = ds.sem2[idx].astype(np.int64)
    for j in range(len(idx)):
        k = int(rng.integers(0, 4)) if cfg.aug_rotate90 else 0
        fl = bool(rng.integers(0, 2)) if cfg.aug_flip_lr else False
        ft = bool(rng.integers(0, 2)) if cfg.aug_flip_tb else False
        b1[j], b2[j], m[j], s1[j], s2[j] = D.augment_sample([b1[j], b2[j], m[j], s1[j], s2[j]], k, fl, ft)
    return b1, b2, m, s1, s2


def _loss_for_batch(cfg: RunConfig, model, b1, b2, mask, sem1, sem2):
    """Returns (total loss tensor, component dict)."""
    x1, x2 = T.Tensor(b1), T.Tensor(b2)
    if cfg.task == "bcd":
        logits = model(x1, x2)
        loss = losses.bce_loss(T.sigmoid(logits), mask[..., None])
        return loss, {"loss": float(loss.data)}
    cd, s1_logits, s2_logits = model(x1, x2)
    l_cd = losses.bce_loss(T.sigmoid(cd), mask[..., None])
    p1 = T.softmax(s1_logits)
    p2 = T.softmax(s2_logits)
    l_sc = losses.semantic_consistency_loss(p1, p2, mask, mode=cfg.cos_mode)
    l_ss1 = losses.ce_loss(p1, sem1)
    l_ss2 = losses.ce_loss(p2, sem2)
    loss = losses.total_scd_loss(l_cd, l_sc, l_ss1, l_ss2,
                                 (cfg.lambda_cd, cfg.lambda_sc, cfg.lambda_ss))
    return loss, {
        "loss": float(loss.data),
        "loss_cd": float(l_cd.data),
        "loss_sc": float(l_sc.data),
        "loss_ss1": float(l_ss1.data),
        "loss_ss2": float(l_ss2.data),
    }


def train(cfg: RunConfig, log=print) -> str:
    """Run the step loop; returns the checkpoint path."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.resolved"))
    ds = D.load_split(cfg.data_dir, "train")
    model = build_model(cfg)
    opt = AdamW(list(model.named_parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])

    columns = ["step", "loss"] if cfg.task == "bcd" else \
        ["step", "loss", "loss_cd", "loss_sc", "loss_ss1", "loss_ss2"]
    log_rows = [",".join(columns)]
    timing_rows = ["step,seconds"]
    t_start = time.time()
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(ds), cfg.batch_size)
        b1, b2, mask, sem1, sem2 = _batch(cfg, ds, idx, rng)
        loss, parts = _loss_for_batch(cfg, model, b1, b2, mask, sem1, sem2)
        if not np.isfinite(parts["loss"]):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        opt.zero_grad()
        log_rows.append(",".join([str(step)] + [f"{parts[c]:.8f}" for c in columns[1:]]))
        timing_rows.append(f"{step},{time.time() - t_start:.3f}")
        if step % 100 == 0 or step == cfg.steps:
            log(f"step {step}/{cfg.steps} loss={parts['loss']:.4f}")

    with open(os.path.join(cfg.out_dir, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_rows) + "\n")
    with open(os.path.join(cfg.out_dir, "timing.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(timing_rows) + "\n")
    ckpt = os.path.join(cfg.out_dir, "checkpoint.awmb")
    save_checkpoint(ckpt, model.named_parameters())
    return ckpt


def _predict_bcd(model, b1, b2) -> np.ndarray:
    logits = model(T.Tensor(b1), T.Tensor(b2))
    prob = T.sigmoid(logits).data[..., 0]
    return (prob > 0.5).astype(np.uint8)  # ties at exactly 0.5 fall to class 0


def _predict_scd(model, b1, b2):
    cd, s1_logits, s2_logits = model(T.Tensor(b1), T.Tensor(b2))
    change = (T.sigmoid(cd).data[..., 0] > 0.5).astype(np.uint8)
    # semantic class among change covers only; the CD head gates where it applies
    c1 = np.argmax(s1_logits.data[..., 1:], axis=-1).astype(np.uint8) + 1
    c2 = np.argmax(s2_logits.data[..., 1:], axis=-1).astype(np.uint8) + 1
    return change, np.where(change == 1, c1, 0).astype(np.uint8), np.where(change == 1, c2, 0).astype(np.uint8)


def _change_map_rgb(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """White/black/green/red for TP/TN/FP/FN."""
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[(pred == 1) & (gt == 1)] = (255, 255, 255)
    out[(pred == 1) & (gt == 0)] = (0, 255, 0)
    out[(pred == 0) & (gt == 1)] = (255, 0, 0)
    return out


def evaluate(cfg: RunConfig, checkpoint: str, split: str = "test", run_id: str = "run",
             export_maps: bool = True, log=print) -> dict:
    """Write per-sample and pixel-pooled metrics; returns the pooled row."""
    ds = D.load_split(cfg.data_dir, split)
    model = build_model(cfg)
    load_into_model(checkpoint, model)
    os.makedirs(cfg.out_dir, exist_ok=True)
    maps_dir = os.path.join(cfg.out_dir, "maps")
    if export_maps:
        os.makedirs(maps_dir, exist_ok=True)

    dt = T.default_dtype()
    rows = [M.CSV_HEADER]
    pooled_binary = M.ConfusionMatrix(2)
    pooled_sem = M.ConfusionMatrix(cfg.num_classes)
    per_image = []
    bs = cfg.batch_size
    for start in range(0, len(ds), bs):
        sl = slice(start, min(start + bs, len(ds)))
        b1 = ds.img1[sl].astype(dt) / 255.0
        b2 = ds.img2[sl].astype(dt) / 255.0
        gt = ds.mask[sl]
        if cfg.task == "bcd":
            pred = _predict_bcd(model, b1, b2)
        else:
            pred, psem1, psem2 = _predict_scd(model, b1, b2)
        for j in range(pred.shape[0]):
            i = start + j
            vals = M.binary_metrics(pred[j], gt[j])
            pooled_binary.add(pred[j], gt[j])
            if cfg.task == "scd":
                pooled_sem.add(psem1[j], ds.sem1[sl][j])
                pooled_sem.add(psem2[j], ds.sem2[sl][j])
            per_image.append(vals)
            rows.append(M.metrics_csv_row(run_id, f"{split}[{i}]", vals))
            if export_maps:
                D.write_ppm(os.path.join(maps_dir, f"{split}_{i:04d}_change.ppm"),
                            _change_map_rgb(pred[j], gt[j]))

    tp, fp = int(pooled_binary.q[1, 1]), int(pooled_binary.q[1, 0])
    fn, tn = int(pooled_binary.q[0, 1]), int(pooled_binary.q[0, 0])
    pooled = M.binary_metrics_from_counts(tp, fp, tn, fn)
    if cfg.task == "scd":
        sem = M.scd_metrics_from_confusion(pooled_sem, cfg.sek_eta)
        pooled.update({"mIoU": sem["mIoU"], "SeK": sem["SeK"], "OA": sem["OA"]})
        pooled["flags"] = sorted(set(pooled["flags"]) | set(sem["flags"]))
    else:
        bin_for_miou = M.scd_metrics_from_confusion(
            M.ConfusionMatrix(2, pooled_binary.q), cfg.sek_eta)
        pooled["mIoU"] = bin_for_miou["mIoU"]
    # mean of per-image metrics logged alongside the pooled (reported) row
    mean_row = {k: float(np.mean([v[k] for v in per_image])) for k in ("OA", "IoU", "Prec", "Rec", "F1")}
    mean_row["flags"] = ["per_image_mean"]
    rows.append(M.metrics_csv_row(run_id, f"{split}:mean", mean_row))
    rows.append(M.metrics_csv_row(run_id, f"{split}:pooled", pooled))
    with open(os.path.join(cfg.out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    log(f"{split} pooled: " + " ".join(f"{k}={pooled[k]:.4f}" for k in ("OA", "IoU", "F1") if k in pooled))
    return pooled


def ablate(cfg: RunConfig, log=print) -> str:
    """Twin runs differing only in the scan strategy; side-by-side CSV."""
    from dataclasses import replace

    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = os.path.join(cfg.data_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    manifest_sha = D._sha256(manifest)

    header = ("strategy,config_hash,base_config_hash,manifest_sha256,"
              "loss_first50_mean,loss_last50_mean,OA,IoU,Prec,Rec,F1,mIoU,SeK,flags")
    lines = [header]
    timing_lines = ["strategy,train_seconds,eval_seconds"]
    for strategy in ("atrous", "csm"):
        sub = replace(cfg, scan_strategy=strategy,
                      out_dir=os.path.join(cfg.out_dir, strategy))
        log(f"[ablate] training {strategy}")
        t0 = time.time()
        ckpt = train(sub, log=log)
        t1 = time.time()
        pooled = evaluate(sub, ckpt, run_id=f"ablate-{strategy}", export_maps=False, log=log)
        timing_lines.append(f"{strategy},{t1 - t0:.3f},{time.time() - t1:.3f}")
        steps, loss_col = _read_train_log(os.path.join(sub.out_dir, "train_log.csv"))
        first50 = float(np.mean(loss_col[:50]))
        last50 = float(np.mean(loss_col[-50:]))
        vals = [strategy, config_hash(sub), config_hash(sub, exclude=("scan_strategy", "out_dir")),
                manifest_sha, f"{first50:.8f}", f"{last50:.8f}"]
        for key in ("OA", "IoU", "Prec", "Rec", "F1", "mIoU", "SeK"):
            v = pooled.get(key)
            vals.append("" if v is None else f"{v:.10f}")
        vals.append(";".join(pooled.get("flags", [])))
        lines.append(",".join(vals))
    report = os.path.join(cfg.out_dir, "ablation.csv")
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    # wall clock lives outside the deterministic report
    with open(os.path.join(cfg.out_dir, "ablation_timing.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(timing_lines) + "\n")
    return report


def _read_train_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().strip().splitlines()
    steps, losses_col = [], []
    for row in lines[1:]:
        parts = row.split(",")
        steps.append(int(parts[0]))
        losses_col.append(float(parts[1]))
    return steps, losses_col


def export_heatmap(cfg: RunConfig, checkpoint: str, split: str, index: int, stage: int,
                   out_path: str) -> str:
    """Channel-mean absolute activation of one decoder stage as a PGM image."""
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"invalid stage {stage}; valid stages: 1, 2, 3, 4")
    ds = D.load_split(cfg.data_dir, split)
    if not (0 <= index < len(ds)):
        raise ValueError(f"sample index {index} out of range for {len(ds)} samples")
    model = build_model(cfg)
    load_into_model(checkpoint, model)
    dt = T.default_dtype()
    b1 = ds.img1[index : index + 1].astype(dt) / 255.0
    b2 = ds.img2[index : index + 1].astype(dt) / 255.0
    capture: dict = {}
    model(T.Tensor(b1), T.Tensor(b2), capture=capture)
    act = np.abs(capture[f"stage{stage}"].data[0]).mean(axis=-1)
    lo, hi = float(act.min()), float(act.max())
    if hi - lo < 1e-12:
        img = np.full(act.shape, 128, dtype=np.uint8)
    else:
        img = np.round((act - lo) / (hi - lo) * 255.0).astype(np.uint8)
    D.write_pgm(out_path, img)
    return out_path
