"""Losses, optimizer, schedule, segmentation metrics, and the train loop.

The segmentation loss is pixel cross-entropy restricted to hard examples
(kept pixel = true-class probability under the threshold, with a floor of
`min_kept` hardest pixels). The boundary head trains with class-balanced
binary cross-entropy. Total loss:

    seg + aux_weight * aux + boundary_weight * boundary

The loop is single-threaded and deterministic for a fixed seed: one
`numpy` generator drives shuffling and augmentation, so two runs with the
same seed produce byte-identical metric histories and checkpoints.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import engine as E

__all__ = [
    "OhemConfig",
    "TrainConfig",
    "NumericalAbort",
    "cross_entropy",
    "ohem_cross_entropy",
    "boundary_bce",
    "poly_lr",
    "SGD",
    "ConfusionMatrix",
    "miou",
    "evaluate",
    "train_model",
    "downsample_mask_any",
]


class NumericalAbort(RuntimeError):
    """Training hit a non-finite value; message names the first offender."""


@dataclass(frozen=True)
class OhemConfig:
    threshold: float = 0.7
    min_kept: int = 1

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.min_kept < 1:
            raise ValueError(f"min_kept must be positive, got {self.min_kept}")


def _check_labels(labels, class_count, ignore_index):
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= class_count))
    if bad.any():
        where = np.argwhere(bad)[0]
        raise ValueError(
            f"label {labels[tuple(where)]} at {tuple(where)} outside "
            f"[0, {class_count}) and != ignore_index {ignore_index}"
        )


def _masked_nll(logits, labels, keep):
    """Mean negative log-softmax over the kept pixels (fused op).

    `keep` is a boolean (n, h, w) mask. An empty mask yields loss 0 with a
    zero gradient. Both plain and hard-example cross-entropy funnel through
    here, so degenerate mining settings reproduce the plain loss bit for
    bit.
    """
    x = logits.data
    n, k, h, w = x.shape
    safe = np.where(keep, labels, 0)[:, None]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - np.take_along_axis(z, safe, axis=1)[:, 0]
    count = int(keep.sum())
    if count == 0:
        def bwd_zero(g):
            E._acc(logits, np.zeros_like(x))

        return E.custom_op(np.asarray(0.0), (logits,), bwd_zero)

    loss = (nll * keep).sum() / count

    def bwd(g):
        p = np.exp(z - lse)
        taken = np.take_along_axis(p, safe, axis=1) - 1.0
        np.put_along_axis(p, safe, taken, axis=1)
        p *= (keep / count)[:, None] * float(g)
        E._acc(logits, p)

    return E.custom_op(np.asarray(loss), (logits,), bwd)


def cross_entropy(logits, labels, ignore_index=255):
    """Mean pixel NLL over non-ignored pixels."""
    labels = np.asarray(labels)
    _check_labels(labels, logits.data.shape[1], ignore_index)
    return _masked_nll(logits, labels, labels != ignore_index)


def ohem_cross_entropy(logits, labels, cfg: OhemConfig, ignore_index=255):
    """Cross-entropy over the hard pixels only.

    A pixel is hard when its predicted true-class probability is below
    `cfg.threshold`; if fewer than `cfg.min_kept` qualify, the `min_kept`
    lowest-probability valid pixels are kept instead. `min_kept` is
    clamped to the number of valid pixels.
    """
    labels = np.asarray(labels)
    _check_labels(labels, logits.data.shape[1], ignore_index)
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _masked_nll(logits, labels, valid)

    if cfg.threshold >= 1.0:
        keep = valid
    else:
        x = logits.data
        z = x - x.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        safe = np.where(valid, labels, 0)[:, None]
        p_true = np.take_along_axis(p, safe, axis=1)[:, 0]
        keep = valid & (p_true < cfg.threshold)
        min_kept = min(cfg.min_kept, n_valid)
        if int(keep.sum()) < min_kept:
            score = np.where(valid, p_true, np.inf).ravel()
            idx = np.argpartition(score, min_kept - 1)[:min_kept]
            keep = np.zeros(labels.shape, dtype=bool)
            keep.ravel()[idx] = True
    return _masked_nll(logits, labels, keep)


def boundary_bce(boundary_logits, boundary_mask):
    """Class-balanced binary cross-entropy on the boundary map.

    Positive and negative pixels are reweighted by inverse frequency: the
    loss is the average, over the classes present in the batch, of that
    class's mean BCE. An all-negative mask therefore reduces to the plain
    negative-class mean.
    """
    y = np.asarray(boundary_mask, dtype=np.float64)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != boundary_logits.data.shape:
        raise ValueError(
            f"mask shape {y.shape} does not match logits "
            f"{boundary_logits.data.shape}"
        )
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("boundary mask must be binary (0/1)")

    x = boundary_logits.data
    bce = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n_pos = y.sum()
    n_neg = y.size - n_pos
    present = int(n_pos > 0) + int(n_neg > 0)
    w = np.zeros_like(y)
    if n_pos > 0:
        w += y / (n_pos * present)
    if n_neg > 0:
        w += (1.0 - y) / (n_neg * present)
    loss = (bce * w).sum()

    def bwd(g):
        E._acc(boundary_logits, (expit(x) - y) * w * float(g))

    return E.custom_op(np.asarray(loss), (boundary_logits,), bwd)


def poly_lr(base_lr, iteration, max_iter, power=0.9):
    """base_lr * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    return base_lr * (1.0 - iteration / max_iter) ** power


class SGD:
    """Momentum SGD with coupled weight decay.

    v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v
    """

    def __init__(self, named_params, momentum=0.9, weight_decay=0.0):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr):
        for name, p in self.params:
            g = p.grad
            if g is not None and g.shape != p.data.shape:
                raise ValueError(
                    f"grad shape {g.shape} does not match parameter "
                    f"{name} shape {p.data.shape}"
                )
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data = p.data - lr * v

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class ConfusionMatrix:
    """K x K pixel counts; rows are truth, columns are prediction."""

    def __init__(self, class_count):
        self.class_count = class_count
        self.mat = np.zeros((class_count, class_count), dtype=np.int64)

    def update(self, pred, truth, ignore_index=None):
        pred = np.asarray(pred).ravel()
        truth = np.asarray(truth).ravel()
        if ignore_index is not None:
            m = truth != ignore_index
            pred, truth = pred[m], truth[m]
        k = self.class_count
        if ((truth < 0) | (truth >= k)).any() or ((pred < 0) | (pred >= k)).any():
            raise ValueError("labels outside [0, class_count)")
        self.mat += np.bincount(k * truth + pred, minlength=k * k).reshape(k, k)
        return self

    def total(self):
        return int(self.mat.sum())


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN for classes absent from truth and prediction)
    and their mean over the present classes."""
    m = cm.mat
    diag = np.diag(m).astype(np.float64)
    denom = m.sum(axis=1) + m.sum(axis=0) - np.diag(m)
    per_class = np.full(cm.class_count, np.nan)
    present = denom > 0
    per_class[present] = diag[present] / denom[present]
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return per_class, mean


def downsample_mask_any(mask, factor):
    """(n, h, w) binary mask -> (n, 1, h/f, w/f); tile is 1 if any pixel is."""
    n, h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask dims {h}x{w} not divisible by {factor}")
    view = mask.reshape(n, h // factor, factor, w // factor, factor)
    return view.max(axis=(2, 4)).astype(np.float64)[:, None]


def boundary_target_at_scale(labels, factor, radius=1):
    """Tile-level boundary target for a 1/factor-resolution boundary head.

    Labels are majority-voted per tile, then a tile is positive when a
    neighbor within `radius` holds a different majority. A full-resolution
    mask downsampled with "any pixel" saturates at coarse scales; majority
    edges keep the target discriminative.
    """
    from .data_io import boundary_from_labels

    n, h, w = labels.shape
    if h % factor or w % factor:
        raise ValueError(f"label dims {h}x{w} not divisible by {factor}")
    k = int(labels.max()) + 1
    tiles = labels.reshape(n, h // factor, factor, w // factor, factor)
    tiles = tiles.transpose(0, 1, 3, 2, 4).reshape(n, h // factor, w // factor,
                                                   factor * factor)
    counts = (tiles[..., None] == np.arange(k)).sum(axis=3)
    majority = counts.argmax(axis=3)
    out = np.stack([boundary_from_labels(m, radius) for m in majority])
    return out.astype(np.float64)[:, None]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    ohem_threshold: float = 0.7
    ohem_min_kept_frac: float = 1.0 / 16.0
    aux_weight: float = 0.4
    boundary_weight: float = 1.0
    flip: bool = True
    crop: int = 0            # 0 disables; otherwise a multiple of 64
    scale_augment: bool = False
    seed: int = 0
    ignore_index: int = 255
    val_batch: int = 8

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be >= 0, got {self.base_lr}")
        if not (0.0 < self.ohem_threshold <= 1.0):
            raise ValueError(f"ohem_threshold must be in (0, 1], got {self.ohem_threshold}")
        if not (0.0 < self.ohem_min_kept_frac <= 1.0):
            raise ValueError("ohem_min_kept_frac must be in (0, 1]")
        if self.crop and self.crop % 64:
            raise ValueError(f"crop must be a multiple of 64, got {self.crop}")


def _collate(samples):
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    boundary = np.stack([s.boundary for s in samples])
    return images, labels, boundary


def _augment(images, labels, boundary, rng, cfg):
    if cfg.flip:
        flips = rng.random(images.shape[0]) < 0.5
        images = np.where(flips[:, None, None, None], images[:, :, :, ::-1], images)
        labels = np.where(flips[:, None, None], labels[:, :, ::-1], labels)
        boundary = np.where(flips[:, None, None], boundary[:, :, ::-1], boundary)
    if cfg.crop and cfg.crop < min(images.shape[2], images.shape[3]):
        c = cfg.crop
        n, _, h, w = images.shape
        ys = rng.integers(0, h - c + 1, size=n)
        xs = rng.integers(0, w - c + 1, size=n)
        images = np.stack([images[i, :, y:y + c, x:x + c]
                           for i, (y, x) in enumerate(zip(ys, xs))])
        labels = np.stack([labels[i, y:y + c, x:x + c]
                           for i, (y, x) in enumerate(zip(ys, xs))])
        boundary = np.stack([boundary[i, y:y + c, x:x + c]
                             for i, (y, x) in enumerate(zip(ys, xs))])
    if cfg.scale_augment:
        # single batch-wide scale in [0.5, 2.0], snapped to a multiple of 64
        n, _, h, w = images.shape
        s = rng.uniform(0.5, 2.0)
        nh = max(64, int(round(h * s / 64.0)) * 64)
        nw = max(64, int(round(w * s / 64.0)) * 64)
        if (nh, nw) != (h, w):
            with E.no_grad():
                images = E.bilinear_resize(E.Tensor(images), nh, nw).data
            idx_h = np.clip((np.arange(nh) + 0.5) * h / nh, 0, h - 1).astype(int)
            idx_w = np.clip((np.arange(nw) + 0.5) * w / nw, 0, w - 1).astype(int)
            labels = labels[:, idx_h][:, :, idx_w]
            boundary = boundary[:, idx_h][:, :, idx_w]
    return images, labels, boundary


def _first_nonfinite(model):
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            return f"parameter {name}"
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"gradient {name}"
    return "loss"


def evaluate(model, dataset, class_count, batch_size=8, ignore_index=255,
             threads=1):
    """Aggregate confusion over the dataset; returns (per_class, mean) IoU."""
    cm = ConfusionMatrix(class_count)

    def run_chunk(chunk):
        images, labels, _ = _collate(chunk)
        with E.no_grad():
            out = model(E.Tensor(images), "eval")
        return out.seg_logits.data.argmax(axis=1), labels

    chunks = [dataset[i:i + batch_size] for i in range(0, len(dataset), batch_size)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    for pred, labels in results:
        cm.update(pred, labels, ignore_index)
    return miou(cm)


def history_csv(history):
    """Render the metric history exactly as written to metrics.csv."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "miou", "lr"])
    for row in history:
        writer.writerow([row["epoch"], f"{row['loss']:.12g}",
                         f"{row['miou']:.12g}", f"{row['lr']:.12g}"])
    return buf.getvalue()


def train_model(model, train_data, val_data, cfg: TrainConfig, out_dir=None,
                log=None):
    """Run the full loop; returns the per-epoch metric history.

    When `out_dir` is given, writes metrics.csv plus best.ckpt/last.ckpt
    (best by validation mIoU). Aborts with `NumericalAbort` on the first
    non-finite loss, naming the first non-finite parameter or gradient.
    """
    from .data_io import save_checkpoint

    cfg.validate()
    if not train_data:
        raise ValueError("training dataset is empty")
    k = model.cfg.class_count
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)

    n = len(train_data)
    steps = (n + cfg.batch_size - 1) // cfg.batch_size
    max_iter = cfg.epochs * steps
    it = 0
    history = []
    best = -1.0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        lr = cfg.base_lr
        for s in range(steps):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            images, labels, boundary = _collate([train_data[i] for i in idx])
            images, labels, boundary = _augment(images, labels, boundary, rng, cfg)
            lr = poly_lr(cfg.base_lr, it, max_iter, cfg.poly_power)

            try:
                out = model(E.Tensor(images), "train")
                seg_cfg = OhemConfig(
                    cfg.ohem_threshold,
                    max(1, int(labels.size * cfg.ohem_min_kept_frac)),
                )
                loss = ohem_cross_entropy(out.seg_logits, labels, seg_cfg,
                                          cfg.ignore_index)
                if out.aux_logits is not None and cfg.aux_weight:
                    aux = ohem_cross_entropy(out.aux_logits, labels, seg_cfg,
                                             cfg.ignore_index)
                    loss = E.add(loss, E.mul(aux, cfg.aux_weight))
                if out.boundary_logits is not None and cfg.boundary_weight:
                    target = boundary_target_at_scale(
                        labels, images.shape[2] // out.boundary_logits.data.shape[2])
                    bl = boundary_bce(out.boundary_logits, target)
                    loss = E.add(loss, E.mul(bl, cfg.boundary_weight))
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise ValueError("non-finite loss")
                loss.backward()
            except ValueError as err:
                raise NumericalAbort(
                    f"non-finite value at iteration {it}: first non-finite "
                    f"{_first_nonfinite(model)} ({err})"
                ) from err
            opt.step(lr)
            opt.zero_grad()
            epoch_loss += loss_val
            it += 1

        _, val_miou = evaluate(model, val_data, k, cfg.val_batch,
                               cfg.ignore_index) if val_data else (None, 0.0)
        row = {"epoch": epoch, "loss": epoch_loss / steps, "miou": val_miou,
               "lr": lr}
        history.append(row)
        if log:
            log(f"epoch={epoch} loss={row['loss']:.6f} miou={row['miou']:.6f} "
                f"lr={row['lr']:.6g}")
        if out_dir:
            if val_miou >= best:
                best = val_miou
                save_checkpoint(model, os.path.join(out_dir, "best.ckpt"))
            save_checkpoint(model, os.path.join(out_dir, "last.ckpt"))

    if out_dir:
        tmp = os.path.join(out_dir, "metrics.csv.tmp")
        with open(tmp, "w", encoding="ascii", newline="") as fh:
            fh.write(history_csv(history))
        os.replace(tmp, os.path.join(out_dir, "metrics.csv"))
    return history
