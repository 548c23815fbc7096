"""Loss, optimiser, learning-rate schedule, metrics and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Dataset, NormStats, compute_stats, load_checkpoint, normalize, normalize_depth, save_checkpoint
from .errors import ContractError, ShapeError, TrainingError
from .nn import HaarNet, HaarNetConfig
from .tensor import Function, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "loss", "miou", "pixel_acc", "boundary_f1"]


@dataclass
class TrainConfig:
    """Optimisation settings. ``epochs`` is the schedule horizon ``E``."""

    lr: float = 5e-3
    epochs: int = 300
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    save_every: int = 0
    boundary_tol: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ContractError("need at least one epoch")
        if self.batch_size < 1:
            raise ContractError("batch size must be positive")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


class _CrossEntropy(Function):
    def forward(self, logits, labels, ignore_index):
        n, k, h, w = logits.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
        valid = labels != ignore_index
        count = int(valid.sum())
        if count == 0:
            raise ContractError("every pixel is ignored")
        lab = np.where(valid, labels, 0)
        if np.any((lab < 0) | (lab >= k)):
            raise ContractError("label outside [0, K)")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsum
        picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
        self.probs = np.exp(logp)
        self.lab, self.valid, self.count = lab, valid, count
        loss = -(picked * valid).sum(dtype=np.float64) / count
        return np.full((1, 1, 1, 1), loss, dtype=logits.dtype)

    def backward(self, g):
        grad = self.probs.copy()
        np.put_along_axis(grad, self.lab[:, None], np.take_along_axis(grad, self.lab[:, None], axis=1) - 1, axis=1)
        grad *= self.valid[:, None]
        grad *= g.reshape(()) / self.count
        return (grad.astype(g.dtype, copy=False),)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax of the true class over non-ignored pixels."""
    return _CrossEntropy.apply(logits, labels=np.asarray(labels), ignore_index=ignore_index)


# --------------------------------------------------------------------------
# optimiser and schedule
# --------------------------------------------------------------------------


def sgd_nesterov_step(params, grads, state, lr: float, momentum: float) -> None:
    """In-place Nesterov update ``v = m v + g; p -= lr (g + m v)``.

    ``params`` and ``state`` are lists of arrays updated in place; ``grads``
    entries may be ``None`` for parameters that received no gradient.
    """
    if not (len(params) == len(grads) == len(state)):
        raise ShapeError("params, grads and state differ in length")
    lr_ = np.float32(lr)
    mom = np.float32(momentum)
    for p, g, v in zip(params, grads, state):
        if g is None:
            continue
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape} and state {v.shape} disagree")
        v *= mom
        v += g
        p -= lr_ * (g + mom * v)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """Polynomial decay ``lr * (1 - epoch / E) ** power``."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr * (1.0 - epoch / cfg.epochs) ** cfg.poly_power


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    miou: float
    pixel_accuracy: float
    boundary_f1: float
    per_class_iou: np.ndarray
    confusion: np.ndarray


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """``K x K`` counts with ground truth along rows."""
    return np.bincount(gt.ravel() * k + pred.ravel(), minlength=k * k).reshape(k, k)


def default_boundary_tol(h: int, w: int) -> int:
    return max(1, math.ceil(0.0075 * math.hypot(h, w)))


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def boundary_counts(pred: np.ndarray, gt: np.ndarray, cls: int, tol: int) -> tuple[int, int, int, int]:
    """(matched predicted, predicted, matched ground-truth, ground-truth) boundary pixels of ``cls``."""
    pb = boundary_mask(pred) & (pred == cls)
    gb = boundary_mask(gt) & (gt == cls)
    n_p, n_g = int(pb.sum()), int(gb.sum())
    if n_p == 0 or n_g == 0:
        return 0, n_p, 0, n_g
    dist_to_g = ndimage.distance_transform_edt(~gb)
    dist_to_p = ndimage.distance_transform_edt(~pb)
    return int((dist_to_g[pb] <= tol).sum()), n_p, int((dist_to_p[gb] <= tol).sum()), n_g


def boundary_f1_from_counts(mp: int, n_p: int, mg: int, n_g: int) -> float:
    # an empty boundary set is matched perfectly by another empty set
    precision = mp / n_p if n_p else 1.0
    recall = mg / n_g if n_g else 1.0
    if n_p == 0 and n_g > 0:
        precision = 0.0
    if n_g == 0 and n_p > 0:
        recall = 0.0
    return _f1(precision, recall)


def boundary_f1(pred: np.ndarray, gt: np.ndarray, k: int, tol: int) -> float:
    """Mean per-class boundary F1 over classes present in ``gt`` (single image)."""
    scores = [boundary_f1_from_counts(*boundary_counts(pred, gt, c, tol)) for c in range(k) if np.any(gt == c)]
    return float(np.mean(scores))


def metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, k: int, boundary_tol: int | None = None) -> MetricReport:
    """mIoU, pixel accuracy and boundary F1 for ``(H, W)`` or ``(N, H, W)`` label maps.

    Boundary F1 is averaged over images; per image it is the mean over the
    classes present in the ground truth.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for arr in (pred, gt):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"label outside [0, {k})")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    pred = pred.astype(np.int64)
    gt = gt.astype(np.int64)
    tol = boundary_tol if boundary_tol is not None else default_boundary_tol(*gt.shape[1:])
    if tol < 1:
        raise ContractError("boundary tolerance must be at least 1 pixel")
    conf = confusion_matrix(pred, gt, k)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    iou = np.divide(inter, union, out=np.zeros(k), where=union > 0)
    miou = float(iou[union > 0].mean()) if np.any(union > 0) else 0.0
    acc = float(np.trace(conf) / conf.sum())
    bf = float(np.mean([boundary_f1(p, g, k, tol) for p, g in zip(pred, gt)]))
    return MetricReport(miou=miou, pixel_accuracy=acc, boundary_f1=bf, per_class_iou=iou, confusion=conf)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one joins its predecessor.

    Batch norm cannot standardise a single sample, so the final partial batch
    is kept but never left at size one.
    """
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def model_state(model: HaarNet) -> dict[str, np.ndarray]:
    state = {f"param/{n}": p.data for n, p in model.named_parameters()}
    state.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    return state


def load_model_state(model: HaarNet, entries: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        key = f"param/{n}"
        if key not in entries:
            raise ContractError(f"checkpoint is missing {key}")
        p.data[...] = entries[key].reshape(p.shape)
    buffers = {}
    for n, _ in model.named_buffers():
        buffers[n] = entries[f"buffer/{n}"]
    for m_name, m in _named_modules(model):
        for b in m._buffers:
            full = f"{m_name}{b}"
            setattr(m, b, buffers[full].astype(np.float32).copy())


def _named_modules(module, prefix=""):
    yield prefix, module
    for name, value in vars(module).items():
        if hasattr(value, "_buffers") and hasattr(value, "named_parameters"):
            yield from _named_modules(value, f"{prefix}{name}.")
        elif isinstance(value, list):
            for i, m in enumerate(value):
                if hasattr(m, "_buffers") and hasattr(m, "named_parameters"):
                    yield from _named_modules(m, f"{prefix}{name}.{i}.")


_CONFIG_KEYS = ("num_classes", "w1", "w2", "w3", "bottleneck", "use_mup", "use_mrelu", "use_mhw", "seed")


def config_entries(cfg: HaarNetConfig) -> dict[str, np.ndarray]:
    vals = [cfg.num_classes, *cfg.widths, cfg.bottleneck, cfg.use_mup, cfg.use_mrelu, cfg.use_mhw, cfg.seed]
    return {f"meta/config/{k}": np.array([float(v)], dtype=np.float32) for k, v in zip(_CONFIG_KEYS, vals)}


def config_from_entries(entries: dict[str, np.ndarray]) -> HaarNetConfig:
    v = {k: float(entries[f"meta/config/{k}"][0]) for k in _CONFIG_KEYS}
    return HaarNetConfig(
        num_classes=int(v["num_classes"]),
        widths=(int(v["w1"]), int(v["w2"]), int(v["w3"])),
        bottleneck=int(v["bottleneck"]),
        use_mup=bool(v["use_mup"]),
        use_mrelu=bool(v["use_mrelu"]),
        use_mhw=bool(v["use_mhw"]),
        seed=int(v["seed"]),
    )


@dataclass
class TrainResult:
    model: HaarNet
    stats: NormStats
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    checkpoints: list[Path] = field(default_factory=list)


def predict(model: HaarNet, rgb: np.ndarray, depth: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Arg-max labels in eval mode; inputs must already be normalised."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(rgb), batch_size):
            logits = model(Tensor(rgb[i:i + batch_size]), Tensor(depth[i:i + batch_size]))
            out.append(logits.data.argmax(axis=1))
    model.train()
    return np.concatenate(out)


def evaluate(model: HaarNet, data: Dataset, stats: NormStats, boundary_tol: int | None = None) -> MetricReport:
    pred = predict(model, normalize(data.rgb, stats), normalize_depth(data.depth))
    return metrics(pred, data.labels, model.config.num_classes, boundary_tol)


def train_loop(
    model: HaarNet,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    max_epochs: int | None = None,
    stop_when=None,
) -> TrainResult:
    """Train ``model`` with Nesterov SGD under the polynomial schedule.

    Per epoch, the learning rate is ``poly_lr(epoch)``; batches are shuffled
    by a generator seeded with ``(seed, epoch)``, so a run resumed from the
    checkpoint of epoch ``e`` replays epochs ``e+1...`` exactly. Logged metrics
    are computed on the training-mode predictions of each batch.

    Args:
        out_dir: Receives ``log.csv`` and, every ``cfg.save_every`` epochs,
            ``ckpt_epoch<e>.mten``.
        resume: Checkpoint to continue from.
        max_epochs: Stop after this many epochs in total (defaults to
            ``cfg.epochs``) without changing the schedule horizon.
        stop_when: Optional ``callable(epoch, model, stats) -> bool`` checked
            after each epoch.
    """
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    k = model.config.num_classes
    stats = _as_stored(compute_stats(dataset.rgb))
    rgb = normalize(dataset.rgb, stats)
    depth = normalize_depth(dataset.depth)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    start = 0
    if resume is not None:
        entries = load_checkpoint(resume)
        load_model_state(model, entries)
        for n, v in zip(names, velocity):
            v[...] = entries[f"momentum/{n}"].reshape(v.shape)
        stats = NormStats(entries["meta/rgb_mean"].astype(np.float64), entries["meta/rgb_std"].astype(np.float64))
        rgb = normalize(dataset.rgb, stats)
        start = int(entries["meta/epoch"][0]) + 1

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.csv"
        fresh = resume is None or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_HEADER)
    tol = cfg.boundary_tol or default_boundary_tol(*dataset.labels.shape[1:])
    result = TrainResult(model=model, stats=stats)
    end = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    model.train()
    try:
        for epoch in range(start, end):
            lr = poly_lr(epoch, cfg)
            rng = np.random.default_rng([cfg.seed, epoch])
            losses, preds, gts = [], [], []
            for step, idx in enumerate(batches(len(dataset), cfg.batch_size, rng)):
                model.zero_grad()
                logits = model(Tensor(rgb[idx]), Tensor(depth[idx]))
                loss = cross_entropy(logits, dataset.labels[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
                backward(loss)
                sgd_nesterov_step([p.data for p in params], [p.grad for p in params], velocity, lr, cfg.momentum)
                result.steps += 1
                losses.append(value * len(idx))
                preds.append(logits.data.argmax(axis=1))
                gts.append(dataset.labels[idx])
            rep = metrics(np.concatenate(preds), np.concatenate(gts), k, tol)
            row = {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.sum(losses) / len(dataset)),
                "miou": rep.miou,
                "pixel_acc": rep.pixel_accuracy,
                "boundary_f1": rep.boundary_f1,
            }
            result.log.append(row)
            if writer is not None:
                writer.writerow([row[h] for h in LOG_HEADER])
                fh.flush()
            logger.info("epoch %d lr %.3g loss %.4f miou %.3f", epoch, lr, row["loss"], rep.miou)
            if out is not None and cfg.save_every and (epoch + 1) % cfg.save_every == 0:
                path = out / f"ckpt_epoch{epoch}.mten"
                save_training_checkpoint(path, model, velocity, names, stats, epoch)
                result.checkpoints.append(path)
            if stop_when is not None and stop_when(epoch, model, stats):
                break
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        path = out / "final.mten"
        save_training_checkpoint(path, model, velocity, names, stats, result.log[-1]["epoch"] if result.log else start - 1)
        result.checkpoints.append(path)
    return result


def _as_stored(stats: NormStats) -> NormStats:
    # checkpoints hold float32 statistics; round now so resumed runs normalise identically
    return NormStats(stats.mean.astype(np.float32).astype(np.float64), stats.std.astype(np.float32).astype(np.float64))


def save_training_checkpoint(path, model, velocity, names, stats, epoch) -> None:
    entries = model_state(model)
    entries.update({f"momentum/{n}": v for n, v in zip(names, velocity)})
    entries.update(config_entries(model.config))
    entries["meta/rgb_mean"] = np.asarray(stats.mean, dtype=np.float32)
    entries["meta/rgb_std"] = np.asarray(stats.std, dtype=np.float32)
    entries["meta/epoch"] = np.array([float(epoch)], dtype=np.float32)
    save_checkpoint(path, entries)


def load_model(path) -> tuple[HaarNet, NormStats]:
    """Rebuild a model and its normalisation statistics from a checkpoint."""
    entries = load_checkpoint(path)
    model = HaarNet(config_from_entries(entries))
    load_model_state(model, entries)
    stats = NormStats(entries["meta/rgb_mean"].astype(np.float64), entries["meta/rgb_std"].astype(np.float64))
    return model, stats
