"""Alternating discriminator / segmenter training with poly learning-rate decay."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .data import DatasetSplit, Sample, augment
from .errors import ConfigurationError, TrainingDiverged
from .metrics import evaluate
from .networks import (
    DiscriminatorSpec,
    NetworkState,
    SegmenterSpec,
    build_discriminator,
    build_segmenter,
    parse_layers,
    save_checkpoint,
)
from .objectives import BatchPair, LossWeights, condition, disc_in_channels, disc_loss, total_seg_loss
from .numcore import RngStream, Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "l_seg", "l_adv", "l_fm", "l_ipm", "l_disc", "lr_seg", "lr_disc", "val_dsc")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 2000
    batch_size: int = 8
    seg_lr0: float = 1e-2
    disc_lr0: float = 1e-4
    lr_decay_power: float = 0.9
    seed: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 100
    momentum: float = 0.9
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: bool = True
    segmenter: SegmenterSpec = field(default_factory=SegmenterSpec)
    disc_layers: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.segmenter, dict):
            object.__setattr__(self, "segmenter", SegmenterSpec(**self.segmenter))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        self.validate()

    def validate(self) -> None:
        if self.total_iterations < 0:
            raise ConfigurationError("total_iterations must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigurationError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.seg_lr0 <= 0 or self.disc_lr0 <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.eval_every < 0:
            raise ConfigurationError("eval_every must be >= 0")

    def disc_spec(self) -> DiscriminatorSpec:
        w = self.weights
        cin = disc_in_channels(self.segmenter.num_classes, w.conditioning)
        if self.disc_layers:
            return DiscriminatorSpec(w.granularity, parse_layers(self.disc_layers), 0.2, cin)
        return DiscriminatorSpec.desk(w.granularity, cin)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def poly_lr(lr0: float, iteration: int, total: int, power: float = 0.9) -> float:
    if iteration < 0 or iteration > total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (1.0 - iteration / total) ** power


class SGD:
    """Heavy-ball momentum: ``v = mu * v + g; p -= lr * v``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def make_batch(labeled: Sequence[Sample], unlabeled: Sequence[Sample]) -> BatchPair:
    """Labeled rows first; unlabeled masks are never read."""
    samples = list(labeled) + list(unlabeled)
    images = Tensor(np.stack([s.image for s in samples]))
    masks = Tensor(np.stack([s.mask for s in labeled])) if labeled else None
    return BatchPair(images, masks, [True] * len(labeled) + [False] * len(unlabeled))


class BatchSampler:
    """Draws half-labeled, half-unlabeled batches by cycling shuffled epochs of each pool."""

    def __init__(self, data: DatasetSplit, batch_size: int, rng: RngStream, do_augment: bool = True):
        if not data.labeled:
            raise ConfigurationError("training needs at least one labeled sample")
        self.pools = [list(data.labeled), list(data.unlabeled)]
        self.n_unl = batch_size // 2 if data.unlabeled else 0
        self.n_lab = batch_size - self.n_unl
        self.rng = rng
        self.do_augment = do_augment
        self.queues: List[List[int]] = [[], []]

    def _draw(self, which: int, n: int) -> List[Sample]:
        out = []
        pool, queue = self.pools[which], self.queues[which]
        while len(out) < n:
            if not queue:
                queue.extend(self.rng.permutation(len(pool)).tolist())
            s = pool[queue.pop(0)]
            out.append(augment(s, self.rng) if self.do_augment else s)
        return out

    def next(self) -> BatchPair:
        lab = self._draw(0, self.n_lab)
        unl = self._draw(1, self.n_unl)
        return make_batch(lab, unl)


def disc_step(batch: BatchPair, S: NetworkState, D: NetworkState, w: LossWeights, opt: Adam,
              lr: float, rng: Optional[RngStream], probs: Optional[Tensor] = None) -> float:
    """One discriminator update; segmenter predictions enter as constants.

    ``probs`` may carry the segmenter output already computed for this batch.
    """
    if not any(batch.labeled_flags):
        raise ConfigurationError("disc_step needs at least one labeled sample")
    probs = (S(batch.images) if probs is None else probs).detach()
    D.requires_grad_(True)
    with Tape() as tape:
        d_fake = D(condition(batch.images, probs, w, rng))
        d_real = D(condition(batch.labeled_images(), batch.masks, w, rng))
        loss = disc_loss(d_real, d_fake)
    nc.backward(loss, tape)
    value = loss.item()
    if math.isfinite(value):
        opt.step(lr)
    D.zero_grad()
    return value


def seg_step(batch: BatchPair, S: NetworkState, D: Optional[NetworkState], w: LossWeights, opt: SGD,
             lr: float, rng: Optional[RngStream], forward: Optional[Tuple[Tape, Tensor]] = None) -> Dict[str, float]:
    """One segmenter update with the discriminator frozen.

    ``forward`` optionally resumes a tape that already recorded ``S(batch.images)``.
    """
    tape, probs = forward if forward is not None else (Tape(), None)
    if D is not None:
        D.requires_grad_(False)
    try:
        with tape:
            total, terms = total_seg_loss(batch, S, D, w, rng, probs=probs)
        nc.backward(total, tape)
    finally:
        if D is not None:
            D.requires_grad_(True)
    terms["total"] = total.item()
    if math.isfinite(terms["total"]):
        opt.step(lr)
    S.zero_grad()
    return terms


def predict_proba(S: NetworkState, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = [S(Tensor(images[i:i + chunk])).data for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)


def predict(S: NetworkState, images: np.ndarray) -> np.ndarray:
    """Label maps ``[N, H, W]`` by channel argmax; ties go to the lowest class index."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return predict_proba(S, images).argmax(axis=1)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-class binary masks: probability at or above ``threshold`` is foreground."""
    return np.asarray(probs) >= threshold


def evaluate_samples(S: NetworkState, samples: Sequence[Sample], boundary_metrics: bool = True):
    images = np.stack([s.image for s in samples])
    gt = np.stack([s.labels for s in samples])
    return evaluate(predict(S, images), gt, S.spec.num_classes, boundary_metrics=boundary_metrics)


@dataclass
class TrainingLog:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def append(self, row: Dict[str, float]) -> None:
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise ValueError("log rows must have strictly increasing iterations")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> List[float]:
        return [r.get(name, float("nan")) for r in self.rows]

    def evaluations(self) -> List[Tuple[int, float]]:
        return [(int(r["iter"]), r["val_dsc"]) for r in self.rows if r.get("val_dsc") is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            cells = [str(int(r["iter"]))]
            for c in LOG_COLUMNS[1:]:
                v = r.get(c)
                cells.append("" if v is None else f"{v:.9g}")
            w.writerow(cells)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TrainingLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"unexpected log header {reader.fieldnames}")
        out = cls()
        for r in reader:
            row = {"iter": int(r["iter"])}
            for c in LOG_COLUMNS[1:]:
                row[c] = float(r[c]) if r[c] != "" else None
            out.append(row)
        return out


@dataclass
class TrainResult:
    segmenter: NetworkState
    discriminator: Optional[NetworkState]
    log: TrainingLog
    best_iter: int
    best_val_dsc: float


def _dump_batch(out_dir, batch: BatchPair, iteration: int) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_iter{iteration}.npz"
    np.savez(path, images=batch.images.data,
             masks=batch.masks.data if batch.masks is not None else np.zeros(0),
             labeled=np.array(batch.labeled_flags))
    return path


def run_training(config: TrainConfig, data: DatasetSplit, out_dir=None) -> TrainResult:
    """Full training run; writes ``log.csv``, ``ckpt_<iter>.bin`` and ``best.bin`` when ``out_dir`` is set."""
    hw = data.labeled[0].image.shape[1:] if data.labeled else None
    if hw is None:
        raise ConfigurationError("training needs at least one labeled sample")
    config.segmenter.validate(hw)
    w = config.weights
    init_s, init_d, data_rng, noise_rng = RngStream(config.seed).split(4)
    S = build_segmenter(config.segmenter, init_s)
    D = build_discriminator(config.disc_spec(), init_d) if w.adversarial else None
    opt_s = SGD(S.parameters(), config.momentum)
    opt_d = Adam(D.parameters(), config.adam_betas, config.adam_eps) if D is not None else None
    sampler = BatchSampler(data, config.batch_size, data_rng, config.augment)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_log = TrainingLog()
    best_iter, best_dsc = 0, -1.0
    T = config.total_iterations

    def evaluate_and_checkpoint(it: int) -> float:
        nonlocal best_iter, best_dsc
        score = evaluate_samples(S, data.val, boundary_metrics=False).mean_dsc if data.val else float("nan")
        if out is not None:
            save_checkpoint(S, out / f"ckpt_{it}.bin")
        if best_dsc < 0 or score > best_dsc:
            best_iter, best_dsc = it, score
            if out is not None:
                save_checkpoint(S, out / "best.bin")
        return score

    if T == 0:
        evaluate_and_checkpoint(0)
    for t in range(T):
        it = t + 1
        lr_s = poly_lr(config.seg_lr0, t, T, config.lr_decay_power)
        lr_d = poly_lr(config.disc_lr0, t, T, config.lr_decay_power)
        batch = sampler.next()
        # S is unchanged until seg_step, so one forward serves both steps
        with Tape() as tape:
            probs = S(batch.images)
        l_disc = None
        if D is not None:
            l_disc = disc_step(batch, S, D, w, opt_d, lr_d, noise_rng, probs=probs)
        terms = seg_step(batch, S, D, w, opt_s, lr_s, noise_rng, forward=(tape, probs))
        if not math.isfinite(terms["total"]) or (l_disc is not None and not math.isfinite(l_disc)):
            dumped = _dump_batch(out, batch, it)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: seg={terms['total']} disc={l_disc}"
                                   + (f"; batch dumped to {dumped}" if dumped else ""))
        row = {"iter": it, "l_seg": terms["l_seg"], "l_adv": terms["l_adv"], "l_fm": terms["l_fm"],
               "l_ipm": terms["l_ipm"], "l_disc": l_disc, "lr_seg": lr_s, "lr_disc": lr_d if D else None,
               "val_dsc": None}
        if it == T or (config.eval_every and it % config.eval_every == 0):
            row["val_dsc"] = evaluate_and_checkpoint(it)
            log.info("iter %d val_dsc %.4f l_seg %.4f", it, row["val_dsc"], terms["l_seg"])
        train_log.append(row)
    if out is not None:
        train_log.save(out / "log.csv")
    return TrainResult(S, D, train_log, best_iter, best_dsc)


def train(config: TrainConfig, data: DatasetSplit, out_dir=None) -> Tuple[NetworkState, TrainingLog]:
    result = run_training(config, data, out_dir)
    return result.segmenter, result.log
