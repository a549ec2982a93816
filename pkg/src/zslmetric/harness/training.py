"""End-to-end training loop for the four extension modes."""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import gradcore as gc
from ..adversary import (AdversarialSchedule, classify, cross_entropy, smooth_labels, soft_ce,
                         train_step_adversarial)
from ..errors import DivergenceError, NonFiniteError
from ..gradcore import Tensor
from ..losses import energy_confusion_all
from ..metrics import EvalReport, evaluate_embeddings
from .config import ExperimentConfig
from .data import Dataset, ZslSplit, check_disjoint, hold_out_validation, zsl_split
from .model import ZslModel

log = logging.getLogger(__name__)


def balanced_batches(indices, labels, batch_size: int, min_per_class: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """P classes x K samples per batch, covering roughly one pass over ``indices``.

    ``P = min(#classes, batch_size // min_per_class)`` and ``K = batch_size // P``.
    Each class is drawn from its own shuffled queue, refilled when exhausted.
    """
    indices = np.asarray(indices)
    classes = np.unique(labels[indices])
    P = max(1, min(classes.size, batch_size // min_per_class))
    K = batch_size // P
    pools = {c: indices[labels[indices] == c] for c in classes}
    queues = {c: list(rng.permutation(pools[c])) for c in classes}
    n_batches = max(1, math.ceil(indices.size / (P * K)))
    batches = []
    for _ in range(n_batches):
        chosen = np.sort(rng.choice(classes, size=P, replace=False))
        batch = []
        for c in chosen:
            take = min(K, pools[c].size)
            for _ in range(take):
                if not queues[c]:
                    queues[c] = list(rng.permutation(pools[c]))
                batch.append(queues[c].pop())
        batches.append(np.asarray(batch, dtype=np.int64))
    return batches


@dataclass
class TrainResult:
    model: ZslModel
    split: ZslSplit
    epoch_log: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def final_report(self, split_id: str = "unseen") -> EvalReport | None:
        rows = [r for r in self.reports if r.split_id == split_id]
        return rows[-1] if rows else None


def log_columns(mode: str) -> list[str]:
    cols = ["epoch", "l_m"]
    if mode in ("soft_adv", "adapt_adv"):
        cols.append("l_c")
    if mode == "energy":
        cols.append("l_ec")
    if mode in ("soft_adv", "adapt_adv", "energy"):
        cols.append("lambda")
    if mode == "adapt_adv":
        cols.append("lambda_next")
    return cols


def eval_rng(seed: int, epoch: int, split_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, sum(map(ord, split_id))])


def evaluate(model: ZslModel, dataset: Dataset, indices, ks=(1, 2, 4, 8), rng=None,
             split_id: str = "unseen", epoch: int | None = None, check_unseen: bool = True
             ) -> EvalReport:
    """Embed ``dataset[indices]`` in inference mode and compute the report."""
    labels = dataset.labels[indices]
    if check_unseen:
        check_disjoint(model.train_classes, np.unique(labels))
    emb = model.embed(dataset.samples[indices])
    return evaluate_embeddings(emb, labels, ks, rng if rng is not None else eval_rng(
        model.config.seed, epoch or 0, split_id), split_id=split_id, epoch=epoch)


def _step(mode, model, optimizer, x, y, sampler, schedule, cfg, rng):
    """One optimizer step for the non-adversarial-minimax modes."""
    with gc.Tape():
        optimizer.zero_grad()
        f = model.extractor(x)
        emb = model.embedding(f)
        tuples = sampler(emb.data, y, rng)
        if tuples is not None and len(tuples) == 0:
            warnings.warn("empty tuple set: skipping step", RuntimeWarning, stacklevel=2)
            return None
        l_m = model.metric_loss(emb, y, tuples)
        extra = {}
        total = l_m
        if mode == "soft_adv":
            probs = classify(f, model.classifier, True, rng)
            y_ls = smooth_labels(model.class_index(y), cfg.smoothing, model.n_classes)
            l_c = gc.mean(soft_ce(probs, y_ls))
            total = total + gc.mul(schedule.current, l_c)
            extra["l_c"] = l_c.item()
        elif mode == "energy":
            l_ec = energy_confusion_all(emb, y)
            total = total + gc.mul(cfg.energy_weight, l_ec)
            extra["l_ec"] = l_ec.item()
        gc.backward(total)
        optimizer.step()
    optimizer.zero_grad()
    return l_m.item(), extra


def train(config: ExperimentConfig, dataset: Dataset, out_dir=None, progress: bool = False
          ) -> TrainResult:
    """Train on the seen classes, evaluating on seen-validation and unseen-test each epoch.

    With ``out_dir`` the epoch log (``train_log.csv``) and evaluation rows
    (``metrics.csv``) are written as training proceeds.
    """
    cfg = config if config.input_dim else config.replace(input_dim=dataset.input_dim)
    root = np.random.default_rng([cfg.seed, 1])
    split_rng, data_rng, sample_rng = (np.random.default_rng(s) for s in root.bit_generator.seed_seq.spawn(3))
    split = zsl_split(dataset, cfg.train_fraction)
    split = hold_out_validation(split, dataset.labels, cfg.val_fraction, split_rng)
    check_disjoint(split.train_classes, split.test_classes)

    model = ZslModel(cfg, split.train_classes)
    optimizer = model.optimizer()
    sampler = model.sampler()
    mode = cfg.mode
    schedule = None
    if mode in ("soft_adv", "adapt_adv"):
        schedule = AdversarialSchedule(cfg.lambda0, cfg.l_thresh, mode)
        schedule.start(model.n_classes)

    result = TrainResult(model, split)
    columns = log_columns(mode)
    log_path = metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        metrics_path = os.path.join(out_dir, "metrics.csv")
        for p in (log_path, metrics_path):
            if os.path.exists(p):
                os.remove(p)
        with open(log_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(columns)

    X, Y = dataset.samples, dataset.labels
    for epoch in range(1, cfg.epochs + 1):
        l_m_sum, l_c_sum, l_ec_sum, steps = 0.0, 0.0, 0.0, 0
        lam_used = schedule.current if schedule is not None else cfg.energy_weight
        batches = balanced_batches(split.train_idx, Y, cfg.batch_size, cfg.samples_per_class,
                                   data_rng)
        for step, idx in enumerate(batches):
            x, y = Tensor(X[idx]), Y[idx]
            try:
                if mode == "adapt_adv":
                    res = train_step_adversarial(model, optimizer, x, y, sampler, schedule,
                                                 sample_rng)
                    l_m, extra = res.l_m, {"l_c": res.l_c}
                else:
                    out = _step(mode, model, optimizer, x, y, sampler, schedule, cfg, sample_rng)
                    if out is None:
                        continue
                    l_m, extra = out
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at epoch {epoch}, step {step}: {exc}",
                                      epoch=epoch, step=step) from exc
            if not math.isfinite(l_m):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}",
                                      epoch=epoch, step=step)
            l_m_sum += l_m
            l_c_sum += extra.get("l_c", 0.0)
            l_ec_sum += extra.get("l_ec", 0.0)
            steps += 1

        steps = max(steps, 1)
        row = {"epoch": epoch, "l_m": l_m_sum / steps}
        if "l_c" in columns:
            row["l_c"] = l_c_sum / steps
        if "l_ec" in columns:
            row["l_ec"] = l_ec_sum / steps
        if "lambda" in columns:
            row["lambda"] = lam_used
        if mode == "adapt_adv":
            row["lambda_next"] = schedule.update(row["l_c"])
        result.epoch_log.append(row)
        if log_path:
            with open(log_path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [row[c] if c == "epoch" else repr(float(row[c])) for c in columns])

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            reports = [evaluate(model, dataset, split.test_idx, cfg.ks, split_id="unseen",
                                epoch=epoch)]
            if split.val_idx.size > max(cfg.ks):
                reports.append(evaluate(model, dataset, split.val_idx, cfg.ks,
                                        split_id="seen_val", epoch=epoch, check_unseen=False))
            for rep in reports:
                result.reports.append(rep)
                if metrics_path:
                    rep.append_csv(metrics_path)
            if progress:
                r = reports[0]
                log.info("epoch %d l_m=%.4f unseen R@1=%.3f NMI=%.3f", epoch, row["l_m"],
                         r.recall_at.get(1, float("nan")), r.nmi)
    return result


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]
