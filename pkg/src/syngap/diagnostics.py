"""Empirical probes of the gap between real and synthetic training data.

The battery covers: accuracy of each classifier on each source (the
asymmetric degradation), per-sample cross-entropy profiles under a classifier
trained on the opposite source, loss-sorted subset construction for
augmentation studies, and a recall-style mode-coverage score that exploits
the simulator's ground-truth mode ids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datagen import LabeledDataset
from .model import MlpModel, evaluate, forward

CrossEvalTable = dict[tuple[str, str], float]


@dataclass(frozen=True)
class LossProfile:
    """Per-sample cross-entropy losses plus a fixed-width histogram."""

    losses: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float


def cross_eval(
    model_real: MlpModel,
    model_syn: MlpModel,
    ds_real_test: LabeledDataset,
    ds_syn_test: LabeledDataset,
) -> CrossEvalTable:
    """Accuracy of both models on both test sources.

    Keys are (train_source, eval_source) with sources "Real"/"Synthetic".
    """
    return {
        ("Real", "Real"): evaluate(model_real, ds_real_test),
        ("Real", "Synthetic"): evaluate(model_real, ds_syn_test),
        ("Synthetic", "Real"): evaluate(model_syn, ds_real_test),
        ("Synthetic", "Synthetic"): evaluate(model_syn, ds_syn_test),
    }


def sample_losses(model: MlpModel, ds: LabeledDataset, bins: int = 50) -> LossProfile:
    """Cross-entropy loss of every sample under the model.

    The histogram uses fixed-width bins over [0, max(losses)].
    """
    if ds.n == 0:
        raise ValueError("cannot profile an empty dataset")
    _, logits = forward(model, ds.features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(ds.n), ds.labels]
    top = float(losses.max())
    counts, edges = np.histogram(losses, bins=bins, range=(0.0, top if top > 0.0 else 1.0))
    return LossProfile(
        losses=losses,
        bin_edges=edges,
        counts=counts,
        mean=float(losses.mean()),
        median=float(np.median(losses)),
    )


def split_by_loss(
    ds: LabeledDataset, profile: LossProfile
) -> tuple[LabeledDataset, LabeledDataset]:
    """Partition the dataset into its low-loss and high-loss halves.

    Samples are ordered by loss ascending (ties keep original order); the
    first ceil(n/2) form the low half. Each half preserves original row order.
    """
    if ds.n < 2:
        raise ValueError(f"need at least 2 samples to split, got {ds.n}")
    if profile.losses.shape != (ds.n,):
        raise ValueError("loss profile does not match the dataset length")
    order = np.argsort(profile.losses, kind="stable")
    cut = (ds.n + 1) // 2
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


def mode_coverage(
    real: LabeledDataset, syn: LabeledDataset, radius_multiplier: float = 3.0
) -> float:
    """Fraction of real modes with a synthetic sample near their centroid.

    A mode's empirical stdev is the RMS distance of its real samples from
    their centroid; the mode counts as covered when some synthetic sample
    lies within radius_multiplier times that stdev of the centroid.
    """
    if real.n == 0 or syn.n == 0:
        raise ValueError("both datasets must be nonempty")
    if real.feature_dim != syn.feature_dim:
        raise ValueError(f"feature dims disagree: {real.feature_dim} vs {syn.feature_dim}")
    if (real.mode_ids < 0).any():
        raise ValueError("real dataset lacks mode ids; coverage needs ground-truth modes")
    if np.isinf(radius_multiplier):
        return 1.0
    covered = 0
    mode_ids = np.unique(real.mode_ids)
    for mid in mode_ids:
        pts = real.features[real.mode_ids == mid]
        centroid = pts.mean(axis=0)
        rms = float(np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1))))
        dists = np.linalg.norm(syn.features - centroid, axis=1)
        if dists.min() <= radius_multiplier * rms:
            covered += 1
    return covered / len(mode_ids)


def write_losses_csv(path, ds: LabeledDataset, profile: LossProfile) -> None:
    """losses.csv: one row per sample (index, label, source, loss)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "source", "loss"])
        for i in range(ds.n):
            w.writerow([i, int(ds.labels[i]), ds.source, repr(float(profile.losses[i]))])


def write_crosseval_csv(path, table: CrossEvalTable) -> None:
    """crosseval.csv: one row per (train_source, eval_source) cell."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_source", "eval_source", "accuracy"])
        for (train_src, eval_src), acc in sorted(table.items()):
            w.writerow([train_src, eval_src, repr(float(acc))])


def write_coverage_csv(path, coverage: float, radius_multiplier: float) -> None:
    """coverage.csv: the single mode-coverage figure and its radius setting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius_multiplier", "coverage"])
        w.writerow([repr(float(radius_multiplier)), repr(float(coverage))])
