"""Deterministic simulator of real and synthetic-clone feature datasets.

Each class is a Gaussian mixture whose modes can be flagged rare. A synthetic
clone resamples the mixture after shrinking the rare-mode weights (content
gap), applying an affine offset/scale to all features (appearance gap), and
corrupting a fraction of rows with wide Gaussian noise (quality gap). Every
generator is a pure function of (spec, knobs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import MlpModel, forward
from .numcore import row_softmax

SOURCES = ("Real", "Synthetic", "Mixed")


@dataclass(frozen=True)
class Mode:
    """One Gaussian component: isotropic with the given scalar stdev."""

    mean: np.ndarray
    stdev: float
    weight: float
    rare: bool = False


@dataclass(frozen=True)
class MixtureSpec:
    """Per-class Gaussian mixtures over a shared feature space."""

    feature_dim: int
    class_modes: tuple[tuple[Mode, ...], ...]
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not self.class_modes:
            raise ValueError("spec needs at least one class")
        for c, modes in enumerate(self.class_modes):
            if not modes:
                raise ValueError(f"class {c} has no modes")
            total = sum(m.weight for m in modes)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"class {c} mode weights sum to {total}, expected 1")
            for m in modes:
                if m.stdev <= 0:
                    raise ValueError(f"class {c} has a mode with stdev {m.stdev}")
                if m.weight <= 0:
                    raise ValueError(f"class {c} has a mode with weight {m.weight}")
                if np.asarray(m.mean).shape != (self.feature_dim,):
                    raise ValueError(
                        f"class {c} mode mean shape {np.asarray(m.mean).shape} "
                        f"!= ({self.feature_dim},)"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.class_modes)

    def global_mode_id(self, class_idx: int, mode_idx: int) -> int:
        """Stable id of a mode across the whole spec (class-major order)."""
        return sum(len(m) for m in self.class_modes[:class_idx]) + mode_idx

    def rare_mode_ids(self) -> frozenset[int]:
        ids = []
        for c, modes in enumerate(self.class_modes):
            for k, m in enumerate(modes):
                if m.rare:
                    ids.append(self.global_mode_id(c, k))
        return frozenset(ids)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature rows with class labels, a source tag, and generating mode ids.

    mode_ids are -1 where the generating mode is unknown (e.g. loaded data
    without provenance).
    """

    features: np.ndarray
    labels: np.ndarray
    source: str
    mode_ids: np.ndarray = field(default=None)  # type: ignore[assignment]
    num_classes: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        mode_ids = self.mode_ids
        if mode_ids is None:
            mode_ids = np.full(feats.shape[0], -1, dtype=np.int64)
        mode_ids = np.asarray(mode_ids, dtype=np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mode_ids", mode_ids)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],) or mode_ids.shape != (feats.shape[0],):
            raise ValueError("features, labels and mode_ids disagree in length")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        n_classes = self.num_classes if self.num_classes else int(labels.max()) + 1 if labels.size else 0
        object.__setattr__(self, "num_classes", n_classes)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels outside [0, {n_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.source, self.mode_ids[idx], self.num_classes
        )


def concat_datasets(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Stack two datasets; the source tag becomes Mixed if they disagree."""
    if a.feature_dim != b.feature_dim:
        raise ValueError(f"feature dims disagree: {a.feature_dim} vs {b.feature_dim}")
    source = a.source if a.source == b.source else "Mixed"
    return LabeledDataset(
        np.vstack([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        source,
        np.concatenate([a.mode_ids, b.mode_ids]),
        max(a.num_classes, b.num_classes),
    )


@dataclass(frozen=True)
class GapKnobs:
    """Independent axes of the gap between a clone and the data it mimics.

    content_drop removes that fraction of every rare mode's weight (1 drops
    rare modes entirely); appearance offset/scale apply x*scale + offset to
    all features (scalars broadcast over the feature axis); quality_rate is
    the fraction of rows hit by additive stdev-5 Gaussian noise.
    """

    content_drop: float = 0.0
    appearance_offset: float | np.ndarray = 0.0
    appearance_scale: float | np.ndarray = 1.0
    quality_rate: float = 0.0

    QUALITY_NOISE_STDEV = 5.0

    def __post_init__(self):
        if not 0.0 <= self.content_drop <= 1.0:
            raise ValueError(f"content_drop must be in [0, 1], got {self.content_drop}")
        if not 0.0 <= self.quality_rate <= 1.0:
            raise ValueError(f"quality_rate must be in [0, 1], got {self.quality_rate}")


def _sample_spec(
    spec: MixtureSpec,
    n_per_class: int,
    rng: np.random.Generator,
    source: str,
    mode_id_map: list[list[int]] | None = None,
) -> LabeledDataset:
    # mode_id_map lets a reduced spec report ids in the original spec's numbering
    feats = []
    labels = []
    mode_ids = []
    for c, modes in enumerate(spec.class_modes):
        weights = np.array([m.weight for m in modes])
        counts = rng.multinomial(n_per_class, weights)
        for k, (mode, cnt) in enumerate(zip(modes, counts)):
            if cnt == 0:
                continue
            gid = mode_id_map[c][k] if mode_id_map is not None else spec.global_mode_id(c, k)
            mean = np.asarray(mode.mean, dtype=np.float64)
            feats.append(mean + mode.stdev * rng.standard_normal((cnt, spec.feature_dim)))
            labels.append(np.full(cnt, c, dtype=np.int64))
            mode_ids.append(np.full(cnt, gid, dtype=np.int64))
    return LabeledDataset(
        np.vstack(feats), np.concatenate(labels), source, np.concatenate(mode_ids), spec.num_classes
    )


def sample_mixture(spec: MixtureSpec, n_per_class: int, seed: int) -> LabeledDataset:
    """Draw n_per_class samples from every class of the mixture."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    return _sample_spec(spec, n_per_class, np.random.default_rng(seed), "Real")


def _dropped(spec: MixtureSpec, content_drop: float) -> tuple[MixtureSpec, list[list[int]]]:
    """Shrink rare-mode weights and renormalize per class.

    Returns the reduced spec plus a per-class map from its mode positions to
    the original spec's global mode ids (modes whose weight hits zero vanish).
    """
    new_classes = []
    id_map = []
    for c, modes in enumerate(spec.class_modes):
        raw = [m.weight * (1.0 - content_drop) if m.rare else m.weight for m in modes]
        total = sum(raw)
        if total <= 0.0:
            raise ValueError(f"class {c}: content_drop={content_drop} removes all mode weight")
        survivors = []
        ids = []
        for k, (m, w) in enumerate(zip(modes, raw)):
            if w > 0.0:
                survivors.append(replace(m, weight=w / total))
                ids.append(spec.global_mode_id(c, k))
        new_classes.append(tuple(survivors))
        id_map.append(ids)
    return replace(spec, class_modes=tuple(new_classes)), id_map


def make_synthetic_clone(
    spec: MixtureSpec, knobs: GapKnobs, n_per_class: int, seed: int
) -> LabeledDataset:
    """Sample a clone of the mixture with the gap knobs applied.

    Rare modes lose content_drop of their weight before sampling; the
    appearance shift is applied affinely to every row; quality corruption
    adds wide Gaussian noise to a random quality_rate fraction of rows.
    Mode ids refer to the original spec's numbering.
    """
    rng = np.random.default_rng(seed)
    reduced, id_map = _dropped(spec, knobs.content_drop)
    ds = _sample_spec(reduced, n_per_class, rng, "Synthetic", mode_id_map=id_map)
    scale = np.broadcast_to(np.asarray(knobs.appearance_scale, dtype=np.float64), (spec.feature_dim,))
    offset = np.broadcast_to(np.asarray(knobs.appearance_offset, dtype=np.float64), (spec.feature_dim,))
    feats = ds.features * scale + offset
    if knobs.quality_rate > 0.0:
        hit = rng.random(ds.n) < knobs.quality_rate
        noise = rng.standard_normal((int(hit.sum()), spec.feature_dim)) * GapKnobs.QUALITY_NOISE_STDEV
        feats[hit] += noise
    return LabeledDataset(feats, ds.labels, "Synthetic", ds.mode_ids, ds.num_classes)


def rejection_sample(ds: LabeledDataset, oracle: MlpModel, threshold: float) -> LabeledDataset:
    """Keep rows the oracle is confident about and adopt its labels.

    A row survives when the oracle's max softmax probability exceeds the
    threshold; surviving rows are relabeled with the oracle argmax.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if oracle.num_classes != ds.num_classes:
        raise ValueError(
            f"oracle predicts {oracle.num_classes} classes, dataset has {ds.num_classes}"
        )
    _, logits = forward(oracle, ds.features)
    probs = row_softmax(logits, 1.0)
    keep = probs.max(axis=1) > threshold
    if not keep.any():
        raise ValueError(
            f"rejection sampling at threshold {threshold} kept no samples; lower the threshold"
        )
    return LabeledDataset(
        ds.features[keep],
        np.argmax(probs[keep], axis=1).astype(np.int64),
        ds.source,
        ds.mode_ids[keep],
        ds.num_classes,
    )


def split_train_val(
    ds: LabeledDataset, val_per_class: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class random split: val gets exactly val_per_class rows per class."""
    if val_per_class < 0:
        raise ValueError(f"val_per_class must be >= 0, got {val_per_class}")
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(ds.num_classes):
        idx_c = np.flatnonzero(ds.labels == c)
        if val_per_class > 0 and len(idx_c) <= val_per_class:
            raise ValueError(
                f"class {c} has {len(idx_c)} samples, need more than val_per_class={val_per_class}"
            )
        perm = rng.permutation(idx_c)
        val_idx.append(perm[:val_per_class])
    val_mask = np.zeros(ds.n, dtype=bool)
    if val_idx:
        val_mask[np.concatenate(val_idx).astype(np.int64)] = True
    return ds.subset(np.flatnonzero(~val_mask)), ds.subset(np.flatnonzero(val_mask))


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write the dataset file: a header line, then one sample per line.

    Header: ``d=<int> C=<int> source=<Real|Synthetic>``. Each row holds the d
    feature values at full round-trip precision, the label, and the mode id.
    """
    if ds.source not in ("Real", "Synthetic"):
        raise ValueError(f"dataset files carry source Real or Synthetic, not {ds.source!r}")
    lines = [f"d={ds.feature_dim} C={ds.num_classes} source={ds.source}"]
    for i in range(ds.n):
        vals = " ".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{vals} {ds.labels[i]} {ds.mode_ids[i]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> LabeledDataset:
    """Read a dataset file written by save_dataset."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = lines[0].split()
    try:
        fields = dict(part.split("=", 1) for part in header)
        d = int(fields["d"])
        num_classes = int(fields["C"])
        source = fields["source"]
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: line 1: malformed header: {lines[0]!r}") from exc
    if source not in ("Real", "Synthetic"):
        raise ValueError(f"{path}: line 1: source must be Real or Synthetic, got {source!r}")
    feats = np.empty((len(lines) - 1, d))
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    mode_ids = np.empty(len(lines) - 1, dtype=np.int64)
    for ln, text in enumerate(lines[1:], start=2):
        parts = text.split()
        if len(parts) != d + 2:
            raise ValueError(f"{path}: line {ln}: expected {d + 2} fields, got {len(parts)}")
        try:
            row = np.array([float(v) for v in parts[:d]])
            labels[ln - 2] = int(parts[d])
            mode_ids[ln - 2] = int(parts[d + 1])
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: unparseable value") from exc
        if not np.isfinite(row).all():
            raise ValueError(f"{path}: line {ln}: non-finite feature value")
        feats[ln - 2] = row
    if feats.shape[0] == 0:
        raise ValueError(f"{path}: dataset file has a header but no samples")
    return LabeledDataset(feats, labels, source, mode_ids, num_classes)


def default_spec(
    seed: int = 0,
    *,
    feature_dim: int = 16,
    num_classes: int = 4,
    rare_weight: float = 0.2,
    mode_stdev: float = 1.0,
    anchor_radius: float = 6.0,
) -> MixtureSpec:
    """Desk-scale mixture: per class two common modes and one rare mode.

    Class anchors are random directions at the given radius. The two common
    modes sit symmetrically around the anchor. The rare mode of class c sits
    between the anchors of c and the next class, lifted sideways, so that a
    model never shown the rare mode tends to misread it while a model trained
    on it can still separate it.
    """
    if not 0.0 < rare_weight < 1.0:
        raise ValueError(f"rare_weight must be in (0, 1), got {rare_weight}")
    rng = np.random.default_rng([seed, 2718])

    def unit(v):
        return v / np.linalg.norm(v)

    anchors = [anchor_radius * unit(rng.standard_normal(feature_dim)) for _ in range(num_classes)]
    common_w = (1.0 - rare_weight) / 2.0
    classes = []
    for c in range(num_classes):
        span = unit(rng.standard_normal(feature_dim))
        lift = unit(rng.standard_normal(feature_dim))
        mid = 0.5 * (anchors[c] + anchors[(c + 1) % num_classes])
        classes.append(
            (
                Mode(anchors[c] + 1.5 * mode_stdev * span, mode_stdev, common_w, rare=False),
                Mode(anchors[c] - 1.5 * mode_stdev * span, mode_stdev, common_w, rare=False),
                Mode(mid + 1.5 * mode_stdev * lift, mode_stdev, rare_weight, rare=True),
            )
        )
    return MixtureSpec(feature_dim, tuple(classes), seed=seed)
