"""Training loops and experiment presets.

The core loop composes the classification loss with the optional
distance-distribution regularizer (applied to synthetic batches only) and,
when a small real set rides along, the gradient-surgery step: project the
synthetic-batch gradient to be at most perpendicular to the real-batch
gradient, then combine the two with the configured weights.

When both sources are present but no surgery is configured, the loop falls
back to naive mixing: one shuffled pass per epoch over the concatenated sets,
which is the data-augmentation baseline.

Presets wire the loop into full pipelines: a frozen prior model is trained on
the unmodified mixture, the synthetic clone is filtered by confidence-based
rejection sampling against that prior, and the trainee is fit and scored on
real held-out data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datagen import (
    GapKnobs,
    LabeledDataset,
    MixtureSpec,
    concat_datasets,
    make_synthetic_clone,
    rejection_sample,
    sample_mixture,
    split_train_val,
)
from .diagnostics import (
    CrossEvalTable,
    LossProfile,
    cross_eval,
    mode_coverage,
    sample_losses,
    split_by_loss,
)
from .guidance import PgConfig, RgConfig, combine_gradients, pg_feature_grad, project_gradient
from .model import MlpModel, backward, evaluate, forward, init_model, pretrain, sgd_step

INIT_SCHEMES = ("random", "from-prior-weights")

# desk-scale defaults
DEFAULT_MODEL_DIMS = (16, 32, 16, 4)
DEFAULT_PRIOR_DIMS = (16, 24, 12, 4)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0
    init: str = "random"
    pg: PgConfig | None = None
    rg: RgConfig | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init {self.init!r}, expected one of {INIT_SCHEMES}")
        if self.pg is not None and self.pg.similarity == "KL" and self.batch_size < 3:
            raise ValueError("KL distance regularization needs batch_size >= 3")


@dataclass
class ExperimentReport:
    """Per-epoch curves plus final held-out accuracy for one training run."""

    train_acc: list[float]
    val_acc: list[float]
    val_ce: list[float]
    ce_loss: list[float]
    pg_loss: list[float]
    proj_frac: list[float]
    final_test_acc: float | None
    final_val_acc: float | None
    seed: int
    config: dict[str, str]
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.train_acc)


@dataclass(frozen=True)
class StepInfo:
    """Snapshot of one update step, handed to an optional observer."""

    epoch: int
    step: int
    g_f: np.ndarray | None
    g_r: np.ndarray | None
    g_f_new: np.ndarray | None
    g_update: np.ndarray
    projection_applied: bool


class _Cycler:
    """Reshuffling index stream over a small set; wraps across epochs."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        chunks = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            chunks.append(self.order[self.pos : self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(chunks)


def _accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    _, logits = forward(model, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _mean_ce(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    _, logits = forward(model, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float((lse - shifted[np.arange(len(y)), y]).mean())


def _config_echo(cfg: TrainConfig) -> dict[str, str]:
    echo = {
        "epochs": str(cfg.epochs),
        "batch_size": str(cfg.batch_size),
        "lr": repr(cfg.lr),
        "seed": str(cfg.seed),
        "init": cfg.init,
        "pg": "off" if cfg.pg is None else (
            f"{cfg.pg.metric}/{cfg.pg.similarity}/t={cfg.pg.temperature!r}/l3={cfg.pg.lambda3!r}"
        ),
        "rg": "off" if cfg.rg is None else (
            f"l1={cfg.rg.lambda1!r}/l2={cfg.rg.lambda2!r}/project={int(cfg.rg.project)}"
        ),
        "eval_every": str(cfg.eval_every),
    }
    return echo


def config_hash(config: dict[str, str]) -> str:
    canon = ";".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def train(
    model: MlpModel,
    real_train: LabeledDataset | None,
    syn_train: LabeledDataset | None,
    m_p: MlpModel | None,
    val: LabeledDataset | None,
    test: LabeledDataset | None,
    cfg: TrainConfig,
    on_step: Callable[[StepInfo], None] | None = None,
) -> tuple[MlpModel, ExperimentReport]:
    """Fit the model and record per-epoch curves.

    Update rule per step, depending on what is present:
      synthetic only      g_update = g_f (task gradient plus the feature
                          regularizer's contribution when configured)
      real only           g_update = g_r
      both + rg           g_f from a synthetic batch, g_r from a cycled real
                          batch; g_f is projected when it opposes g_r, then
                          g_update = lambda1 * g_r + lambda2 * g_f_new
      both, no rg         naive mixing: plain task loss over the shuffled
                          concatenation of the two sets

    The feature regularizer applies to synthetic batches only and requires
    the frozen prior model; the run is deterministic given the seed.
    """
    if real_train is None and syn_train is None:
        raise ValueError("need at least one of real_train / syn_train")
    if (m_p is None) != (cfg.pg is None):
        raise ValueError("m_p must be provided exactly when pg is configured")
    if cfg.pg is not None and syn_train is None:
        raise ValueError("the feature regularizer applies to synthetic batches; none were given")
    if cfg.pg is not None and real_train is not None and cfg.rg is None:
        raise ValueError("pg with naive mixing is unsupported; configure rg or drop one source")

    mixing = real_train is not None and syn_train is not None and cfg.rg is None
    rg_mode = real_train is not None and syn_train is not None and cfg.rg is not None

    rng_syn = np.random.default_rng([cfg.seed, 11])
    rng_real = np.random.default_rng([cfg.seed, 12])
    rng_mix = np.random.default_rng([cfg.seed, 13])

    if mixing:
        union = concat_datasets(real_train, syn_train)
        prim_x, prim_y = union.features, union.labels
        prim_rng = rng_mix
    elif syn_train is not None:
        prim_x, prim_y = syn_train.features, syn_train.labels
        prim_rng = rng_syn
    else:
        prim_x, prim_y = real_train.features, real_train.labels
        prim_rng = rng_real

    if rg_mode:
        cycler = _Cycler(real_train.n, rng_real)
        real_x, real_y = real_train.features, real_train.labels
        real_batch = min(cfg.batch_size, real_train.n)

    # training-accuracy curve is measured on everything the run trains on
    if real_train is not None and syn_train is not None:
        eval_union = concat_datasets(real_train, syn_train)
        train_x, train_y = eval_union.features, eval_union.labels
    else:
        train_x, train_y = prim_x, prim_y

    n = prim_x.shape[0]
    report = ExperimentReport(
        train_acc=[], val_acc=[], val_ce=[], ce_loss=[], pg_loss=[], proj_frac=[],
        final_test_acc=None, final_val_acc=None, seed=cfg.seed, config=_config_echo(cfg),
    )

    for epoch in range(cfg.epochs):
        order = prim_rng.permutation(n)
        ce_sum = 0.0
        pg_sum = 0.0
        proj_count = 0
        steps = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb, yb = prim_x[idx], prim_y[idx]

            extra = None
            pg_val = 0.0
            if cfg.pg is not None and len(idx) >= (3 if cfg.pg.similarity == "KL" else 2):
                f_u, _ = forward(model, xb)
                f_p, _ = forward(m_p, xb)
                pg_val, extra = pg_feature_grad(f_p, f_u, cfg.pg)
            ce, g_f = backward(model, xb, yb, extra)

            projection_applied = False
            g_r = g_f_new = None
            if rg_mode:
                ridx = cycler.take(real_batch)
                _, g_r = backward(model, real_x[ridx], real_y[ridx])
                if cfg.rg.project:
                    projection_applied = float(g_f @ g_r) < 0.0
                    g_f_new = project_gradient(g_f, g_r)
                    margin = float(g_f_new @ g_r)
                    bound = -1e-9 * float(np.linalg.norm(g_f_new)) * float(np.linalg.norm(g_r))
                    if margin < bound:
                        raise RuntimeError(
                            f"projected gradient opposes the real gradient: {margin} < {bound}"
                        )
                else:
                    g_f_new = g_f
                g_update = combine_gradients(g_r, g_f_new, cfg.rg)
            else:
                g_update = g_f

            if on_step is not None:
                on_step(StepInfo(epoch, steps, g_f, g_r, g_f_new, g_update, projection_applied))
            model = sgd_step(model, g_update, cfg.lr)
            ce_sum += ce
            pg_sum += pg_val
            proj_count += int(projection_applied)
            steps += 1

        fresh = epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        if fresh or not report.train_acc:
            train_acc = _accuracy(model, train_x, train_y)
            val_acc = _accuracy(model, val.features, val.labels) if val is not None else float("nan")
            val_ce = _mean_ce(model, val.features, val.labels) if val is not None else float("nan")
        else:
            train_acc = report.train_acc[-1]
            val_acc = report.val_acc[-1]
            val_ce = report.val_ce[-1]
        report.train_acc.append(train_acc)
        report.val_acc.append(val_acc)
        report.val_ce.append(val_ce)
        report.ce_loss.append(ce_sum / steps)
        report.pg_loss.append(pg_sum / steps)
        report.proj_frac.append(proj_count / steps)

    if test is not None:
        report.final_test_acc = evaluate(model, test)
    if val is not None:
        report.final_val_acc = report.val_acc[-1]
    return model, report


# ---------------------------------------------------------------------------
# experiment pipelines


def _derive_seeds(seed: int) -> dict[str, int]:
    names = (
        "prior_data", "real_data", "syn_data", "split",
        "test_real", "test_syn", "pretrain", "init", "shots",
    )
    children = np.random.SeedSequence([seed, 4057]).spawn(len(names))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(names, children)}


@dataclass
class World:
    """All datasets and the frozen prior model for one experiment seed."""

    m_p: MlpModel
    real_train: LabeledDataset
    real_val: LabeledDataset
    real_test: LabeledDataset
    syn_train: LabeledDataset
    syn_test: LabeledDataset


def build_world(
    spec: MixtureSpec,
    knobs: GapKnobs,
    seed: int,
    *,
    train_per_class: int = 500,
    val_per_class: int = 100,
    test_per_class: int = 250,
    prior_per_class: int = 500,
    syn_per_class: int = 500,
    rejection_threshold: float = 0.8,
    prior_epochs: int = 40,
    prior_dims=None,
    batch_size: int = 32,
    lr: float = 0.05,
) -> World:
    """Generate the datasets and prior model every preset starts from.

    The prior model is trained on a fresh draw of the unmodified mixture and
    frozen; it also acts as the labeling oracle for rejection sampling of the
    synthetic clone, mirroring the use of an off-the-shelf classifier.
    """
    sd = _derive_seeds(seed)
    if prior_dims is None:
        prior_dims = (spec.feature_dim,) + DEFAULT_PRIOR_DIMS[1:-1] + (spec.num_classes,)
    prior_ds = sample_mixture(spec, prior_per_class, sd["prior_data"])
    m_p = pretrain(
        prior_ds, prior_dims, epochs=prior_epochs, batch_size=batch_size, lr=lr, seed=sd["pretrain"]
    )
    real_pool = sample_mixture(spec, train_per_class + val_per_class, sd["real_data"])
    real_train, real_val = split_train_val(real_pool, val_per_class, sd["split"])
    real_test = sample_mixture(spec, test_per_class, sd["test_real"])
    syn_train = rejection_sample(
        make_synthetic_clone(spec, knobs, syn_per_class, sd["syn_data"]), m_p, rejection_threshold
    )
    syn_test = rejection_sample(
        make_synthetic_clone(spec, knobs, test_per_class, sd["test_syn"]), m_p, rejection_threshold
    )
    return World(m_p, real_train, real_val, real_test, syn_train, syn_test)


def _fresh_model(spec: MixtureSpec, cfg: TrainConfig, world: World, model_dims=None) -> MlpModel:
    if model_dims is None:
        model_dims = (spec.feature_dim,) + DEFAULT_MODEL_DIMS[1:-1] + (spec.num_classes,)
    if cfg.init == "from-prior-weights":
        if tuple(model_dims) != world.m_p.layer_dims:
            raise ValueError(
                f"from-prior-weights needs matching dims: {tuple(model_dims)} vs {world.m_p.layer_dims}"
            )
        return replace(world.m_p, frozen=False)
    return init_model(model_dims, seed=_derive_seeds(cfg.seed)["init"])


def run_zero_shot(
    spec: MixtureSpec, knobs: GapKnobs, cfg: TrainConfig, *, world: World | None = None, **world_kw
) -> ExperimentReport:
    """Train on the synthetic clone only and score on real held-out data.

    The regularizer toward the prior model is active iff cfg.pg is set. The
    report's extras carry the mode coverage of the synthetic training set.
    """
    if world is None:
        world = build_world(spec, knobs, cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr, **world_kw)
    m_u = _fresh_model(spec, cfg, world)
    cfg_run = replace(cfg, rg=None)
    _, report = train(
        m_u, None, world.syn_train, world.m_p if cfg.pg else None,
        world.real_val, world.real_test, cfg_run,
    )
    report.extras["mode_coverage"] = mode_coverage(world.real_train, world.syn_train)
    report.extras["syn_train_size"] = float(world.syn_train.n)
    return report


def run_zero_shot_tuned(
    spec: MixtureSpec,
    knobs: GapKnobs,
    cfg: TrainConfig,
    lambda3_grid=(0.01, 0.1, 1.0),
    *,
    world: World | None = None,
    **world_kw,
) -> tuple[ExperimentReport, dict[float, ExperimentReport]]:
    """Zero-shot with the regularizer strength picked on validation accuracy.

    Runs the grid, keeps the report with the best final validation accuracy
    (ties go to the smaller strength), and returns it plus all grid reports.
    """
    if cfg.pg is None:
        raise ValueError("tuning lambda3 requires a pg configuration")
    if world is None:
        world = build_world(spec, knobs, cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr, **world_kw)
    reports = {}
    for lam in lambda3_grid:
        cfg_l = replace(cfg, pg=replace(cfg.pg, lambda3=float(lam)))
        reports[float(lam)] = run_zero_shot(spec, knobs, cfg_l, world=world)
    best = max(sorted(reports), key=lambda lam: reports[lam].final_val_acc)
    chosen = reports[best]
    chosen.extras["lambda3"] = best
    return chosen, reports


def run_low_shot(
    spec: MixtureSpec,
    knobs: GapKnobs,
    real_shots_per_class: int,
    cfg: TrainConfig,
    *,
    world: World | None = None,
    **world_kw,
) -> ExperimentReport:
    """Augment a handful of real samples per class with the synthetic clone.

    Gradient surgery runs when cfg.rg is set; otherwise the two sets are
    naively mixed. The report's extras carry the synthetic-to-real ratio.
    """
    if real_shots_per_class < 1:
        raise ValueError("real_shots_per_class must be >= 1; use run_zero_shot for the 0-shot case")
    if world is None:
        world = build_world(spec, knobs, cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr, **world_kw)
    rng = np.random.default_rng(_derive_seeds(cfg.seed)["shots"])
    picks = []
    for c in range(world.real_train.num_classes):
        idx_c = np.flatnonzero(world.real_train.labels == c)
        if len(idx_c) < real_shots_per_class:
            raise ValueError(f"class {c} has only {len(idx_c)} real samples for {real_shots_per_class} shots")
        picks.append(rng.choice(idx_c, size=real_shots_per_class, replace=False))
    real_small = world.real_train.subset(np.sort(np.concatenate(picks)))
    m_u = _fresh_model(spec, cfg, world)
    _, report = train(
        m_u, real_small, world.syn_train, world.m_p if cfg.pg else None,
        world.real_val, world.real_test, cfg,
    )
    report.extras["syn_to_real_ratio"] = world.syn_train.n / real_small.n
    report.extras["real_shots_per_class"] = float(real_shots_per_class)
    return report


@dataclass
class LossSplitResult:
    """Loss-sorted augmentation study: real-only baseline and the two halves."""

    baseline: ExperimentReport
    low_half: ExperimentReport
    high_half: ExperimentReport


def run_loss_split_augmentation(
    spec: MixtureSpec, knobs: GapKnobs, cfg: TrainConfig, *, world: World | None = None, **world_kw
) -> LossSplitResult:
    """Score the clone with a real-trained classifier, split it at the median
    loss, and train one augmented classifier per half.

    All three runs are plain cross-entropy from the same initialisation.
    """
    if world is None:
        world = build_world(spec, knobs, cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr, **world_kw)
    plain = replace(cfg, pg=None, rg=None)
    model_real, baseline = train(
        _fresh_model(spec, plain, world), world.real_train, None, None,
        world.real_val, world.real_test, plain,
    )
    profile = sample_losses(model_real, world.syn_train)
    low, high = split_by_loss(world.syn_train, profile)
    _, low_report = train(
        _fresh_model(spec, plain, world), world.real_train, low, None,
        world.real_val, world.real_test, plain,
    )
    _, high_report = train(
        _fresh_model(spec, plain, world), world.real_train, high, None,
        world.real_val, world.real_test, plain,
    )
    low_report.extras["half"] = 0.0
    high_report.extras["half"] = 1.0
    return LossSplitResult(baseline, low_report, high_report)


@dataclass
class ObservationResult:
    """Output of the full diagnostic battery for one seed."""

    model_real: MlpModel
    model_syn: MlpModel
    real_report: ExperimentReport
    syn_report: ExperimentReport
    crosseval: CrossEvalTable
    syn_under_real: LossProfile
    real_under_syn: LossProfile
    coverage: float


def run_observation_battery(
    spec: MixtureSpec,
    knobs: GapKnobs,
    cfg: TrainConfig,
    *,
    world: World | None = None,
    coverage_radius: float = 3.0,
    **world_kw,
) -> ObservationResult:
    """Train one classifier per source and collect all diagnostic signals:
    the 2x2 cross-source accuracy table, both opposite-source loss profiles,
    the training curves, and the mode coverage of the synthetic set.
    """
    if world is None:
        world = build_world(spec, knobs, cfg.seed, batch_size=cfg.batch_size, lr=cfg.lr, **world_kw)
    plain = replace(cfg, pg=None, rg=None)
    model_real, real_report = train(
        _fresh_model(spec, plain, world), world.real_train, None, None,
        world.real_val, world.real_test, plain,
    )
    model_syn, syn_report = train(
        _fresh_model(spec, plain, world), None, world.syn_train, None,
        world.real_val, world.real_test, plain,
    )
    table = cross_eval(model_real, model_syn, world.real_test, world.syn_test)
    return ObservationResult(
        model_real=model_real,
        model_syn=model_syn,
        real_report=real_report,
        syn_report=syn_report,
        crosseval=table,
        syn_under_real=sample_losses(model_real, world.syn_train),
        real_under_syn=sample_losses(model_syn, world.real_train),
        coverage=mode_coverage(world.real_train, world.syn_train, coverage_radius),
    )


# ---------------------------------------------------------------------------
# report files


def write_report_csv(path, report: ExperimentReport) -> None:
    """report.csv: per-epoch train and val rows."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "accuracy", "ce_loss", "pg_loss", "rg_projection_applied_fraction"])
        for e in range(report.epochs):
            w.writerow([
                e, "train", repr(report.train_acc[e]), repr(report.ce_loss[e]),
                repr(report.pg_loss[e]), repr(report.proj_frac[e]),
            ])
            if not np.isnan(report.val_acc[e]):
                w.writerow([e, "val", repr(report.val_acc[e]), repr(report.val_ce[e]), "", ""])


def write_final_csv(path, report: ExperimentReport) -> None:
    """final.csv: one row with the config hash, seed, and test accuracy."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "seed", "test_accuracy"])
        w.writerow([config_hash(report.config), report.seed, repr(report.final_test_acc)])
