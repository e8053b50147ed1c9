"""Simulating the synthetic-data content gap and its guidance remedies.

The package has three layers: a dataset simulator whose knobs control how a
synthetic clone diverges from the real mixture, the two training remedies
(distance-distribution regularization toward a frozen prior model, and
conflict-aware gradient projection against real-batch gradients), and the
diagnostic battery that measures the gap and the remedies' effect.
"""

from .datagen import (
    GapKnobs,
    LabeledDataset,
    MixtureSpec,
    Mode,
    concat_datasets,
    default_spec,
    load_dataset,
    make_synthetic_clone,
    rejection_sample,
    sample_mixture,
    save_dataset,
    split_train_val,
)
from .diagnostics import (
    LossProfile,
    cross_eval,
    mode_coverage,
    sample_losses,
    split_by_loss,
)
from .guidance import (
    PgConfig,
    RgConfig,
    combine_gradients,
    pairwise_distance,
    pg_feature_grad,
    pg_loss,
    project_gradient,
)
from .model import (
    MlpModel,
    backward,
    evaluate,
    flatten_params,
    forward,
    init_model,
    load_model,
    pretrain,
    save_model,
    sgd_step,
    unflatten_params,
)
from .numcore import cross_entropy, finite_diff_grad, matmul, row_softmax
from .trainer import (
    ExperimentReport,
    LossSplitResult,
    ObservationResult,
    TrainConfig,
    World,
    build_world,
    run_loss_split_augmentation,
    run_low_shot,
    run_observation_battery,
    run_zero_shot,
    run_zero_shot_tuned,
    train,
)

__version__ = "0.1.0"
