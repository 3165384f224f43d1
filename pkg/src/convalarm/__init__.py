"""Supervised anomaly detection from stacked autoencoder activations.

A convolutional autoencoder (the *target* network) reconstructs inputs while
an auxiliary CNN (the *alarm* network) classifies each sample as anomalous
from the target's pooled, channel-stacked layer activations.  Both are
trained jointly on a combined loss whose reconstruction term is masked out
for anomalous samples.
"""

from .tensor import (
    BCE_EPS,
    ShapeError,
    Tape,
    Tensor,
    backward,
    bce,
    clamp,
    elementwise,
    elu,
    exp,
    flatten,
    linear,
    log,
    mean_all,
    mean_axes,
    mse,
    per_sample_mse,
    relu,
    reshape,
    reshape_split_stack,
    sigmoid,
    slice_cols,
    sub,
    sum_all,
    sum_axes,
    add,
    mul,
    neg,
)
from .convops import (
    adaptive_avg_pool,
    adaptive_max_pool,
    concat_channels,
    conv1d,
    conv2d,
    conv_transpose1d,
    conv_transpose2d,
)
from .networks import (
    ActivationBundle,
    AlarmConfig,
    BuildError,
    ImageInput,
    ModelBundle,
    TabularInput,
    TargetConfig,
    alarm_forward,
    build_model,
    build_target_image,
    build_target_tabular,
    forward_with_taps,
    score,
    stack_activations,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DataError,
    Dataset,
    NormalizationRecord,
    dedup,
    load_csv,
    load_idx,
    normalize,
    synth_digit_images,
    synth_two_gaussian,
)
from .training import (
    Adam,
    DivergenceError,
    FitResult,
    SplitDataset,
    TrainConfig,
    combined_loss,
    fit,
    make_one_vs_all,
    stratified_split,
    stratified_subset,
)
from .evaluation import (
    EvalReport,
    ExperimentSpec,
    ScoreSet,
    baseline_recon_score,
    render_report,
    render_reports,
    roc_auc,
    run_experiment,
)
from .gradcheck import run_gradcheck

__version__ = "0.1.0"
