"""Desk-scale continual semantic segmentation laboratory.

Synthetic per-pixel benchmarks, a small MLP segmenter with a growing
classifier bank, incremental training strategies (fine-tuning, frozen
backbones, frozen classifiers, pre-allocated future classifiers, joint
upper bound), linear probing of frozen representations, and classifier
drift measurement via prototype-weight cosine structure.
"""

from .datagen import (
    IGNORE,
    ClassSchedule,
    Dataset,
    FeatureGrid,
    GridCollection,
    SynthParams,
    TaskStream,
    build_schedule,
    generate_dataset,
    load_cssf,
    make_task_stream,
    relabel,
    save_cssf,
)
from .errors import CssLabError
from .metrics import (
    CosMatrix,
    MdRecord,
    MetricsReport,
    class_prototypes,
    confusion,
    cos_matrix,
    evaluate_observed,
    md_trajectory,
    miou_groups,
    moving_distance,
)
from .model import (
    Dims,
    Hyper,
    SegModel,
    count_trainable,
    embed,
    expand_classifier,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grads,
    poly_lr,
    preallocate_future,
    save_checkpoint,
    sgd_step,
)
from .probing import ProbeHead, probing_eval, train_probe
from .rng import RngStream
from .trainer import (
    ExperimentConfig,
    ExperimentLog,
    config_from_text,
    freeze_plan,
    load_config,
    run_experiment,
    run_step,
)

__version__ = "0.1.0"
