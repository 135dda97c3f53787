"""Source-modality to synthetic-CT translation with frozen-transformer fusion."""

from .backbone import (
    MODE_PRETRAINED,
    MODE_STANDIN,
    BackboneHandle,
    FeatureGrid,
    TapSpec,
    ViTGeometry,
    default_taps,
    extract_features,
    load_backbone,
    standin_geometry,
)
from .config import (
    BackboneConfig,
    DataConfig,
    RunConfig,
    load_run_config,
    load_split_datasets,
    make_backbone,
)
from .data import (
    PairedDataset,
    Volume,
    extract_slices,
    load_volume,
    normalize_volume,
    reassemble,
    save_volume,
    split_dataset,
)
from .evaluation import (
    EvalReport,
    MetricResult,
    ThresholdBandSegmenter,
    compare_reports,
    dice,
    evaluate_run,
    ms_ssim,
    paired_t_test,
    psnr,
    run_ablation,
    seg_score,
    translate_volume,
)
from .generator import VARIANTS, FusionGenerator, GeneratorConfig, build_generator
from .losses import LossBreakdown, LossConfig, l1_loss, mldp_loss, total_loss
from .training import TrainConfig, TrainLog, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "MODE_PRETRAINED",
    "MODE_STANDIN",
    "BackboneHandle",
    "FeatureGrid",
    "TapSpec",
    "ViTGeometry",
    "default_taps",
    "extract_features",
    "load_backbone",
    "standin_geometry",
    "BackboneConfig",
    "DataConfig",
    "RunConfig",
    "load_run_config",
    "load_split_datasets",
    "make_backbone",
    "PairedDataset",
    "Volume",
    "extract_slices",
    "load_volume",
    "normalize_volume",
    "reassemble",
    "save_volume",
    "split_dataset",
    "EvalReport",
    "MetricResult",
    "ThresholdBandSegmenter",
    "compare_reports",
    "dice",
    "evaluate_run",
    "ms_ssim",
    "paired_t_test",
    "psnr",
    "run_ablation",
    "seg_score",
    "translate_volume",
    "VARIANTS",
    "FusionGenerator",
    "GeneratorConfig",
    "build_generator",
    "LossBreakdown",
    "LossConfig",
    "l1_loss",
    "mldp_loss",
    "total_loss",
    "TrainConfig",
    "TrainLog",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
