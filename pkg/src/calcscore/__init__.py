"""Vascular calcification scoring for CT angiography volumes."""

from .calc import (
    CalcificationReport,
    SliceRange,
    filter_components_min_area,
    run_pipeline,
    score,
    threshold_calcium,
)
from .metrics import (
    ConfusionCounts,
    FoldPlan,
    RegressionFit,
    ape,
    bce,
    confusion,
    dice,
    iou,
    jaccard_loss,
    kfold_split,
    mape,
    per_slice_dice_mean,
    r_squared,
    regression_fit,
)
from .seg import RegionGrowParams, apply_mask, import_mask, region_grow
from .volio import (
    ByteVolume,
    CtVolume,
    MaskVolume,
    VoxelSpacing,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    window_to_byte,
)

__version__ = "0.1.0"
