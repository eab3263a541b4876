"""
Loss functions over aligned flows and the pose refinement built on them.
"""

from .losses import (
    RatioMaps,
    evaluate_losses,
    loss_axi,
    loss_pla,
    loss_rad,
    loss_tan,
    photometric_loss,
    ratio_maps,
    recover_translation,
    total_loss,
)
from .refine import RefineTrace, recover_translation_closed_form, refine_pose

__all__ = [
    "RatioMaps",
    "evaluate_losses",
    "loss_axi",
    "loss_pla",
    "loss_rad",
    "loss_tan",
    "photometric_loss",
    "ratio_maps",
    "recover_translation",
    "total_loss",
    "RefineTrace",
    "recover_translation_closed_form",
    "refine_pose",
]
