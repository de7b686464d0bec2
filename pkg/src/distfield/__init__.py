"""Dense distortion-field estimation and rectification for fingerprint images."""

from .field import (
    BLOCK_SIZE,
    DistortionField,
    MinutiaSet,
    RigidTransform,
    fit_rigid,
    rectify,
    remove_dc,
    sparse_field,
    tps_eval_dense,
    tps_fit,
    upsample_field,
)

__version__ = "0.1.0"
