"""Offline patch-feature exporter for the anomaly-detection engine."""

from .encoders import GRID_SIDE, IMAGE_SIDE, N_PATCHES, PATCH_SIDE, make_encoder
from .export import ExportError, ExportJob, downsample_mask, run_export

__version__ = "0.1.0"
