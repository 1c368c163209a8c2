"""Color-event single-object tracking toolkit."""

from .boxes import BBox, TrackAnnotation
from .event_io import EventWindow, SyntheticSceneConfig, generate_synthetic, parse_events, slice_window
from .metrics import aggregate, boc, video_curves
from .model import ModelConfig, ModelParams, forward_backbone, tracking_head
from .tracker import TrackerSettings, track_sequence
from .voxel import GridSpec, crop_region, filter_voxels, select_top_k, voxelize

__version__ = "0.1.0"
