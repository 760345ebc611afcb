"""Two-stage cephalometric landmark detection: facial region extraction
followed by heatmap regression with cross-validation fold ensembling."""

from .augment import AugmentationConfig
from .config import RunConfig
from .data import (FoldAssignment, ImageRecord, LandmarkSet, load_dataset,
                   split_folds, to_mm)
from .decode import EvalReport, decode_topk, ensemble_coords, evaluate, mre, sdr
from .heatmap import TargetHeatmap, encode_target, heatmap_loss
from .model import LandmarkNet, ModelSpec, adapt_input_to_single_channel, build_model
from .predict import PredictionBundle, predict_records, read_submission, write_submission
from .region import (BoundingBox, DetectorConfig, RegionTransform, extract_region,
                     make_gt_box, remap_coords, resize_to_height)

__version__ = "0.1.0"
