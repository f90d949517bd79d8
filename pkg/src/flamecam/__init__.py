"""Desk-scale smart-camera stack for jet-flame segmentation and characterization."""

from .archive import read_model_archive, write_model_archive
from .complexity import layer_complexity, model_complexity
from .geometry import FlameGeometry, NoFlameDetected, SceneCalib, characterize, connected_components
from .infer import colorize, forward_f32, forward_i8, postprocess, preprocess
from .metrics import class_weights, dice, jaccard, mape, rmspe, weighted_ce
from .model import (
    ModelGraph, QuantParams, build_band_segmenter, build_unet, count_parameters,
    fold_batchnorm, validate_graph,
)
from .pipeline import PipelineConfig, bench_model, run_pipeline
from .prune import compute_apoz, prune_loop, remove_filters
from .quantize import calibrate, equalize_cross_layer, quantize_model
from .synth import FlameSceneSpec, augment, generate_dataset, generate_scene

__version__ = "0.1.0"
