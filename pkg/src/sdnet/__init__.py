"""Difference-convolution networks for image and video salient object detection, in numpy."""
from .dcr import convert_model
from .graph import INFERENCE, TOY, TRAINING, ModelConfig, ModelGraph, count_macs_params
from .io import load_model, load_weights, read_clip, read_image, save_weights, write_pgm
from .models import build_model, build_sdnet, build_stdnet, forward, predict

__version__ = "0.1.0"

__all__ = ["convert_model", "INFERENCE", "TOY", "TRAINING", "ModelConfig", "ModelGraph", "count_macs_params",
           "load_model", "load_weights", "read_clip", "read_image", "save_weights", "write_pgm", "build_model",
           "build_sdnet", "build_stdnet", "forward", "predict"]
