"""Unified vision-dialog transformer on a from-scratch numpy autodiff core."""

from vubert.config import PRESETS, RunConfig
from vubert.data import DialogInstance, generate_synthetic, load_visdial
from vubert.embeddings import ImageRaster, Vocab
from vubert.metrics import RankMetrics, evaluate_split
from vubert.model import ModelConfig, VUBert

__version__ = "0.1.0"

__all__ = ["PRESETS", "DialogInstance", "ImageRaster", "ModelConfig", "RankMetrics", "RunConfig", "VUBert",
           "Vocab", "evaluate_split", "generate_synthetic", "load_visdial"]
