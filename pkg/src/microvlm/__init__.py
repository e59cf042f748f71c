"""A desk-scale multimodal assistant built on dynamic-rank, frozen-projection adapters."""
from .adapters import AdapterLinear, QuantizedMatrix, RankSampler, dequantize, quantize_woq
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import TeacherClient, generate_dataset, load_samples, render_templates
from .estimator import MultimodalAssistant, VisionFeaturizer
from .fusion import FusionConfig, FusionModel, classify, generate
from .metrics import bleu_n, evaluate_corpus, meteor, rouge_l, rouge_n
from .tensor import Prng
from .tokenizer import Vocabulary, assemble_prompt, build_vocab
from .trainer import TrainConfig, train
from .vision import VisionConfig, VisionEncoder

__version__ = "0.1.0"

__all__ = [
    "AdapterLinear", "QuantizedMatrix", "RankSampler", "dequantize", "quantize_woq",
    "load_checkpoint", "save_checkpoint",
    "TeacherClient", "generate_dataset", "load_samples", "render_templates",
    "MultimodalAssistant", "VisionFeaturizer",
    "FusionConfig", "FusionModel", "classify", "generate",
    "bleu_n", "evaluate_corpus", "meteor", "rouge_l", "rouge_n",
    "Prng", "Vocabulary", "assemble_prompt", "build_vocab",
    "TrainConfig", "train", "VisionConfig", "VisionEncoder",
]
