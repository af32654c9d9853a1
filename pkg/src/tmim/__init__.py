"""Text-aware masked image modeling for scene text removal, on a small numpy autodiff core."""
from .data import AnnotatedImage, Batch, DataError, Dataset, SynthConfig, synth_corpus
from .losses import LossWeights, combined_loss
from .metrics import EvalReport, evaluate, region_restricted_eval
from .model import PromptedModel, Task
from .tensor import Tensor
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
