"""Data, training, inference, evaluation and benchmarks."""

from .evaluate import EvalReport, confusion_matrix, evaluate, mean_iou, per_class_iou, refine_image
from .experiment import ExperimentConfig, run_experiment
from .model import SegModel
from .synth import SynthSpec, load_split, synth_generate
from .train import TrainingError, train_baseline, train_refiner
