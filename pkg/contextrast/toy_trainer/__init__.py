"""
Toy Trainer
Deterministic desk-scale harness: shapes dataset, reference encoder and training loop
"""
from .dataset import N_CLASSES, ShapeSample, ShapesDataset, generate
from .encoder import ReferenceEncoder, backward, forward
from .gradcheck import GradCheckReport, grad_check
from .rng import CounterRNG
from .trainer import StepRecord, Trainer, TrainResult, evaluate, lr_at, profile, train

__all__ = [
    'N_CLASSES', 'ShapeSample', 'ShapesDataset', 'generate',
    'ReferenceEncoder', 'forward', 'backward',
    'GradCheckReport', 'grad_check', 'CounterRNG',
    'StepRecord', 'Trainer', 'TrainResult', 'evaluate', 'lr_at', 'profile', 'train',
]
