"""Dataset pruning by training-dynamics scores and class-balanced selection."""

from .dataset import BlobSpec, Dataset, DatasetSplit, generate_blobs, multiformation_decode, split
from .dynamics_log import DynamicsLog, read_log, write_log
from .scoring import ScoreVector, lbpe_score
from .selection import SubsetIndex, balanced_select, rank_select
from .trainer import ModelParams, TrainConfig, train_with_dynamics

__version__ = "0.1.0"
