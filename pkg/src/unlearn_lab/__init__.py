"""Desk-scale machine unlearning: IAU updates, influence oracles and MIA evaluation."""

from .datasets import Dataset, Partition, gen_blobs, gen_moons, load_csv, load_idx, make_partition, split
from .errors import UnlearnLabError
from .models import Checkpoint, ModelSpec, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .unlearning import InfluenceQuery, UnlearnRequest, influence_add_predict, influence_remove, iau_unlearn, \
    incremental_unlearn, retrain_oracle

__version__ = "0.1.0"
