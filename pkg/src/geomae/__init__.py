"""Multi-source masked autoencoding for Earth observation at desk scale.

The package covers the whole path from raw region data to a pretrained
model: an on-disk shard format for multi-sensor regions, a deterministic
synthetic generator, curation heuristics, tokenization and composite
encodings, masking schemes, the masked autoencoder itself and a
bulk-synchronous training loop.
"""
from .masking import Mask, combined_mask, make_mask, random_mask, tube_mask
from .model import Batch, EarthMAE, ModelConfig
from .region_store import Region, SourceProfile, SourceTensor, Timestamp, read_shard, write_shard
from .synthgen import CATALOG, SynthConfig, SynthDataset, synth_dataset, synth_region
from .trainer import Checkpoint, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Batch", "CATALOG", "Checkpoint", "EarthMAE", "Mask", "ModelConfig", "Region", "SourceProfile",
    "SourceTensor", "SynthConfig", "SynthDataset", "Timestamp", "TrainConfig", "Trainer",
    "combined_mask", "make_mask", "random_mask", "read_shard", "synth_dataset", "synth_region",
    "train", "tube_mask", "write_shard",
]
