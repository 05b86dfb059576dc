"""Cascade landmark tracking on 2D image sequences, built on a small numpy autodiff core."""

from .boxgeom import Box, BoxDelta
from .cascade import ArchConfig, CascadeModel, Candidate, Tracker, load_model, save_model, track_sequence
from .dataio import SequenceBundle, SynthConfig, load_sequence, save_sequence, synth_sequence
from .evalbench import TrackReport, aggregate_report, summarize, tracking_error
from .temporal_select import SelectionConfig, select
from .trainer import TrainConfig, extract_training_pairs, five_fold_split, train_full

__all__ = [
    "Box",
    "BoxDelta",
    "ArchConfig",
    "CascadeModel",
    "Candidate",
    "Tracker",
    "load_model",
    "save_model",
    "track_sequence",
    "SequenceBundle",
    "SynthConfig",
    "load_sequence",
    "save_sequence",
    "synth_sequence",
    "TrackReport",
    "aggregate_report",
    "summarize",
    "tracking_error",
    "SelectionConfig",
    "select",
    "TrainConfig",
    "extract_training_pairs",
    "five_fold_split",
    "train_full",
]

__version__ = "0.1.0"
