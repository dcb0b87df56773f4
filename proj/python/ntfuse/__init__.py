"""Python bindings for the ensemble fusion library."""

from ._core import (
    Network,
    NtError,
    align_average,
    cli,
    concat_fuse,
    evaluate,
    fuse,
    magnitude_prune,
    run_experiment,
    synth_blobs,
    train,
    transplant_fraction,
    vanilla_average,
)

__all__ = [
    "Network",
    "NtError",
    "align_average",
    "cli",
    "concat_fuse",
    "evaluate",
    "fuse",
    "magnitude_prune",
    "run_experiment",
    "synth_blobs",
    "train",
    "transplant_fraction",
    "vanilla_average",
]
