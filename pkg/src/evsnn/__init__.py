"""Event-camera car detection with a spiking CNN, trained in float and
emulated bit-exactly in fixed point for neuromorphic deployment."""

from .chip import (
    QuantizedNetwork,
    emulate_inference,
    equivalence_check,
    load_quantized,
    quantize,
    save_quantized,
)
from .errors import PipelineError
from .events import (
    Dataset,
    EventStream,
    SyntheticSpec,
    gen_synthetic,
    load_dataset,
    parse_dat,
    parse_evtcsv,
    write_evtcsv,
)
from .mapping import ChipConstraints, MappingReport, map_network, resource_totals
from .network import (
    LifParams,
    NetworkSpec,
    VARIANTS,
    build_network,
    forward,
    load_network,
    save_network,
)
from .preprocess import AccumulationConfig, crop, densest_tile, event_occurrence_map, sample_frames
from .training import AdamState, TrainConfig, backward, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AccumulationConfig",
    "AdamState",
    "ChipConstraints",
    "Dataset",
    "EventStream",
    "LifParams",
    "MappingReport",
    "NetworkSpec",
    "PipelineError",
    "QuantizedNetwork",
    "SyntheticSpec",
    "TrainConfig",
    "VARIANTS",
    "backward",
    "build_network",
    "crop",
    "densest_tile",
    "emulate_inference",
    "equivalence_check",
    "evaluate",
    "event_occurrence_map",
    "forward",
    "gen_synthetic",
    "load_dataset",
    "load_network",
    "load_quantized",
    "map_network",
    "parse_dat",
    "parse_evtcsv",
    "quantize",
    "resource_totals",
    "sample_frames",
    "save_network",
    "save_quantized",
    "train",
    "write_evtcsv",
]
