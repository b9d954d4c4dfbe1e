"""Certification of high-dimensional time-bin entanglement from two-party
photon time-tag streams.

The package ingests (or synthesizes) picosecond-resolution detection
streams from a two-interferometer setup, discretises them into interleaved
time-bin frames, and computes certified lower bounds on the fidelity of
the discretised two-photon state to the d=4 maximally entangled state,
from which Schmidt-number (entanglement-dimensionality) certificates
follow.
"""

from .certify import (
    Certificate,
    DensityElementBounds,
    ProbabilityTables,
    bootstrap_uncertainty,
    certify_counts,
    fidelity_closed_form,
    fidelity_lower_bound_sdp,
    neighbor_offdiag_lower_bound,
    schmidt_number_certificate,
)
from .framing import (
    BinCoord,
    CoincidenceTables,
    FrameConfig,
    MultiClickPolicy,
    TsupProjector,
    accumulate_tables,
    bin_index,
    tables_to_probabilities,
    tsup_projector_for_click,
)
from .sim import (
    SourceModel,
    exact_probability_tables,
    generate_streams,
    ground_truth_fidelity,
)
from .timetag import (
    ChannelMap,
    ChannelRole,
    CoincidenceBatch,
    CoincidencePair,
    DetectionEvent,
    EventStream,
    estimate_offset,
    match_coincidences,
    match_coincidences_chunked,
    parse_stream,
    read_stream,
    serialize_stream,
    write_stream,
)

__version__ = "0.1.0"

__all__ = [
    "BinCoord",
    "Certificate",
    "ChannelMap",
    "ChannelRole",
    "CoincidenceBatch",
    "CoincidencePair",
    "CoincidenceTables",
    "DensityElementBounds",
    "DetectionEvent",
    "EventStream",
    "FrameConfig",
    "MultiClickPolicy",
    "ProbabilityTables",
    "SourceModel",
    "TsupProjector",
    "accumulate_tables",
    "bin_index",
    "bootstrap_uncertainty",
    "certify_counts",
    "estimate_offset",
    "exact_probability_tables",
    "fidelity_closed_form",
    "fidelity_lower_bound_sdp",
    "generate_streams",
    "ground_truth_fidelity",
    "match_coincidences",
    "match_coincidences_chunked",
    "neighbor_offdiag_lower_bound",
    "parse_stream",
    "read_stream",
    "schmidt_number_certificate",
    "serialize_stream",
    "tables_to_probabilities",
    "tsup_projector_for_click",
    "write_stream",
]
