"""Joint transmit precoding for decode-and-forward relay interference
broadcast channels.

Phase 1 designs the relay precoders for the second-hop sum-rate, phase 2
designs the transmitter precoders for a smoothed end-to-end utility that
knows the timesharing value and the second-hop rates, and phase 3 trims
first-hop powers until no relay has a dominant first hop.
"""

__version__ = "0.1.0"

from .first_hop import RateMatchTargets, rate_matching_sinr, solve_first_hop, utility_u
from .pipeline import ALL_VARIANTS, SolverSettings, VariantId, opportunistic_best, run_all_variants, run_variant, upper_bound_rate
from .power_control import decompose_precoders, run_power_control
from .rates import PrecoderSet, RateReport, rate_report
from .second_hop import solve_second_hop
from .topology import ChannelSet, SystemSpec, Topology, build_topology, parse_system_spec, sample_channels

__all__ = [
    "ALL_VARIANTS",
    "ChannelSet",
    "PrecoderSet",
    "RateMatchTargets",
    "RateReport",
    "SolverSettings",
    "SystemSpec",
    "Topology",
    "VariantId",
    "build_topology",
    "decompose_precoders",
    "opportunistic_best",
    "parse_system_spec",
    "rate_matching_sinr",
    "rate_report",
    "run_all_variants",
    "run_power_control",
    "run_variant",
    "sample_channels",
    "solve_first_hop",
    "solve_second_hop",
    "upper_bound_rate",
    "utility_u",
]
