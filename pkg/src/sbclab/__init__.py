"""Simulation lab for quantitative Borel-Cantelli laws on intermittent maps."""

from sbclab.map_core import (
    Interval,
    MapParams,
    PartitionTable,
    apply,
    invert_left,
    invert_right,
    iterate_hits,
    partition_points,
    preimage_interval,
)
from sbclab.invariant_measure import (
    DensityEstimate,
    UlamDiscretization,
    build_ulam,
    invariance_residual,
    measure_interval,
    sample_mu,
    stationary_density,
)

__version__ = "0.1.0"

__all__ = [
    "DensityEstimate",
    "Interval",
    "MapParams",
    "PartitionTable",
    "UlamDiscretization",
    "apply",
    "build_ulam",
    "invariance_residual",
    "invert_left",
    "invert_right",
    "iterate_hits",
    "measure_interval",
    "partition_points",
    "preimage_interval",
    "sample_mu",
    "stationary_density",
]
