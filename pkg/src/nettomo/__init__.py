"""Origin-destination traffic inference from aggregate link counters.

Modules
-------
network     routing matrices, topologies and their decomposition
polytope    the feasible set of route volumes, random-directions sampling, IPFP
gssm        Gaussian state-space model fitted on sliding windows
calibrate   prior schedules for the multilevel model
multilevel  multilevel model simulator and resample-move particle filter
baselines   gravity and tomogravity estimators
simstudy    simulation designs and error tables
cli         command-line front end
"""

__version__ = "0.1.0"

from .network import (RoutingMatrix, Topology, aggregate, build_chain, build_custom,  # noqa: E402
                      build_star, build_two_router, check_identifiability, check_unimodular,
                      decompose)
from .polytope import Polytope, feasible_point, ipfp, rda_step  # noqa: E402

__all__ = [
    "RoutingMatrix", "Topology", "aggregate", "build_chain", "build_custom", "build_star",
    "build_two_router", "check_identifiability", "check_unimodular", "decompose",
    "Polytope", "feasible_point", "ipfp", "rda_step",
]
