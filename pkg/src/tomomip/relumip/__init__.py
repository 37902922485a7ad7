"""Mixed-integer encodings of ReLU networks and a small branch-and-bound solver."""

from .bnb import BoundViolation, SolverError, solve_mip
from .encode import (NetworkVars, NeuronBounds, build_subregion_mip, compute_neuron_bounds,
                     encode_network, forward_assignment, network_vars, tighten_bounds,
                     window_objective)
from .lp import LPResult, solve_lp, solve_model_lp
from .model import MipModel, MipSolution, ModelBuilder, relative_gap


def maximize_output(net, gap_tol=0.0, input_box=None, tighten=False, **limits) -> MipSolution:
    """Maximise the (single) network output over ``input_box`` (default ``[0, omega]^n``)."""
    bounds = compute_neuron_bounds(net, input_box)
    if tighten:
        bounds = tighten_bounds(net, bounds)
    return solve_mip(encode_network(net, bounds), gap_tol=gap_tol, **limits)


__all__ = [
    "BoundViolation", "LPResult", "MipModel", "MipSolution", "ModelBuilder", "NetworkVars",
    "NeuronBounds", "SolverError", "build_subregion_mip", "compute_neuron_bounds",
    "encode_network", "forward_assignment", "maximize_output", "network_vars", "relative_gap",
    "solve_lp", "solve_mip", "solve_model_lp", "tighten_bounds", "window_objective",
]
