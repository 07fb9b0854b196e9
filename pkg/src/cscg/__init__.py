"""Clone-structured cognitive graphs as reusable schemas.

Learn action-conditioned transition graphs from aliased observations, rebind
them to new observation labels, pick the schema that fits a new environment,
stitch schemas into larger ones, and plan inside them.
"""
from .model import (CloneStructure, GroundedSchema, ModelError, Trajectory, UngroundedSchema, VersionMismatch,
                    load, save)
from .inference import ZeroProbabilityError, filtered_belief, forward_backward, log_likelihood, map_decode, nll
from .learn_t import EmOptions, learn_shared_schema, learn_transitions, viterbi_refine
from .learn_e import bind, learn_emissions
from .schemas import SchemaLibrary, extract_schema, match, sliding_window_match
from .composition import FrontierSpec, build_prior, learn_composed
from .planner import localize, navigate, plan

__version__ = "0.1.0"

__all__ = [
    "CloneStructure", "GroundedSchema", "ModelError", "Trajectory", "UngroundedSchema", "VersionMismatch",
    "load", "save", "ZeroProbabilityError", "filtered_belief", "forward_backward", "log_likelihood",
    "map_decode", "nll", "EmOptions", "learn_shared_schema", "learn_transitions", "viterbi_refine", "bind",
    "learn_emissions", "SchemaLibrary", "extract_schema", "match", "sliding_window_match", "FrontierSpec",
    "build_prior", "learn_composed", "localize", "navigate", "plan",
]
