"""Reinforcement learning with physics-informed reward machines."""

from .core import (
    ConfigurationError,
    DefinitionError,
    Discretization,
    FlowSpec,
    Guard,
    HybridState,
    NumericError,
    PrmDefinition,
    PrmError,
    PropositionSet,
    TotalityError,
    discretize_prm,
    flow_step,
    is_terminal,
    prm_step,
)
from .dsl import Diagnostic, PrmSyntaxError, SourceDocument, load_prm, parse_prm, serialize_prm, validate_prm
from .product import Experience, ProductState, counterfactual_experiences, product_step

__version__ = "0.1.0"
