from .base import OutcomeTransform, Standardizer, normal_logpdf, normal_logpdf_rows
from .io import flow_from_dict, flow_to_dict, load_flow, save_flow
from .made import MadeAffineLayer, ReverseLayer, made_degrees, made_masks
from .models import ENSEMBLE_SIZE, ConditionalFlow, DensityFlow, FlowEnsemble
from .spline import SplineTransform, identity_derivative_raw

__all__ = [
    "ENSEMBLE_SIZE",
    "ConditionalFlow",
    "DensityFlow",
    "FlowEnsemble",
    "MadeAffineLayer",
    "OutcomeTransform",
    "ReverseLayer",
    "SplineTransform",
    "Standardizer",
    "flow_from_dict",
    "flow_to_dict",
    "identity_derivative_raw",
    "load_flow",
    "made_degrees",
    "made_masks",
    "normal_logpdf",
    "normal_logpdf_rows",
    "save_flow",
]
