"""Continuous-time attention with ODE-evolved keys and values, in numpy."""
from ctattn.attention import (AttentionConfig, CTMultiHeadAttention, ct_attention, ct_mha,
                              discrete_attention, verify_universal)
from ctattn.autodiff import Tensor, grad, no_grad
from ctattn.interp import fit, interpolate
from ctattn.model import ContiFormer, ModelConfig, Transformer, build_model
from ctattn.ode import NFECounter, VectorField, reparameterize, rk4_solve
from ctattn.quadrature import integrate, make_rule, parse_rule

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "CTMultiHeadAttention", "ContiFormer", "ModelConfig", "NFECounter",
    "Tensor", "Transformer", "VectorField", "build_model", "ct_attention", "ct_mha",
    "discrete_attention", "fit", "grad", "integrate", "interpolate", "make_rule", "no_grad",
    "parse_rule", "reparameterize", "rk4_solve", "verify_universal",
]
