from mfg_forge.autodiff.adam import AdamState, adam_step
from mfg_forge.autodiff.nn import (
    NetSpec,
    ParamVector,
    grad_input,
    grad_params,
    net_forward,
    net_init,
    value_and_grad_params,
)
from mfg_forge.autodiff.tape import Var, value_and_grad

__all__ = [
    "AdamState",
    "NetSpec",
    "ParamVector",
    "Var",
    "adam_step",
    "grad_input",
    "grad_params",
    "net_forward",
    "net_init",
    "value_and_grad",
    "value_and_grad_params",
]
