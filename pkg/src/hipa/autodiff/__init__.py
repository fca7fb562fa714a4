"""Reverse-mode differentiation engine, optimizer and the toy denoiser."""
from hipa.autodiff.tape import Tape, Var, backward
from hipa.autodiff.optim import AdamState, adam_step
from hipa.autodiff.denoiser import DenoiserParams, forward_denoiser, init_params, make_denoiser

__all__ = ["Tape", "Var", "backward", "AdamState", "adam_step", "DenoiserParams",
           "forward_denoiser", "init_params", "make_denoiser"]
