"""Low-rank adaptors W' = W + U V^T over the denoiser's weight matrices.

A 3x3 conv kernel of shape (c_out, c_in, 3, 3) is viewed as the matrix
(c_out, c_in*9) through a plain C-order reshape; dense weights are used as is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hipa.autodiff.denoiser import LAYERS, ZERO_INIT, DenoiserParams
from hipa.rng import SplitMix64

GROUPS = ("down", "mid", "up")
DEFAULT_RANK = 4


@dataclass
class LowRankAdaptor:
    target: str
    U: np.ndarray  # (d_out, k)
    V: np.ndarray  # (d_in, k)

    def __post_init__(self):
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[1]:
            raise ValueError(f"incompatible factors {self.U.shape}, {self.V.shape}")
        if not 1 <= self.rank <= min(self.d_out, self.d_in):
            raise ValueError(f"rank {self.rank} outside 1..{min(self.d_out, self.d_in)} for {self.target}")

    @property
    def d_out(self) -> int:
        return self.U.shape[0]

    @property
    def d_in(self) -> int:
        return self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_out + self.d_in)

    def delta(self) -> np.ndarray:
        return self.U @ self.V.T

    def copy(self) -> "LowRankAdaptor":
        return LowRankAdaptor(self.target, self.U.copy(), self.V.copy())


def matrix_shape(shape) -> tuple:
    return (shape[0], int(np.prod(shape[1:])))


def normalize_policy(policy) -> frozenset:
    if isinstance(policy, str):
        policy = [p for p in policy.replace("+", ",").split(",") if p]
        if policy == ["all"]:
            policy = list(GROUPS)
    policy = frozenset(policy)
    if not policy:
        raise ValueError("placement policy must name at least one group")
    unknown = policy - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown layer groups {sorted(unknown)}; valid: {list(GROUPS)}")
    return policy


def adaptable_targets(params: DenoiserParams, policy) -> list:
    """Weight names in the selected groups. The single-output head and skip
    gain are never adapted: their 1-row matrices cannot carry rank > 1."""
    policy = normalize_policy(policy)
    return [f"{layer}.weight" for layer, (group, _) in LAYERS.items()
            if group in policy and layer not in ZERO_INIT and f"{layer}.weight" in params.tensors]


def attach_adaptors(params: DenoiserParams, policy, rank: int = DEFAULT_RANK, seed: int = 0) -> list:
    """U ~ N(0, 1)/sqrt(k) from the counter PRNG, V = 0, so the adapted model
    starts functionally identical to the backbone."""
    if rank < 1:
        raise ValueError("rank must be ≥ 1")
    rng = SplitMix64(seed)
    out = []
    for i, name in enumerate(adaptable_targets(params, policy)):
        d_out, d_in = matrix_shape(params.tensors[name].shape)
        if rank > min(d_out, d_in):
            raise ValueError(f"rank {rank} exceeds min matrix dimension {min(d_out, d_in)} of {name}")
        u = rng.spawn(i).normal((d_out, rank)) / np.sqrt(rank)
        out.append(LowRankAdaptor(name, u, np.zeros((d_in, rank))))
    return out


def effective_weight(W: np.ndarray, adaptor: LowRankAdaptor) -> np.ndarray:
    if matrix_shape(W.shape) != (adaptor.d_out, adaptor.d_in):
        raise ValueError(f"shape mismatch: weight {W.shape} vs adaptor {adaptor.d_out}x{adaptor.d_in}")
    return W + adaptor.delta().reshape(W.shape)


def count_params(adaptors) -> int:
    return sum(a.n_params for a in adaptors)


def merge(params: DenoiserParams, adaptors) -> DenoiserParams:
    """Fold every delta into a copy of ``params``. Merging the same adaptors
    twice applies the delta twice."""
    merged = params.copy()
    for a in adaptors:
        if a.target not in merged.tensors:
            raise KeyError(f"unknown adaptor target {a.target!r}")
        merged.tensors[a.target] = effective_weight(merged.tensors[a.target], a)
    return merged


def adaptor_tensors(adaptors) -> dict:
    """Flatten to checkpoint entries ``adaptor.<target>.U`` / ``.V``."""
    out = {}
    for a in adaptors:
        out[f"adaptor.{a.target}.U"] = a.U
        out[f"adaptor.{a.target}.V"] = a.V
    return out


def adaptors_from_tensors(tensors: dict) -> list:
    targets = sorted({k[len("adaptor."):-2] for k in tensors if k.startswith("adaptor.")})
    order = {f"{layer}.weight": i for i, layer in enumerate(LAYERS)}
    targets.sort(key=lambda t: order.get(t, len(order)))
    return [LowRankAdaptor(t, tensors[f"adaptor.{t}.U"], tensors[f"adaptor.{t}.V"]) for t in targets]
