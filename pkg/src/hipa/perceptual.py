"""Image distances for the adaptation loss.

All functions accept plain arrays or tape ``Var``s of shape (H, W) or
(N, H, W). On plain arrays they return floats; on ``Var``s they return graph
nodes (batch-averaged), so the same code path yields values and gradients.

``st_distance`` keeps the structure/texture algebra of DISTS over a fixed
feature pyramid: per level, the image itself plus its Sobel-x and Sobel-y
responses, with 2x2 average pooling between levels. Statistics are global per
map. Since l_j and s_j both lie in [-1, 1], the distance lies in [0, 2];
typical image pairs land in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from hipa.autodiff import tape as ad
from hipa.edges import LAPLACIAN, SOBEL_X, SOBEL_Y
from hipa.spectral import DEFAULT_CUTOFF, make_mask

C1 = 1e-6
C2 = 1e-6
EPS_TV = 1e-8
DEFAULT_LAMBDA_TV = 0.01
MIN_LEVEL_SIDE = 4


def _lift(*xs):
    """Common tape for the operands; ``numeric`` is True when none was a Var."""
    tape = next((x.tape for x in xs if isinstance(x, ad.Var)), None)
    numeric = tape is None
    if numeric:
        tape = ad.Tape()
    out = []
    for x in xs:
        if not isinstance(x, ad.Var):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim not in (2, 3):
                raise ValueError(f"expected (H, W) or (N, H, W), got {x.shape}")
            if not np.all(np.isfinite(x)):
                raise ValueError("non-finite pixels")
            x = tape.constant(x)
        out.append(x)
    return out, numeric


def _result(v: ad.Var, numeric: bool):
    if not numeric:
        return v
    return float(v.value) if np.ndim(v.value) == 0 else v.value


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def pyramid_sides(h: int, w: int) -> list:
    if h < 8 or w < 8:
        raise ValueError(f"pyramid needs at least 8x8, got {h}x{w}")
    sides = [(h, w)]
    while min(-(-sides[-1][0] // 2), -(-sides[-1][1] // 2)) >= MIN_LEVEL_SIDE:
        sides.append((-(-sides[-1][0] // 2), -(-sides[-1][1] // 2)))
    return sides


def _pyramid(x: ad.Var) -> list:
    h, w = x.shape[-2:]
    levels = []
    for lvl in range(len(pyramid_sides(h, w))):
        if lvl:
            x = ad.avgpool2(x)
        levels.append((x, ad.filter3x3(x, SOBEL_X), ad.filter3x3(x, SOBEL_Y)))
    return levels


@dataclass
class PyramidFeatures:
    levels: list  # [(identity, sobel_x, sobel_y)] per level, finest first

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def build_pyramid(image) -> PyramidFeatures:
    (x,), _ = _lift(image)
    return PyramidFeatures([tuple(m.value for m in lvl) for lvl in _pyramid(x)])


def _map_similarity(fa: ad.Var, fb: ad.Var) -> ad.Var:
    """0.5 * texture + 0.5 * structure term, per leading index."""
    ax = (-2, -1)
    mu_a = fa.mean(axis=ax, keepdims=True)
    mu_b = fb.mean(axis=ax, keepdims=True)
    da, db = fa - mu_a, fb - mu_b
    var_a = ad.square(da).mean(axis=ax)
    var_b = ad.square(db).mean(axis=ax)
    cov = (da * db).mean(axis=ax)
    ma, mb = ad.reshape(mu_a, var_a.shape), ad.reshape(mu_b, var_b.shape)
    texture = (2.0 * ma * mb + C1) / (ad.square(ma) + ad.square(mb) + C1)
    structure = (2.0 * cov + C2) / (var_a + var_b + C2)
    return 0.5 * texture + 0.5 * structure


def _st(a: ad.Var, b: ad.Var) -> ad.Var:
    """Per-image distance (shape of the leading batch dims)."""
    terms = []
    for la, lb in zip(_pyramid(a), _pyramid(b)):
        for fa, fb in zip(la, lb):
            terms.append(_map_similarity(fa, fb))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return 1.0 - acc / float(len(terms))


def st_distance(a, b):
    """Structure-texture distance; batch inputs return the batch mean."""
    (a, b), numeric = _lift(a, b)
    _same_shape(a, b)
    d = _st(a, b)
    return _result(d.mean() if d.ndim else d, numeric)


def st_distance_per_image(a, b) -> np.ndarray:
    (a, b), _ = _lift(a, b)
    _same_shape(a, b)
    return np.atleast_1d(_st(a, b).value)


def l2_distance(a, b):
    (a, b), numeric = _lift(a, b)
    _same_shape(a, b)
    return _result(ad.square(a - b).mean(), numeric)


def _tv(x: ad.Var) -> ad.Var:
    base = x[..., :-1, :-1]
    dx = x[..., :-1, 1:] - base
    dy = x[..., 1:, :-1] - base
    return ad.sqrt(ad.square(dx) + ad.square(dy) + EPS_TV).mean(axis=(-2, -1))


def tv_norm(image):
    """Smoothed isotropic total variation, mean over the (H-1)x(W-1) cells
    with both forward differences."""
    (x,), numeric = _lift(image)
    if min(x.shape[-2:]) < 2:
        raise ValueError("tv_norm needs at least 2x2")
    t = _tv(x)
    return _result(t.mean() if t.ndim else t, numeric)


def sobel_magnitude(x: ad.Var) -> ad.Var:
    return ad.hypot(ad.filter3x3(x, SOBEL_X), ad.filter3x3(x, SOBEL_Y))


def laplacian_magnitude(x: ad.Var) -> ad.Var:
    return ad.absolute(ad.filter3x3(x, LAPLACIAN))


@dataclass(frozen=True)
class LossConfig:
    cutoff: float = DEFAULT_CUTOFF
    lambda_tv: float = DEFAULT_LAMBDA_TV
    band_mode: str = "high"  # high | low | off
    spatial: bool = True
    edge: bool = True
    edge_operator: str = "sobel"  # sobel | laplacian

    def __post_init__(self):
        if self.band_mode not in ("high", "low", "off"):
            raise ValueError(f"band_mode must be high, low or off, got {self.band_mode!r}")
        if self.edge_operator not in ("sobel", "laplacian"):
            raise ValueError(f"edge_operator must be sobel or laplacian, got {self.edge_operator!r}")
        if self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be >= 0")


@dataclass
class LossBreakdown:
    spatial: float = 0.0
    fourier_hf: float = 0.0
    edge_hf: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    def row(self):
        return [getattr(self, f.name) for f in fields(self)]


LOSS_COLUMNS = [f.name for f in fields(LossBreakdown)]


def loss_terms(one_step, multi_step, cfg: LossConfig = LossConfig()) -> dict:
    """Graph nodes for every enabled component plus ``total``.

    total = spatial + fourier_hf + edge_hf + lambda_tv * tv, summed in that
    order; disabled components are left out.
    """
    (a, b), _ = _lift(one_step, multi_step)
    _same_shape(a, b)
    terms = {}
    if cfg.spatial:
        terms["spatial"] = _st(a, b).mean()
    if cfg.band_mode != "off":
        w = make_mask(*a.shape[-2:], cfg.band_mode, cfg.cutoff).weights
        terms["fourier_hf"] = _st(ad.spectral_filter(a, w), ad.spectral_filter(b, w)).mean()
    if cfg.edge:
        edge = sobel_magnitude if cfg.edge_operator == "sobel" else laplacian_magnitude
        terms["edge_hf"] = _st(edge(a), edge(b)).mean()
    terms["tv"] = _tv(a).mean()
    total = None
    for k in ("spatial", "fourier_hf", "edge_hf"):
        if k in terms:
            total = terms[k] if total is None else total + terms[k]
    reg = cfg.lambda_tv * terms["tv"]
    terms["total"] = reg if total is None else total + reg
    return terms


def hipa_loss(one_step, multi_step, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    terms = loss_terms(one_step, multi_step, cfg)
    return LossBreakdown(**{k: float(v.value) for k, v in terms.items()})
