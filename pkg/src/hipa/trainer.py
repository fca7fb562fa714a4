"""Adaptation loop: train low-rank adaptors so the one-step student matches the
frozen teacher's multi-step samples under the composite loss.

Every configuration draws training noise from the same indexed pool and is
evaluated on the same held-out noise set, so runs that differ only in their
loss switches, placement or rank are paired sample for sample.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from hipa.autodiff import tape as ad
from hipa.autodiff.denoiser import DenoiserParams, bind, bind_adaptors, graph, make_denoiser
from hipa.autodiff.optim import AdamState, adam_step
from hipa.diffusion import (DiffusionSchedule, NumericalAbort, generate_one_step, noise_batch,
                            sample_multistep, to_pixels, uniform_timesteps)
from hipa.grid import write_csv
from hipa.lowrank import (DEFAULT_RANK, GROUPS, LowRankAdaptor, attach_adaptors, count_params,
                          normalize_policy)
from hipa.perceptual import LOSS_COLUMNS, LossBreakdown, LossConfig, loss_terms, st_distance_per_image
from hipa.rng import SplitMix64
from hipa.spectral import DEFAULT_CUTOFF, bin_edges, high_band_energy_ratio, radial_psd

log = logging.getLogger(__name__)

EVAL_EVERY = 100
REPORT_COLUMNS = ["iter"] + LOSS_COLUMNS + ["eval_st_dist", "eval_hf_gap"]
COMPARISON_COLUMNS = ["cfg_id", "final_st_dist", "final_hf_gap", "params", "wall_s"]


@dataclass(frozen=True)
class AdaptationConfig:
    rank: int = DEFAULT_RANK
    placement: tuple = GROUPS
    teacher_steps: int = 15
    cutoff: float = DEFAULT_CUTOFF
    spatial: bool = True
    fourier_hf: bool = True
    edge_hf: bool = True
    band_mode: str = "high"
    edge_operator: str = "sobel"
    lambda_tv: float = 0.01
    lr: float = 1e-4
    batch: int = 8
    n_iters: int = 1000
    seed: int = 0
    eval_every: int = EVAL_EVERY
    n_eval: int = 32
    eval_seed: int = 2024
    train_pool: int = 256

    def __post_init__(self):
        object.__setattr__(self, "placement", tuple(sorted(normalize_policy(self.placement),
                                                           key=GROUPS.index)))
        if not (self.spatial or self.fourier_hf or self.edge_hf):
            raise ValueError("at least one loss switch must be on")
        if self.teacher_steps < 2:
            raise ValueError("teacher_steps must be >= 2")
        if self.rank < 1:
            raise ValueError("rank must be ≥ 1")
        if self.band_mode not in ("high", "low"):
            raise ValueError("band_mode must be high or low")
        for k in ("batch", "eval_every", "n_eval", "train_pool"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def loss_config(self) -> LossConfig:
        return LossConfig(cutoff=self.cutoff, lambda_tv=self.lambda_tv,
                          band_mode=self.band_mode if self.fourier_hf else "off",
                          spatial=self.spatial, edge=self.edge_hf, edge_operator=self.edge_operator)


class TargetCache:
    """Teacher multi-step samples (pixel space) keyed by (noise seed, index,
    steps). The teacher is frozen, so entries never go stale."""

    def __init__(self, teacher: DenoiserParams, schedule: DiffusionSchedule, chunk: int = 32, jobs: int = 1):
        self.teacher = teacher
        self.schedule = schedule
        self.chunk = chunk
        self.jobs = jobs
        self._store = {}

    def noise(self, seed: int, indices) -> np.ndarray:
        return np.concatenate([noise_batch(seed, int(i), 1, self.teacher.size) for i in indices])

    def prefill(self, seed: int, n: int, steps: int) -> None:
        """Compute indices 0..n-1 in fixed chunks. Chunk boundaries depend only
        on ``n``, so the stored bits do not depend on ``jobs`` or on the order
        in which later lookups arrive."""
        chunks = [list(range(k, min(k + self.chunk, n))) for k in range(0, n, self.chunk)]
        todo = [c for c in chunks if any((seed, i, steps) not in self._store for i in c)]
        args = [(self.teacher, self.schedule, steps, self.noise(seed, c)) for c in todo]
        if self.jobs > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(self.jobs) as ex:
                outs = list(ex.map(_teacher_chunk, args))
        else:
            outs = [_teacher_chunk(a) for a in args]
        for c, out in zip(todo, outs):
            for i, x in zip(c, out):
                self._store[(seed, i, steps)] = x

    def get(self, seed: int, indices, steps: int) -> np.ndarray:
        indices = [int(i) for i in indices]
        if any((seed, i, steps) not in self._store for i in indices):
            self.prefill(seed, max(indices) + 1, steps)
        return np.stack([self._store[(seed, i, steps)] for i in indices])


def _teacher_chunk(args):
    teacher, schedule, steps, x_T = args
    out = sample_multistep(make_denoiser(teacher), schedule, uniform_timesteps(schedule.T, steps), x_T)
    return to_pixels(out)


@dataclass
class Snapshot:
    iter: int
    st_dist: float
    hf_gap: float
    student_hf: float
    teacher_hf: float


@dataclass
class RunReport:
    cfg: AdaptationConfig
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    params: int = 0
    wall_s: float = 0.0

    @property
    def initial(self) -> Snapshot:
        return self.snapshots[0]

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]

    def table(self):
        by_iter = {s.iter: s for s in self.snapshots}
        out = []
        for i, row in enumerate(self.rows, start=1):
            s = by_iter.get(i)
            out.append([i] + row.row() + ([s.st_dist, s.hf_gap] if s else [None, None]))
        return out

    def write_csv(self, path) -> None:
        write_csv(path, REPORT_COLUMNS, self.table())


def evaluate(teacher: DenoiserParams, adaptors, schedule: DiffusionSchedule, cache: TargetCache,
             cfg: AdaptationConfig, it: int = 0) -> Snapshot:
    idx = range(cfg.n_eval)
    target = cache.get(cfg.eval_seed, idx, cfg.teacher_steps)
    student = to_pixels(generate_one_step(make_denoiser(teacher, adaptors), schedule, cache.noise(cfg.eval_seed, idx)))
    if not np.all(np.isfinite(student)):
        raise NumericalAbort(f"non-finite student output at iteration {it}", [a.copy() for a in adaptors])
    d = st_distance_per_image(student, target)
    rs = np.array([high_band_energy_ratio(x, cfg.cutoff) for x in student])
    rt = np.array([high_band_energy_ratio(x, cfg.cutoff) for x in target])
    return Snapshot(it, float(d.mean()), float(np.abs(rs - rt).mean()), float(rs.mean()), float(rt.mean()))


def one_step_graph(pv, av, x_T, schedule: DiffusionSchedule) -> ad.Var:
    """Differentiable one-step sample, mapped to pixel space."""
    T = schedule.T
    ab = schedule.alpha_bars[T]
    eps = graph(pv, av, x_T, T, T)
    x0 = (ad.lift(x_T, eps.tape) - math.sqrt(1.0 - ab) * eps) * (1.0 / math.sqrt(ab))
    return 0.5 * x0 + 0.5


def adapt(teacher: DenoiserParams, schedule: DiffusionSchedule, cfg: AdaptationConfig = AdaptationConfig(),
          cache: TargetCache | None = None, adaptors: list | None = None):
    """Returns (adaptors, RunReport). Teacher tensors are never written."""
    t0 = time.perf_counter()
    cache = cache or TargetCache(teacher, schedule)
    cache.prefill(cfg.seed, cfg.train_pool, cfg.teacher_steps)
    cache.prefill(cfg.eval_seed, cfg.n_eval, cfg.teacher_steps)
    loss_cfg = cfg.loss_config()
    if adaptors is None:
        adaptors = attach_adaptors(teacher, cfg.placement, cfg.rank, cfg.seed)
    adaptors = [a.copy() for a in adaptors]
    report = RunReport(cfg, params=count_params(adaptors))
    report.snapshots.append(evaluate(teacher, adaptors, schedule, cache, cfg, 0))
    rng = SplitMix64(cfg.seed).spawn(13)
    state = AdamState()
    for it in range(1, cfg.n_iters + 1):
        idx = rng.integers(0, cfg.train_pool, (cfg.batch,))
        target = cache.get(cfg.seed, idx, cfg.teacher_steps)
        x_T = cache.noise(cfg.seed, idx)
        tape = ad.Tape()
        pv = bind(tape, teacher, trainable=False)
        av = bind_adaptors(tape, adaptors)
        terms = loss_terms(one_step_graph(pv, av, x_T, schedule), target, loss_cfg)
        total = float(terms["total"].value)
        if not math.isfinite(total):
            raise NumericalAbort(f"adaptation loss is {total} at iteration {it}", [a.copy() for a in adaptors])
        wrt = {}
        for name, (u, v) in av.items():
            wrt[name + ".U"], wrt[name + ".V"] = u, v
        grads = ad.backward(tape, terms["total"], wrt)
        values = {}
        for a in adaptors:
            values[a.target + ".U"], values[a.target + ".V"] = a.U, a.V
        values = adam_step(values, grads, state, cfg.lr)
        adaptors = [LowRankAdaptor(a.target, values[a.target + ".U"], values[a.target + ".V"])
                    for a in adaptors]
        report.rows.append(LossBreakdown(**{k: float(v.value) for k, v in terms.items()}))
        if it % cfg.eval_every == 0 or it == cfg.n_iters:
            snap = evaluate(teacher, adaptors, schedule, cache, cfg, it)
            report.snapshots.append(snap)
            log.info("iter %d loss %.4f eval st %.4f gap %.4f", it, total, snap.st_dist, snap.hf_gap)
    report.wall_s = time.perf_counter() - t0
    return adaptors, report


def run_ablation(teacher: DenoiserParams, schedule: DiffusionSchedule, cfgs: dict,
                 cache: TargetCache | None = None):
    """Run every named config against one teacher and one evaluation set.

    Returns ({cfg_id: (adaptors, report)}, comparison rows sorted by final
    st-distance).
    """
    cfgs = dict(cfgs)
    keys = {(c.eval_seed, c.n_eval, c.teacher_steps) for c in cfgs.values()}
    if len(keys) > 1:
        raise ValueError("all configs must share the evaluation seed set and teacher steps")
    cache = cache or TargetCache(teacher, schedule)
    results = {}
    for cid, cfg in cfgs.items():
        log.info("ablation: %s", cid)
        results[cid] = adapt(teacher, schedule, cfg, cache)
    rows = [[cid, r.final.st_dist, r.final.hf_gap, r.params, r.wall_s] for cid, (_, r) in results.items()]
    rows.sort(key=lambda r: r[1])
    return results, rows


def write_comparison(path, rows) -> None:
    write_csv(path, COMPARISON_COLUMNS, rows)


def adaptor_spectrum_report(teacher: DenoiserParams, adaptors, schedule: DiffusionSchedule, x_T,
                            n_bins: int = 16, cutoff: float = DEFAULT_CUTOFF, path=None) -> dict:
    """Split the student's one-step output into backbone output plus adaptor
    delta and compare their spectra. Returns per-component arrays; a delta
    with no spectral energy is flagged degenerate."""
    x_T = np.asarray(x_T, dtype=np.float64)
    if x_T.ndim == 2:
        x_T = x_T[None]
    backbone = generate_one_step(make_denoiser(teacher), schedule, x_T)
    adapted = generate_one_step(make_denoiser(teacher, adaptors), schedule, x_T)
    delta = adapted - backbone
    comps = {"backbone": backbone, "delta": delta, "adapted": adapted}
    out = {"components": comps, "psd": {}, "hf_ratio": {}, "degenerate": {}}
    rows = []
    edges = bin_edges(x_T.shape[1], x_T.shape[2], n_bins)
    for name, imgs in comps.items():
        psds, ratios, flags = [], [], []
        for k, img in enumerate(imgs):
            energy = np.sum(np.abs(np.fft.fft2(img)) ** 2)
            if not energy > 0:
                psd, ratio, degenerate = np.zeros(n_bins), float("nan"), True
            else:
                psd, ratio, degenerate = radial_psd(img, n_bins), high_band_energy_ratio(img, cutoff), False
            psds.append(psd)
            ratios.append(ratio)
            flags.append(degenerate)
            for b in range(n_bins):
                rows.append([k, name, b, float(edges[b]), float(edges[b + 1]), float(psd[b]), ratio, int(degenerate)])
        out["psd"][name] = np.array(psds)
        out["hf_ratio"][name] = np.array(ratios)
        out["degenerate"][name] = bool(all(flags))
    if path is not None:
        write_csv(path, ["sample", "component", "bin_index", "radius_lo", "radius_hi", "normalized_energy",
                         "hf_ratio", "degenerate"], rows)
    return out


def config_dict(cfg: AdaptationConfig) -> dict:
    d = asdict(cfg)
    d["placement"] = ",".join(cfg.placement)
    return d


__all__ = ["AdaptationConfig", "RunReport", "Snapshot", "TargetCache", "adapt", "run_ablation",
           "adaptor_spectrum_report", "evaluate", "write_comparison", "config_dict"]
