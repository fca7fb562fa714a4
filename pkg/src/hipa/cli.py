"""Command-line front end.

Every command writes into an output directory holding exactly one
``manifest.json``. The manifest is written before any output and records the
fully resolved parameters, so ``hipa rerun DIR/manifest.json --out NEW``
reproduces the outputs bit for bit.

Exit codes: 0 success, 1 unreadable input, 2 config error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from hipa import __version__
from hipa.autodiff.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from hipa.autodiff.denoiser import DenoiserParams, init_params, make_denoiser
from hipa.diffusion import (DEFAULT_BETA, DEFAULT_T, NumericalAbort, make_schedule, noise_batch,
                            sample_multistep, to_pixels, train_teacher, uniform_timesteps)
from hipa.edges import laplacian_edges, sobel_edges
from hipa.grid import DatasetSpec, PGMError, generate_dataset, read_pgm, write_csv, write_pgm
from hipa.lowrank import adaptor_tensors, adaptors_from_tensors, merge
from hipa.spectral import (DEFAULT_CUTOFF, DegenerateSpectrum, extract_band, high_band_energy_ratio, make_mask, mix_bands,
                           radial_psd, write_psd_csv)
from hipa.trainer import (AdaptationConfig, TargetCache, adapt, adaptor_spectrum_report, run_ablation,
                          write_comparison)

log = logging.getLogger("hipa")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class DataConfig:
    count: int = 512
    size: int = 32
    seed: int = 1
    class_mix: tuple = (0.25, 0.25, 0.25, 0.25)


@dataclass(frozen=True)
class TeacherConfig:
    data: str = ""
    data_count: int = 512
    data_seed: int = 1
    size: int = 32
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA[0]
    beta_end: float = DEFAULT_BETA[1]
    steps: int = 2000
    batch: int = 8
    lr: float = 5e-3
    decay: bool = True
    init_seed: int = 0
    seed: int = 0


@dataclass(frozen=True)
class SampleConfig:
    steps: tuple = (1, 2, 3, 5, 10, 15)
    n: int = 8
    seed: int = 123
    run_id: str = "samples"


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], (int, float)):
            kind = type(default[0])
            return tuple(kind(s) for s in items)
        return tuple(items)
    return raw


def parse_config_text(text: str, schema: type) -> dict:
    """``key = value`` lines with '#' comments into typed overrides; keys are
    checked against the dataclass ``schema``."""
    defaults = {f.name: f.default for f in fields(schema)}
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(sorted(defaults))}")
        try:
            out[key] = _parse_value(raw, defaults[key])
        except ValueError as e:
            raise ConfigError(f"line {n}: {key}: {e}") from None
    return out


def resolve_config(schema: type, path=None, sets=(), env=None):
    """Defaults, then the config file, then --set overrides, then HIPA_SEED."""
    text = ""
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InputError(f"cannot read config {path}: {e.strerror}") from None
    text += "\n" + "\n".join(sets)
    values = parse_config_text(text, schema)
    env = os.environ if env is None else env
    if env.get("HIPA_SEED") and "seed" in {f.name for f in fields(schema)}:
        try:
            values["seed"] = int(env["HIPA_SEED"])
        except ValueError:
            raise ConfigError(f"HIPA_SEED must be an integer, got {env['HIPA_SEED']!r}") from None
    try:
        return schema(**values)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def _echo(cfg) -> dict:
    d = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def _from_echo(schema: type, d: dict):
    try:
        return schema(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- manifests

def _digest(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """An output directory plus its manifest. The manifest is written on
    entry, then rewritten on exit with the outputs and the end time."""

    def __init__(self, command: str, params: dict, out, inputs=()):
        self.out = Path(out)
        self.manifest = {
            "command": command,
            "params": params,
            "seed": params.get("config", {}).get("seed", params.get("seed")),
            "version": __version__,
            "inputs": [str(Path(p).resolve()) for p in inputs],
            "outputs": [],
            "start": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "end": None,
        }

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self._write()
        return self

    def __exit__(self, *exc):
        self.manifest["end"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.manifest["status"] = "ok" if exc[0] is None else exc[0].__name__
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != MANIFEST)
        self.manifest["outputs"] = [{"path": str(p.relative_to(self.out)), "sha256": _digest(p)}
                                    for p in files] if exc[0] is None else []
        self._write()
        return False

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _write(self):
        (self.out / MANIFEST).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- loading

def _read_image(path) -> np.ndarray:
    try:
        return read_pgm(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except PGMError as e:
        raise InputError(f"{path}: {e}") from None


def _read_ckpt(path):
    try:
        return read_checkpoint(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except CheckpointError as e:
        raise InputError(str(e)) from None


def load_teacher(path):
    """A teacher checkpoint and the schedule recorded in its metadata."""
    tensors, groups, meta = _read_ckpt(path)
    size = int(meta.get("size", 32))
    T = int(meta.get("T", DEFAULT_T))
    params = DenoiserParams(tensors, groups, size, T, meta)
    schedule = make_schedule(T, float(meta.get("beta_start", DEFAULT_BETA[0])),
                             float(meta.get("beta_end", DEFAULT_BETA[1])))
    return params, schedule


def load_adaptors(path):
    tensors, _, _ = _read_ckpt(path)
    try:
        return adaptors_from_tensors(tensors)
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: not an adaptor checkpoint ({e})") from None


def save_adaptors(path, adaptors) -> None:
    write_checkpoint(path, adaptor_tensors(adaptors))


def _load_dataset(cfg: TeacherConfig):
    if not cfg.data:
        return [img for img, _ in generate_dataset(DatasetSpec(cfg.data_count, cfg.size, cfg.data_seed))]
    root = Path(cfg.data)
    files = sorted(root.glob("images/*.pgm"))
    if not files:
        raise InputError(f"no images under {root / 'images'}")
    return [_read_image(f) for f in files]


# ---------------------------------------------------------------- commands

def cmd_gen_data(p: dict, out) -> None:
    cfg = _from_echo(DataConfig, p["config"])
    data = generate_dataset(DatasetSpec(cfg.count, cfg.size, cfg.seed, cfg.class_mix))
    with Run("gen-data", p, out) as run:
        rows = []
        for i, (img, label) in enumerate(data):
            name = f"images/{i:05d}.pgm"
            write_pgm(img, run.path(name))
            rows.append([i, label, name])
        write_csv(run.path("labels.csv"), ["index", "label", "file"], rows)


def _psd_one(args):
    path, n_bins = args
    img = _read_image(path)
    return radial_psd(img, n_bins), img.shape


def _hf_ratio(img, cutoff=DEFAULT_CUTOFF) -> float:
    try:
        return high_band_energy_ratio(img, cutoff)
    except DegenerateSpectrum:
        return float("nan")


def cmd_analyze_psd(p: dict, out) -> None:
    images, n_bins, jobs = p["images"], p["n_bins"], p.get("jobs", 1)
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    for path in images:
        if not Path(path).is_file():
            raise InputError(f"cannot read {path}: no such file")
    args = [(path, n_bins) for path in images]
    if jobs > 1 and len(images) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            res = list(ex.map(_psd_one, args))
    else:
        res = [_psd_one(a) for a in args]
    shapes = {shape for _, shape in res}
    if len(shapes) > 1:
        raise InputError(f"images differ in size: {sorted(shapes)}")
    with Run("analyze-psd", p, out, images) as run:
        labels = [Path(x).name for x in images]
        write_psd_csv(run.path("psd.csv"), [psd for psd, _ in res], res[0][1], labels)
        ratios = [[Path(x).name, _hf_ratio(_read_image(x), p["cutoff"])] for x in images]
        write_csv(run.path("band_energy.csv"), ["image", "high_band_ratio"], ratios)


def cmd_split_bands(p: dict, out) -> None:
    img = _read_image(p["image"])
    h, w = img.shape
    low = extract_band(img, make_mask(h, w, "low", p["cutoff"]))
    high = extract_band(img, make_mask(h, w, "high", p["cutoff"]))
    with Run("split-bands", p, out, [p["image"]]) as run:
        write_pgm(low, run.path("low.pgm"))
        # the high band is zero-mean; shift it to mid-grey for viewing
        write_pgm(high + 0.5, run.path("high.pgm"))
        write_csv(run.path("bands.csv"), ["band", "energy"],
                  [["low", float(np.sum(low ** 2))], ["high", float(np.sum(high ** 2))]])


def cmd_mixup(p: dict, out) -> None:
    hi, lo = _read_image(p["high"]), _read_image(p["low"])
    if hi.shape != lo.shape:
        raise InputError(f"size mismatch: {p['high']} is {hi.shape}, {p['low']} is {lo.shape}")
    with Run("mixup", p, out, [p["high"], p["low"]]) as run:
        write_pgm(mix_bands(hi, lo, p["cutoff"]), run.path("mix.pgm"))


def cmd_edges(p: dict, out) -> None:
    img = _read_image(p["image"])
    op = {"sobel": sobel_edges, "laplacian": laplacian_edges}[p["operator"]]
    with Run("edges", p, out, [p["image"]]) as run:
        write_pgm(p["scale"] * op(img), run.path(f"{p['operator']}.pgm"))


def cmd_train_teacher(p: dict, out) -> None:
    cfg = _from_echo(TeacherConfig, p["config"])
    if cfg.steps < 0 or cfg.batch < 1:
        raise ConfigError("steps must be >= 0 and batch >= 1")
    try:
        schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        params = init_params(cfg.init_seed, cfg.size, cfg.T)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    images = _load_dataset(cfg)
    if any(im.shape != (cfg.size, cfg.size) for im in images):
        raise InputError(f"dataset images are not {cfg.size}x{cfg.size}")
    with Run("train-teacher", p, out, [cfg.data] if cfg.data else []) as run:
        res = train_teacher(params, images, schedule, cfg.steps, cfg.batch, cfg.lr, cfg.seed, cfg.decay)
        rm = res.running_mean()
        write_csv(run.path("loss.csv"), ["step", "loss", "running_mean"],
                  [[i, l, m] for i, (l, m) in enumerate(zip(res.losses, rm))])
        meta = {"size": cfg.size, "T": cfg.T, "beta_start": repr(cfg.beta_start), "beta_end": repr(cfg.beta_end)}
        write_checkpoint(run.path("teacher.ckpt"), res.params.tensors, res.params.groups, meta)


def cmd_sample(p: dict, out) -> None:
    cfg = _from_echo(SampleConfig, p["config"])
    teacher, schedule = load_teacher(p["teacher"])
    adaptors = load_adaptors(p["adaptors"]) if p.get("adaptors") else None
    try:
        samplers = [uniform_timesteps(schedule.T, n) for n in cfg.steps]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.n < 1:
        raise ConfigError("n must be >= 1")
    eps = make_denoiser(teacher, adaptors)
    x_T = noise_batch(cfg.seed, 0, cfg.n, teacher.size)
    inputs = [p["teacher"]] + ([p["adaptors"]] if p.get("adaptors") else [])
    with Run("sample", p, out, inputs) as run:
        rows = []
        for n, sc in zip(cfg.steps, samplers):
            imgs = to_pixels(sample_multistep(eps, schedule, sc, x_T))
            for i, img in enumerate(imgs):
                write_pgm(img, run.path(f"{cfg.run_id}/{n}step_{i}.pgm"))
                rows.append([i, n, _hf_ratio(img)])
        write_csv(run.path(f"{cfg.run_id}/band_energy.csv"), ["seed", "steps", "high_band_ratio"], rows)


def _adaptation(d: dict) -> AdaptationConfig:
    return _from_echo(AdaptationConfig, d)


def cmd_adapt(p: dict, out) -> None:
    cfg = _adaptation(p["config"])
    teacher, schedule = load_teacher(p["teacher"])
    cache = TargetCache(teacher, schedule, jobs=p.get("jobs", 1))
    with Run("adapt", p, out, [p["teacher"]]) as run:
        try:
            adaptors, report = adapt(teacher, schedule, cfg, cache)
        except NumericalAbort as e:
            if e.last_good is not None:
                save_adaptors(run.path("adaptors.last_good.ckpt"), e.last_good)
            raise
        save_adaptors(run.path("adaptors.ckpt"), adaptors)
        report.write_csv(run.path("report.csv"))


def ablation_matrix(name: str, base: AdaptationConfig) -> dict:
    from dataclasses import replace

    matrices = {
        "table1": {"full": {}, "spatial_only": dict(fourier_hf=False, edge_hf=False),
                   "spatial_low": dict(edge_hf=False, band_mode="low")},
        "loss": {"spatial": dict(fourier_hf=False, edge_hf=False), "fourier": dict(edge_hf=False),
                 "edge": dict(fourier_hf=False), "both": {}},
        "band": {"high": {}, "low": dict(band_mode="low")},
        "placement": {"down": dict(placement=("down",)), "mid": dict(placement=("mid",)),
                      "up": dict(placement=("up",)), "all": dict(placement=("down", "mid", "up"))},
        "rank": {f"rank{k}": dict(rank=k) for k in (2, 4, 8)},
    }
    if name not in matrices:
        raise ConfigError(f"unknown matrix {name!r}; valid: {', '.join(matrices)}")
    try:
        return {cid: replace(base, **kw) for cid, kw in matrices[name].items()}
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_ablate(p: dict, out) -> None:
    base = _adaptation(p["config"])
    cfgs = ablation_matrix(p["matrix"], base)
    teacher, schedule = load_teacher(p["teacher"])
    cache = TargetCache(teacher, schedule, jobs=p.get("jobs", 1))
    with Run("ablate", p, out, [p["teacher"]]) as run:
        results, rows = run_ablation(teacher, schedule, cfgs, cache)
        for cid, (adaptors, report) in results.items():
            report.write_csv(run.path(f"{cid}/report.csv"))
            save_adaptors(run.path(f"{cid}/adaptors.ckpt"), adaptors)
        write_comparison(run.path("comparison.csv"), rows)


def cmd_adaptor_spectrum(p: dict, out) -> None:
    teacher, schedule = load_teacher(p["teacher"])
    adaptors = load_adaptors(p["adaptors"])
    x_T = noise_batch(p["seed"], 0, p["n"], teacher.size)
    with Run("adaptor-spectrum", p, out, [p["teacher"], p["adaptors"]]) as run:
        rep = adaptor_spectrum_report(teacher, adaptors, schedule, x_T, p["n_bins"], p["cutoff"],
                                      run.path("spectrum.csv"))
        write_csv(run.path("summary.csv"), ["component", "mean_hf_ratio", "degenerate"],
                  [[k, float(np.nanmean(v)) if not rep["degenerate"][k] else float("nan"),
                    int(rep["degenerate"][k])] for k, v in rep["hf_ratio"].items()])


def cmd_merge(p: dict, out) -> None:
    teacher, _ = load_teacher(p["teacher"])
    adaptors = load_adaptors(p["adaptors"])
    try:
        merged = merge(teacher, adaptors)
    except KeyError as e:
        raise InputError(f"adaptor target missing from teacher: {e}") from None
    with Run("merge", p, out, [p["teacher"], p["adaptors"]]) as run:
        write_checkpoint(run.path("merged.ckpt"), merged.tensors, merged.groups, teacher.meta)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "analyze-psd": cmd_analyze_psd,
    "split-bands": cmd_split_bands,
    "mixup": cmd_mixup,
    "edges": cmd_edges,
    "train-teacher": cmd_train_teacher,
    "sample": cmd_sample,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "adaptor-spectrum": cmd_adaptor_spectrum,
    "merge": cmd_merge,
}

SCHEMAS = {"gen-data": DataConfig, "train-teacher": TeacherConfig, "sample": SampleConfig,
           "adapt": AdaptationConfig, "ablate": AdaptationConfig}

PATH_KEYS = ("image", "high", "low", "teacher", "adaptors")


# ---------------------------------------------------------------- argv

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hipa", description="Desk-scale one-step diffusion adaptation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help, config=False, jobs=False):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("-o", "--out", required=True, help="output directory")
        if config:
            sp.add_argument("-c", "--config", help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config key (repeatable)")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        return sp

    add("gen-data", "render the synthetic dataset", config=True)
    sp = add("analyze-psd", "radial PSD of PGM images", jobs=True)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--n-bins", type=int, default=16)
    sp.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    sp = add("split-bands", "split an image into low and high bands")
    sp.add_argument("image")
    sp.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    sp = add("mixup", "high band of one image over the low band of another")
    sp.add_argument("high")
    sp.add_argument("low")
    sp.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    sp = add("edges", "Sobel or Laplacian edge map")
    sp.add_argument("image")
    sp.add_argument("--operator", choices=["sobel", "laplacian"], default="sobel")
    sp.add_argument("--scale", type=float, default=0.25, help="gain applied before writing (default 0.25)")
    add("train-teacher", "train the epsilon-prediction teacher", config=True)
    sp = add("sample", "multi-step samples from a teacher", config=True)
    sp.add_argument("teacher")
    sp.add_argument("--adaptors")
    sp = add("adapt", "train low-rank adaptors for one-step generation", config=True, jobs=True)
    sp.add_argument("teacher")
    sp = add("ablate", "run an ablation matrix of adaptation configs", config=True, jobs=True)
    sp.add_argument("teacher")
    sp.add_argument("--matrix", default="table1", help="table1, loss, band, placement or rank")
    sp = add("adaptor-spectrum", "spectra of backbone output and adaptor delta")
    sp.add_argument("teacher")
    sp.add_argument("adaptors")
    sp.add_argument("--n", type=int, default=32)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--n-bins", type=int, default=16)
    sp.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF)
    sp = add("merge", "fold adaptors into the teacher weights")
    sp.add_argument("teacher")
    sp.add_argument("adaptors")
    sp = sub.add_parser("rerun", help="repeat a command from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--out", required=True)
    return ap


def params_from_args(args) -> dict:
    p = {}
    for k, v in vars(args).items():
        if k in ("command", "out", "config", "set", "verbose") or v is None:
            continue
        p[k] = v
    for k in PATH_KEYS:
        if p.get(k):
            p[k] = str(Path(p[k]).resolve())
    if "images" in p:
        p["images"] = [str(Path(x).resolve()) for x in p["images"]]
    if args.command in SCHEMAS:
        cfg = resolve_config(SCHEMAS[args.command], args.config, args.set)
        if args.command == "train-teacher" and cfg.data:
            from dataclasses import replace
            cfg = replace(cfg, data=str(Path(cfg.data).resolve()))
        p["config"] = _echo(cfg)
    return p


def execute(command: str, params: dict, out) -> None:
    COMMANDS[command](params, out)


def rerun(manifest_path, out) -> None:
    try:
        m = json.loads(Path(manifest_path).read_text())
    except OSError as e:
        raise InputError(f"cannot read {manifest_path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{manifest_path}: not a manifest ({e})") from None
    if m.get("command") not in COMMANDS:
        raise InputError(f"{manifest_path}: unknown command {m.get('command')!r}")
    execute(m["command"], m["params"], out)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            rerun(args.manifest, args.out)
        else:
            execute(args.command, params_from_args(args), args.out)
    except ConfigError as e:
        print(f"hipa: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as e:
        print(f"hipa: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalAbort as e:
        print(f"hipa: numeric abort: {e}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
