"""Spatial data: images as 2-D float64 arrays, PGM/CSV I/O and the synthetic
pattern dataset."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from hipa.rng import SplitMix64

CLASSES = ("gratings", "disks", "checkerboards", "textured_rectangles")


class PGMError(ValueError):
    """Base class for PGM parse failures."""


class UnsupportedMagic(PGMError):
    pass


class MalformedHeader(PGMError):
    pass


class TruncatedPayload(PGMError):
    pass


def as_image(x, name: str = "image") -> np.ndarray:
    """Validate and return ``x`` as a 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite pixels")
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# PGM

def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and round half up to 0..255."""
    a = np.clip(as_image(image), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_pgm(image, path) -> None:
    q = quantize(image)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _header_tokens(data: bytes):
    """Yield (token, end_offset) for the four PGM header fields, skipping
    '#' comments."""
    pos, n = 0, len(data)
    for _ in range(4):
        while pos < n:
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("unexpected end of header")
        yield data[start:pos], pos


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise UnsupportedMagic(f"unsupported magic {data[:2]!r} in {path}")
    fields = list(_header_tokens(data))
    try:
        w, h, maxval = (int(tok) for tok, _ in fields[1:])
    except ValueError as exc:
        raise MalformedHeader(f"non-integer header field in {path}") from exc
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"bad dimensions {w}x{h} in {path}")
    if maxval != 255:
        raise MalformedHeader(f"maxval must be 255, got {maxval}")
    start = fields[-1][1] + 1  # exactly one whitespace byte after maxval
    payload = data[start:start + w * h]
    if len(payload) < w * h:
        raise TruncatedPayload(f"expected {w * h} pixel bytes, found {len(payload)} in {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# CSV

def write_csv(path, header, rows) -> None:
    """Plain RFC-4180 subset: comma separated, '.' decimal, repr-exact floats."""
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                         for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# patterns

def _coords(size: int):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def grating(size: int, fy: int, fx: int, phase: float = 0.0) -> np.ndarray:
    """Periodic sinusoid with (fy, fx) integer cycles per image, range [-1, 1]."""
    y, x = _coords(size)
    return np.cos(2.0 * np.pi * (fy * y + fx * x) / size + phase)


def checkerboard(size: int, period: int, offset: int = 0) -> np.ndarray:
    """Square checkerboard with side ``period // 2`` cells, values in {-1, 1}."""
    y, x = _coords(size)
    cell = max(period // 2, 1)
    return np.where(((np.floor((y + offset) / cell) + np.floor((x + offset) / cell)) % 2) == 0, 1.0, -1.0)


def oriented_grating(size: int, freq: float, angle: float, phase: float = 0.0) -> np.ndarray:
    """Sinusoid with ``freq`` cycles per image width along direction ``angle``;
    non-integer frequencies are allowed, so energy may spread over nearby bins."""
    y, x = _coords(size)
    return np.cos(2.0 * np.pi * freq * (np.cos(angle) * x + np.sin(angle) * y) / size + phase)


def rotated_checkerboard(size: int, period: float, angle: float, phase=(0.0, 0.0)) -> np.ndarray:
    """Checkerboard of square cells (side ``period / 2``) rotated by ``angle``,
    values in {-1, 1}."""
    y, x = _coords(size)
    u = np.cos(angle) * x + np.sin(angle) * y
    v = -np.sin(angle) * x + np.cos(angle) * y
    su = np.cos(2.0 * np.pi * u / period + phase[0]) >= 0
    sv = np.cos(2.0 * np.pi * v / period + phase[1]) >= 0
    return np.where(su == sv, 1.0, -1.0)


def smooth_disk(size: int, cy: float, cx: float, radius: float, softness: float) -> np.ndarray:
    """Logistic-edged disk, 1 inside and 0 outside."""
    y, x = _coords(size)
    r = np.hypot(y - cy, x - cx)
    return 1.0 / (1.0 + np.exp((r - radius) / softness))


def linear_gradient(size: int, angle: float) -> np.ndarray:
    """Ramp along ``angle`` spanning [-0.5, 0.5] over the image diagonal extent."""
    y, x = _coords(size)
    c = (size - 1) / 2.0
    proj = (x - c) * np.cos(angle) + (y - c) * np.sin(angle)
    span = (abs(np.cos(angle)) + abs(np.sin(angle))) * (size - 1)
    return proj / span if span > 0 else np.zeros_like(proj)


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 512
    size: int = 32
    seed: int = 0
    class_mix: tuple = field(default=(0.25, 0.25, 0.25, 0.25))

    def __post_init__(self):
        mix = np.asarray(self.class_mix, dtype=np.float64)
        if mix.shape != (len(CLASSES),):
            raise ValueError(f"class_mix needs {len(CLASSES)} proportions")
        if np.any(mix < 0) or not np.isclose(mix.sum(), 1.0, atol=1e-9):
            raise ValueError("class_mix must be nonnegative and sum to 1")
        if self.count < 0:
            raise ValueError("count must be >= 0")


def _background(rng: SplitMix64, size: int, use_disk: bool) -> np.ndarray:
    base = rng.uniform((), 0.35, 0.65)
    if use_disk:
        cy, cx = rng.uniform((2,), 0.3 * size, 0.7 * size)
        radius = rng.uniform((), 0.2 * size, 0.35 * size)
        sign = 1.0 if rng.uniform(()) < 0.5 else -1.0
        return base + sign * 0.25 * (smooth_disk(size, cy, cx, radius, 0.08 * size) - 0.5)
    ramp = linear_gradient(size, rng.uniform((), 0.0, 2.0 * np.pi))
    return base + rng.uniform((), 0.2, 0.4) * ramp


def _overlay(rng: SplitMix64, size: int, kind: str) -> np.ndarray:
    # free orientation and continuous frequency spread the texture energy over
    # an annulus rather than a few lattice bins, as in natural images
    angle = rng.uniform((), 0.0, np.pi)
    if kind == "grating":
        f = rng.uniform((), 3.0 * size / 16.0, size / 4.0)
        return oriented_grating(size, f, angle, rng.uniform((), 0.0, 2.0 * np.pi))
    period = rng.uniform((), max(size / 8.0, 2.0), max(7.0 * size / 32.0, 2.5))
    return rotated_checkerboard(size, period, angle, tuple(rng.uniform((2,), 0.0, 2.0 * np.pi)))


def render(rng: SplitMix64, size: int, label: int) -> np.ndarray:
    cls = CLASSES[label]
    amp = rng.uniform((), 0.08, 0.15)
    if cls == "gratings":
        img = _background(rng, size, False) + amp * _overlay(rng, size, "grating")
    elif cls == "disks":
        img = _background(rng, size, True) + amp * _overlay(rng, size, "grating")
    elif cls == "checkerboards":
        img = _background(rng, size, False) + amp * _overlay(rng, size, "checker")
    else:
        bg = _background(rng, size, rng.uniform(()) < 0.5)
        y, x = _coords(size)
        y0, x0 = rng.integers(0, size // 2, (2,))
        h, w = rng.integers(size // 3, size // 2 + 1, (2,))
        box = ((y >= y0) & (y < y0 + h) & (x >= x0) & (x < x0 + w)).astype(np.float64)
        tex = _overlay(rng, size, "grating" if rng.uniform(()) < 0.5 else "checker")
        img = bg + amp * (0.35 * tex + box * tex)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: DatasetSpec):
    """Deterministic list of (image, label) pairs; each image is a smooth
    background plus a periodic high-frequency overlay."""
    if spec.size < 8:
        raise ValueError(f"size must be >= 8, got {spec.size}")
    root = SplitMix64(spec.seed)
    labels = root.spawn(1).choice(spec.class_mix, (spec.count,))
    out = []
    for i, lab in enumerate(labels):
        img = render(root.spawn(2, i), spec.size, int(lab))
        out.append((img, CLASSES[int(lab)]))
    return out
