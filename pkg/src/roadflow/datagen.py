"""Synthetic desk-scale city generator.

Produces a seeded road layout, a grey-scale road raster at twice the fine
resolution, integer vehicle flows concentrated on the roads, matching
external-factor streams (weather code, temperature, wind, day-of-week,
time-of-day), and dataset serialization in the RTFM tensor format.

Flows are integers by construction (floor of a deterministic rate plus
Poisson noise), so coarse maps equal exact block sums of fine maps and the
equality survives the float32 file format bit-for-bit.

Besides the diurnal profiles, two slower processes shape the maps: each
segment carries a sinusoidal activity swing shared along its whole length,
and a citywide congestion regime drifts between arterial-heavy and
secondary-heavy states. Neither is a function of the calendar alone, so a
model can only pick them up by looking at the maps, and the within-block
flow split they induce is only visible at distance: locally the per-segment
swings mask the regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import TensorFormatError, make_rng, read_tensor, write_tensor

DIRECTION_NAMES = ("horizontal", "vertical", "diag_down", "diag_up")
_DIRECTION_STEPS = {
    "horizontal": (0, 1),
    "vertical": (1, 0),
    "diag_down": (1, 1),
    "diag_up": (1, -1),
}

ARTERIAL_INTENSITY = 1.0
SECONDARY_INTENSITY = 0.5
# Per-segment base rates are drawn from overlapping class ranges, so the
# drawn raster intensity alone cannot rank segments by carried volume.
_RATE_RANGE = {"arterial": (25.0, 50.0), "secondary": (10.0, 40.0)}
_WIDTH = {"arterial": 2, "secondary": 1}
# Flow multiplier per weather code; code 13 keeps >80% of fair-weather flow.
WEATHER_CODES = 14
_WEATHER_PENALTY = 0.015

# Citywide congestion regime: a slow mean-reverting walk in [-1, 1] that
# shifts flow share between road classes. Decorrelates over roughly a day,
# so it is not a function of the calendar and has to be read off the map.
_REGIME_RHO = 0.99
_REGIME_DRIVE = 0.10
_REGIME_EFFECT = {"arterial": 0.30, "secondary": -0.25}

_GEO_STREAM = 11
_EXT_STREAM = 12
_REGIME_STREAM = 13
_FLOW_STREAM_BASE = 10_000


@dataclass(frozen=True)
class Segment:
    """One straight road piece in fine-grid coordinates, plus its traffic law.

    ``gain_amp``/``gain_period``/``gain_phase`` parameterize a slow sinusoidal
    activity swing shared along the whole segment; ``rate_scale`` decouples
    drawn intensity from carried flow (a high-intensity road can be quiet).
    """

    r0: int
    c0: int
    r1: int
    c1: int
    width: int
    intensity: float
    direction: str
    road_class: str
    base_rate: float
    rate_scale: float
    gain_amp: float
    gain_period: int
    gain_phase: float


@dataclass(frozen=True)
class RoadGeometry:
    i_f: int
    j_f: int
    segments: tuple[Segment, ...]


def gen_road_geometry(seed, i_f, j_f, n_arterial, n_secondary,
                      suburban_artifact: bool = True) -> RoadGeometry:
    """Lay out arterials (width 2, intensity 1.0) and secondaries (width 1, 0.5).

    Direction classes cycle horizontal, vertical and the two diagonals, so all
    four appear whenever at least four segments are requested.  Base rates are
    drawn per segment from overlapping class ranges.  With
    ``suburban_artifact`` the last arterial keeps full intensity but carries a
    tenth of the usual flow.
    """
    if n_arterial < 1 or n_secondary < 1:
        raise ValueError("need at least one arterial and one secondary road")
    if i_f < 8 or j_f < 8:
        raise ValueError("fine grid too small for road layout")
    rng = make_rng(seed, _GEO_STREAM)
    segments = []
    total = n_arterial + n_secondary
    for k in range(total):
        arterial = k < n_arterial
        road_class = "arterial" if arterial else "secondary"
        width = _WIDTH[road_class]
        direction = DIRECTION_NAMES[k % 4]
        if direction == "horizontal":
            r0 = int(rng.integers(0, i_f - width + 1))
            r1, c0, c1 = r0, 0, j_f - 1
        elif direction == "vertical":
            c0 = int(rng.integers(0, j_f - width + 1))
            c1, r0, r1 = c0, 0, i_f - 1
        elif direction == "diag_down":
            c0 = int(rng.integers(0, j_f // 2))
            length = min(i_f, j_f - c0)
            r0, r1, c1 = 0, length - 1, c0 + length - 1
        else:
            c0 = int(rng.integers(j_f // 2, j_f))
            length = min(i_f, c0 + 1)
            r0, r1, c1 = 0, length - 1, c0 - (length - 1)
        rate_scale = 1.0
        if suburban_artifact and arterial and k == n_arterial - 1:
            rate_scale = 0.1
        segments.append(Segment(
            r0=r0, c0=c0, r1=r1, c1=c1, width=width,
            intensity=ARTERIAL_INTENSITY if arterial else SECONDARY_INTENSITY,
            direction=direction, road_class=road_class,
            base_rate=float(rng.uniform(*_RATE_RANGE[road_class])),
            rate_scale=rate_scale,
            gain_amp=float(rng.uniform(0.15, 0.25)),
            gain_period=int(rng.choice((16, 24, 32, 48))),
            gain_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        ))
    return RoadGeometry(i_f=i_f, j_f=j_f, segments=tuple(segments))


def segment_mask(seg: Segment, i_f, j_f) -> np.ndarray:
    """Boolean fine-grid occupancy of one segment, width included."""
    mask = np.zeros((i_f, j_f), dtype=bool)
    dr, dc = _DIRECTION_STEPS[seg.direction]
    steps = max(abs(seg.r1 - seg.r0), abs(seg.c1 - seg.c0)) + 1
    r, c = seg.r0, seg.c0
    for _ in range(steps):
        for w in range(seg.width):
            # thickness grows along rows for horizontal roads, cols otherwise
            rw, cw = (r + w, c) if seg.direction == "horizontal" else (r, c + w)
            if 0 <= rw < i_f and 0 <= cw < j_f:
                mask[rw, cw] = True
        r += dr
        c += dc
    return mask


@lru_cache(maxsize=8)
def _occupancy(g: RoadGeometry) -> np.ndarray:
    if not g.segments:
        return np.zeros((0, g.i_f, g.j_f), dtype=bool)
    return np.stack([segment_mask(s, g.i_f, g.j_f) for s in g.segments])


def rasterize_roads(g: RoadGeometry, i_f, j_f) -> np.ndarray:
    """Grey-scale raster at 2x fine resolution: max covering intensity per cell."""
    if (i_f, j_f) != (g.i_f, g.j_f):
        raise ValueError("raster extents disagree with geometry")
    fine = np.zeros((i_f, j_f))
    masks = _occupancy(g)
    for seg, mask in zip(g.segments, masks):
        np.maximum(fine, mask * seg.intensity, out=fine)
    return np.kron(fine, np.ones((2, 2)))[..., None]


def _gauss(h, mu, sigma):
    return np.exp(-((h - mu) ** 2) / (2.0 * sigma * sigma))


def diurnal_profile(road_class: str, hours, weekday: bool):
    """Relative activity level by hour of day.

    Arterials peak twice on weekdays (around 8:00 and 18:00) and flatten on
    weekends; secondaries carry a single midday hump that strengthens on
    weekends.  Values stay within (0, 1.1).
    """
    h = np.asarray(hours, dtype=float)
    if road_class == "arterial":
        if weekday:
            return 0.15 + 0.9 * (_gauss(h, 8.0, 1.5) + _gauss(h, 18.0, 1.5))
        return 0.20 + 0.5 * _gauss(h, 13.0, 4.0)
    if weekday:
        return 0.15 + 0.75 * _gauss(h, 13.0, 3.0)
    return 0.20 + 0.8 * _gauss(h, 13.0, 3.0)


def weather_factor(code):
    return 1.0 - _WEATHER_PENALTY * np.asarray(code, dtype=float)


def gen_regime_series(seed, total: int) -> np.ndarray:
    """Citywide congestion regime per interval, clipped to [-1, 1].

    A seeded mean-reverting walk; positive values concentrate flow on the
    arterials, negative values push it onto the secondaries.  The relaxation
    time (about a day at 15-minute cadence) keeps the regime independent of
    time-of-day, so a per-slot historical average carries no information
    about it: it is only observable through the maps themselves.
    """
    if total < 0:
        raise ValueError("negative series length")
    rng = make_rng(seed, _REGIME_STREAM)
    eta = rng.normal(0.0, 1.0, total)
    z = np.empty(total)
    acc = 0.0
    for t in range(total):
        acc = _REGIME_RHO * acc + _REGIME_DRIVE * eta[t]
        acc = min(1.0, max(-1.0, acc))
        z[t] = acc
    return z


def simulate_fine_flow(g: RoadGeometry, t: int, seed, *,
                       intervals_per_day=96, interval_minutes=15,
                       start_dow=0, weather_code=0, regime=0.0,
                       noise_scale=0.2, noise_base=0.2) -> np.ndarray:
    """Integer inflow/outflow map for absolute interval index ``t``.

    Deterministic part: sum over covering segments of intensity x base rate x
    rate scale x diurnal profile x sinusoidal gain x weather factor x regime
    multiplier, floored.  The regime value shifts flow share between the road
    classes (arterials up, secondaries down for positive values).  The outflow
    channel evaluates the profile half an hour earlier.  Noise is Poisson with
    mean ``noise_scale * rate + noise_base`` drawn from a counter-based stream
    keyed by (seed, t), so any subset of timestamps can be generated
    independently in any order.
    """
    if t < 0:
        raise ValueError("negative timestamp")
    if not -1.0 <= regime <= 1.0:
        raise ValueError("regime outside [-1, 1]")
    day, tod = divmod(int(t), intervals_per_day)
    dow = (start_dow + day) % 7
    weekday = dow < 5
    h_in = (tod + 0.5) * interval_minutes / 60.0
    h_out = (h_in - 0.5) % 24.0
    wfac = float(weather_factor(weather_code))
    masks = _occupancy(g)
    rate = np.zeros((g.i_f, g.j_f, 2))
    for seg, mask in zip(g.segments, masks):
        gain = 1.0 + seg.gain_amp * math.sin(
            2.0 * math.pi * t / seg.gain_period + seg.gain_phase)
        shift = 1.0 + _REGIME_EFFECT[seg.road_class] * regime
        amp = seg.intensity * seg.base_rate * seg.rate_scale * gain * wfac * shift
        prof_in = float(diurnal_profile(seg.road_class, h_in, weekday))
        prof_out = float(diurnal_profile(seg.road_class, h_out, weekday))
        rate[..., 0] += mask * (amp * prof_in)
        rate[..., 1] += mask * (amp * prof_out)
    flow = np.floor(rate)
    if noise_scale > 0.0 or noise_base > 0.0:
        rng = make_rng(seed, _FLOW_STREAM_BASE + int(t))
        flow += rng.poisson(noise_scale * rate + noise_base).astype(float)
    return flow


def aggregate_coarse(fine: np.ndarray, n: int) -> np.ndarray:
    """Block-sum the two trailing spatial axes by a factor of ``n``."""
    if n < 1:
        raise ValueError("block factor must be >= 1")
    fine = np.asarray(fine)
    if fine.ndim < 3:
        raise ValueError("expected (..., height, width, channels)")
    h, w, ch = fine.shape[-3:]
    if h % n or w % n:
        raise ValueError(f"extents {h}x{w} not divisible by {n}")
    lead = fine.shape[:-3]
    blocked = fine.reshape(lead + (h // n, n, w // n, n, ch))
    return blocked.sum(axis=(-4, -2))


def gen_external_series(seed, days, intervals_per_day, *,
                        interval_minutes=15, start_dow=0) -> np.ndarray:
    """(T, 5) matrix: weather code, scaled temperature, scaled wind, dow, tod.

    Weather follows a seeded reflecting random walk over the 14 codes;
    temperature and wind mix daily sinusoids, a slow drift, and AR(1) noise,
    then min-max scale to [0, 1].  Values are float32-quantized so file round
    trips are identities.
    """
    if days < 1 or intervals_per_day < 1:
        raise ValueError("need positive day and interval counts")
    total = days * intervals_per_day
    rng = make_rng(seed, _EXT_STREAM)
    codes = np.empty(total)
    code = int(rng.integers(0, 5))
    moves = rng.uniform(0.0, 1.0, total)
    for t in range(total):
        codes[t] = code
        if moves[t] < 0.075:
            code = max(0, code - 1)
        elif moves[t] > 0.925:
            code = min(WEATHER_CODES - 1, code + 1)
    idx = np.arange(total)
    h = (idx % intervals_per_day + 0.5) * interval_minutes / 60.0
    d = idx // intervals_per_day

    def ar1(rho, amp):
        eta = rng.normal(0.0, 1.0, total)
        out = np.empty(total)
        acc = 0.0
        for t in range(total):
            acc = rho * acc + amp * eta[t]
            out[t] = acc
        return out

    temp = (10.0 + 8.0 * np.sin(2.0 * math.pi * (h - 8.0) / 24.0)
            + 3.0 * np.sin(2.0 * math.pi * d / max(days, 1)) + ar1(0.9, 0.3))
    wind = (5.0 + 3.0 * np.sin(2.0 * math.pi * (h - 12.0) / 24.0 + 1.0)
            + ar1(0.8, 0.5))

    def scale01(x):
        lo, hi = x.min(), x.max()
        if hi <= lo:
            return np.zeros_like(x)
        return (x - lo) / (hi - lo)

    dow = (start_dow + d) % 7
    tod = idx % intervals_per_day
    ext = np.stack([codes, scale01(temp), scale01(wind),
                    dow.astype(float), tod.astype(float)], axis=1)
    return ext.astype(np.float32).astype(np.float64)


@dataclass
class Dataset:
    """In-memory synthetic dataset with its calendar and split bounds."""

    fine: np.ndarray        # (T, i_f, j_f, 2) integer-valued flows
    coarse: np.ndarray      # (T, i_c, j_c, 2) exact block sums
    external: np.ndarray    # (T, 5)
    road: np.ndarray        # (2 i_f, 2 j_f, 1)
    n: int
    interval_minutes: int
    intervals_per_day: int
    start_dow: int
    seed: int
    splits: dict            # name -> (lo, hi) sample index bounds

    @property
    def count(self):
        return self.fine.shape[0]

    def split_range(self, name: str) -> tuple[int, int]:
        if name not in self.splits:
            raise ValueError(f"unknown split {name!r}")
        return self.splits[name]

    def split_indices(self, name: str) -> np.ndarray:
        lo, hi = self.split_range(name)
        return np.arange(lo, hi)


def build_dataset(cfg) -> Dataset:
    """Generate the full city described by a run configuration."""
    cfg.validate()
    g = gen_road_geometry(cfg.seed, cfg.i_f, cfg.j_f, cfg.n_arterial,
                          cfg.n_secondary, suburban_artifact=cfg.suburban_artifact)
    road = rasterize_roads(g, cfg.i_f, cfg.j_f)
    ext = gen_external_series(cfg.seed, cfg.days, cfg.intervals_per_day,
                              interval_minutes=cfg.interval_minutes,
                              start_dow=cfg.start_dow)
    total = cfg.days * cfg.intervals_per_day
    regime = gen_regime_series(cfg.seed, total)
    fine = np.empty((total, cfg.i_f, cfg.j_f, 2))
    for t in range(total):
        fine[t] = simulate_fine_flow(
            g, t, cfg.seed,
            intervals_per_day=cfg.intervals_per_day,
            interval_minutes=cfg.interval_minutes,
            start_dow=cfg.start_dow,
            weather_code=int(ext[t, 0]),
            regime=float(regime[t]),
            noise_scale=cfg.noise_scale, noise_base=cfg.noise_base)
    coarse = aggregate_coarse(fine, cfg.n)
    ipd = cfg.intervals_per_day
    splits = {
        "train": (0, cfg.train_days * ipd),
        "val": (cfg.train_days * ipd, (cfg.train_days + cfg.val_days) * ipd),
        "test": ((cfg.train_days + cfg.val_days) * ipd, total),
    }
    return Dataset(fine=fine, coarse=coarse, external=ext, road=road,
                   n=cfg.n, interval_minutes=cfg.interval_minutes,
                   intervals_per_day=cfg.intervals_per_day,
                   start_dow=cfg.start_dow, seed=cfg.seed, splits=splits)


def road_flow_correlation(road: np.ndarray, fine: np.ndarray) -> float:
    """Pearson correlation between road intensity and time-mean total flow."""
    i_f, j_f = fine.shape[1], fine.shape[2]
    road_fine = road[..., 0].reshape(i_f, 2, j_f, 2).mean(axis=(1, 3))
    mean_flow = fine.sum(axis=-1).mean(axis=0)
    return float(np.corrcoef(road_fine.ravel(), mean_flow.ravel())[0, 1])


def write_dataset(path, ds: Dataset) -> None:
    """Serialize to a directory: manifest.txt, road/external tensors, per-sample maps."""
    base = Path(path)
    (base / "fine").mkdir(parents=True, exist_ok=True)
    (base / "coarse").mkdir(parents=True, exist_ok=True)
    write_tensor(base / "road.rtfm", ds.road)
    write_tensor(base / "external.rtfm", ds.external)
    for idx in range(ds.count):
        write_tensor(base / "fine" / f"{idx:06d}.rtfm", ds.fine[idx])
        write_tensor(base / "coarse" / f"{idx:06d}.rtfm", ds.coarse[idx])
    lines = {
        "count": ds.count,
        "i_f": ds.fine.shape[1], "j_f": ds.fine.shape[2],
        "i_c": ds.coarse.shape[1], "j_c": ds.coarse.shape[2],
        "n": ds.n,
        "interval_minutes": ds.interval_minutes,
        "intervals_per_day": ds.intervals_per_day,
        "start_dow": ds.start_dow,
        "seed": ds.seed,
    }
    for name, (lo, hi) in ds.splits.items():
        lines[f"split_{name}"] = f"{lo}:{hi}"
    text = "".join(f"{k}={lines[k]}\n" for k in sorted(lines))
    (base / "manifest.txt").write_text(text)


def _parse_manifest(path: Path) -> dict:
    fields = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TensorFormatError(f"bad manifest line: {raw!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def read_dataset(path) -> Dataset:
    """Load a dataset directory; validates manifest consistency."""
    base = Path(path)
    manifest = base / "manifest.txt"
    if not manifest.is_file():
        raise TensorFormatError(f"missing dataset manifest under {base}")
    fields = _parse_manifest(manifest)
    try:
        count = int(fields["count"])
        i_f, j_f = int(fields["i_f"]), int(fields["j_f"])
        i_c, j_c = int(fields["i_c"]), int(fields["j_c"])
        n = int(fields["n"])
        interval_minutes = int(fields["interval_minutes"])
        intervals_per_day = int(fields["intervals_per_day"])
        start_dow = int(fields["start_dow"])
        seed = int(fields["seed"])
    except KeyError as missing:
        raise TensorFormatError(f"manifest missing key {missing}") from None
    if i_f != n * i_c or j_f != n * j_c:
        raise TensorFormatError("manifest extents disagree with block factor")
    splits = {}
    for key, value in fields.items():
        if key.startswith("split_"):
            lo, _, hi = value.partition(":")
            splits[key[len("split_"):]] = (int(lo), int(hi))
    road = read_tensor(base / "road.rtfm")
    external = read_tensor(base / "external.rtfm")
    fine = np.empty((count, i_f, j_f, 2))
    coarse = np.empty((count, i_c, j_c, 2))
    for idx in range(count):
        fine[idx] = _expect_shape(read_tensor(base / "fine" / f"{idx:06d}.rtfm"),
                                  (i_f, j_f, 2), "fine map")
        coarse[idx] = _expect_shape(read_tensor(base / "coarse" / f"{idx:06d}.rtfm"),
                                    (i_c, j_c, 2), "coarse map")
    _expect_shape(road, (2 * i_f, 2 * j_f, 1), "road raster")
    _expect_shape(external, (count, 5), "external series")
    return Dataset(fine=fine, coarse=coarse, external=external, road=road,
                   n=n, interval_minutes=interval_minutes,
                   intervals_per_day=intervals_per_day, start_dow=start_dow,
                   seed=seed, splits=splits)


def _expect_shape(arr, shape, what):
    if arr.shape != shape:
        raise TensorFormatError(f"{what} has shape {arr.shape}, expected {shape}")
    return arr
