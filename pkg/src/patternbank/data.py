"""City datasets: loading, validation, resampling, patching, masking, splits,
and a synthetic multi-city generator with planted shared daily patterns.

City directory format
---------------------
``meta.json``       {"name", "interval_minutes", "start_offset", "num_nodes"}
``adjacency.csv``   N rows x N comma-separated nonnegative reals
``speed.csv``       T rows x N comma-separated reals; a blank cell is missing

``start_offset`` is the step index of the first sample within the week
(0 = Monday 00:00 at the native interval).

All functions here are pure over immutable inputs; randomness is confined to
explicitly passed seeded generators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MINUTES_PER_DAY = 1440
HOURS_PER_WEEK = 168
MAX_GAP_STEPS = 3  # longest run of missing values repaired by interpolation


@dataclass
class CityDataset:
    """One city's graph and speed series.

    ``speed`` has shape (T_total, N, 2): channel 0 is speed in the dataset's
    native unit, channel 1 the time-of-day fraction in [0, 1).
    """

    name: str
    adjacency: np.ndarray
    speed: np.ndarray
    interval_minutes: int
    start_offset: int = 0

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_steps(self) -> int:
        return self.speed.shape[0]

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.interval_minutes

    @property
    def steps_per_week(self) -> int:
        return 7 * self.steps_per_day

    def validate(self) -> "CityDataset":
        A, X = self.adjacency, self.speed
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"{self.name}: adjacency must be square, got {A.shape}")
        if X.ndim != 3 or X.shape[2] != 2:
            raise ValueError(f"{self.name}: speed tensor must be (T, N, 2), got {X.shape}")
        if X.shape[1] != A.shape[0]:
            raise ValueError(f"{self.name}: dimension mismatch between adjacency "
                             f"({A.shape[0]} nodes) and speed ({X.shape[1]} columns)")
        if np.any(A < 0):
            raise ValueError(f"{self.name}: adjacency has negative entries")
        if np.any(np.diag(A) != 0):
            raise ValueError(f"{self.name}: adjacency diagonal must be zero")
        if np.any(np.isnan(X[:, :, 0])):
            raise ValueError(f"{self.name}: NaN left in speed channel after ingestion")
        if np.any(X[:, :, 0] < 0):
            raise ValueError(f"{self.name}: negative speeds")
        if MINUTES_PER_DAY % self.interval_minutes != 0 or 60 % self.interval_minutes != 0:
            raise ValueError(f"{self.name}: unparseable interval {self.interval_minutes}")
        return self


@dataclass
class PatchSet:
    """Raw patches of one window: (N, n_patches, P, C) plus week-hour slots."""

    patches: np.ndarray
    patch_len: int
    window_len: int
    week_slot: np.ndarray  # (n_patches,) hour-of-week in [0, 168)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskPlan:
    mask: np.ndarray  # (N, n_patches) boolean, True = masked
    ratio: float


@dataclass
class SplitSpec:
    """Few-shot split of a target city plus its source cities."""

    source_cities: list[CityDataset]
    target_city: CityDataset
    few_shot_days: int
    warmup_steps: int
    few_shot_range: tuple[int, int]
    test_range: tuple[int, int]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic multi-city corpus generator."""

    num_cities: int = 4
    nodes_per_city: int = 20
    days: int = 14
    num_profiles: int = 3
    noise_std: float = 4.0
    spatial_mix: float = 0.3
    seed: int = 0
    interval_minutes: int = 5

    def __post_init__(self):
        if not 0.0 <= self.spatial_mix <= 1.0:
            raise ValueError("spatial_mix must lie in [0, 1]")
        if min(self.num_cities, self.nodes_per_city, self.days, self.num_profiles) <= 0:
            raise ValueError("counts must be positive")


def time_of_day_channel(num_steps: int, interval_minutes: int,
                        start_offset: int) -> np.ndarray:
    """Time-of-day fraction in [0, 1) for each step."""
    steps_per_day = MINUTES_PER_DAY // interval_minutes
    idx = (start_offset + np.arange(num_steps)) % steps_per_day
    return idx / steps_per_day


def _interpolate_gaps(col: np.ndarray, max_gap: int = MAX_GAP_STEPS) -> np.ndarray:
    """Fill NaN runs of length <= max_gap linearly; edge runs hold the nearest value."""
    col = col.copy()
    isnan = np.isnan(col)
    if not isnan.any():
        return col
    if isnan.all():
        raise ValueError("column is entirely missing")
    t = 0
    T = col.size
    while t < T:
        if not isnan[t]:
            t += 1
            continue
        start = t
        while t < T and isnan[t]:
            t += 1
        run = t - start
        if run > max_gap:
            raise ValueError(f"missing-value gap of {run} steps exceeds {max_gap}")
        left = col[start - 1] if start > 0 else None
        right = col[t] if t < T else None
        if left is None:
            col[start:t] = right
        elif right is None:
            col[start:t] = left
        else:
            col[start:t] = np.linspace(left, right, run + 2)[1:-1]
    return col


def load_city(directory: str | Path) -> CityDataset:
    """Load and validate one city directory; repairs short gaps in the speeds."""
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    interval = meta["interval_minutes"]
    if not isinstance(interval, int) or interval <= 0 or MINUTES_PER_DAY % interval:
        raise ValueError(f"unparseable interval: {interval!r}")
    A = np.genfromtxt(directory / "adjacency.csv", delimiter=",", dtype=np.float64)
    A = np.atleast_2d(A)
    raw = np.genfromtxt(directory / "speed.csv", delimiter=",", dtype=np.float64)
    raw = np.atleast_2d(raw)
    if A.shape[0] != A.shape[1] or raw.shape[1] != A.shape[0]:
        raise ValueError(f"dimension mismatch: adjacency {A.shape} vs "
                         f"speed columns {raw.shape[1]}")
    if int(meta.get("num_nodes", A.shape[0])) != A.shape[0]:
        raise ValueError("dimension mismatch: meta num_nodes disagrees with adjacency")
    filled = np.column_stack([_interpolate_gaps(raw[:, j]) for j in range(raw.shape[1])])
    tod = time_of_day_channel(filled.shape[0], interval, meta.get("start_offset", 0))
    speed = np.stack([filled, np.repeat(tod[:, None], filled.shape[1], axis=1)], axis=2)
    city = CityDataset(name=meta.get("name", directory.name), adjacency=A,
                       speed=speed, interval_minutes=interval,
                       start_offset=int(meta.get("start_offset", 0)))
    return city.validate()


def save_city(city: CityDataset, directory: str | Path) -> None:
    """Write a city in the directory format load_city reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"name": city.name, "interval_minutes": city.interval_minutes,
            "start_offset": city.start_offset, "num_nodes": city.num_nodes}
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    np.savetxt(directory / "adjacency.csv", city.adjacency, delimiter=",", fmt="%.10g")
    np.savetxt(directory / "speed.csv", city.speed[:, :, 0], delimiter=",", fmt="%.10g")


def resample_to_base_interval(city: CityDataset, base_minutes: int) -> CityDataset:
    """Linear upsampling / stride-decimation downsampling to ``base_minutes``.

    Downsampling keeps every g-th sample so that a down-then-up round trip
    reproduces piecewise-linear signals exactly at the retained points.
    """
    cur = city.interval_minutes
    if base_minutes == cur:
        return city
    values = city.speed[:, :, 0]
    if cur % base_minutes == 0:  # upsample
        f = cur // base_minutes
        T = values.shape[0]
        pos = np.arange(T * f) / f
        left = np.minimum(np.floor(pos).astype(int), T - 1)
        right = np.minimum(left + 1, T - 1)
        frac = (pos - left)[:, None]
        new_values = values[left] * (1 - frac) + values[right] * frac
        new_offset = city.start_offset * f
    elif base_minutes % cur == 0:  # downsample by stride
        g = base_minutes // cur
        new_values = values[::g]
        new_offset = city.start_offset // g
    else:
        raise ValueError(f"non-commensurate intervals: {cur} vs {base_minutes}")
    tod = time_of_day_channel(new_values.shape[0], base_minutes, new_offset)
    speed = np.stack([new_values,
                      np.repeat(tod[:, None], new_values.shape[1], axis=1)], axis=2)
    return replace(city, speed=speed, interval_minutes=base_minutes,
                   start_offset=new_offset)


def make_patches(city: CityDataset, window_start: int, T0: int, P: int) -> PatchSet:
    """Cut X[window_start : window_start+T0] into patches of P steps per node."""
    if T0 % P != 0:
        raise ValueError(f"window length {T0} not divisible by patch length {P}")
    if window_start < 0 or window_start + T0 > city.num_steps:
        raise ValueError(f"window [{window_start}, {window_start + T0}) out of range "
                         f"for {city.num_steps} steps")
    n_patches = T0 // P
    window = city.speed[window_start:window_start + T0]  # (T0, N, C)
    patches = window.reshape(n_patches, P, city.num_nodes, 2)
    patches = patches.transpose(2, 0, 1, 3).copy()  # (N, n_patches, P, C)
    steps_per_hour = 60 // city.interval_minutes
    starts = city.start_offset + window_start + np.arange(n_patches) * P
    week_slot = (starts // steps_per_hour) % HOURS_PER_WEEK
    return PatchSet(patches=patches, patch_len=P, window_len=T0, week_slot=week_slot)


def flatten_patches(ps: PatchSet) -> np.ndarray:
    """Inverse of make_patches: back to the (T0, N, C) window."""
    N, J, P, C = ps.patches.shape
    return ps.patches.transpose(1, 2, 0, 3).reshape(J * P, N, C)


def sample_mask(num_nodes: int, n_patches: int, ratio: float,
                rng: np.random.Generator | int) -> MaskPlan:
    """Mask round(ratio * n_patches) patches per node, independently per node."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    k = int(np.rint(ratio * n_patches))
    mask = np.zeros((num_nodes, n_patches), dtype=bool)
    if k > 0:
        order = rng.random((num_nodes, n_patches)).argsort(axis=1)
        rows = np.repeat(np.arange(num_nodes), k)
        mask[rows, order[:, :k].reshape(-1)] = True
    return MaskPlan(mask=mask, ratio=ratio)


def split_few_shot(target: CityDataset, few_shot_days: int, T0: int) -> SplitSpec:
    """First few_shot_days (after a T0 warmup prefix) are few-shot; the rest is test."""
    steps_per_day = target.steps_per_day
    few = few_shot_days * steps_per_day
    if target.num_steps < T0 + few + steps_per_day:
        raise ValueError(f"{target.name}: needs at least {few_shot_days}+1 days "
                         f"plus {T0} warmup steps, has {target.num_steps}")
    few_range = (T0, T0 + few)
    test_range = (T0 + few, target.num_steps)
    return SplitSpec(source_cities=[], target_city=target,
                     few_shot_days=few_shot_days, warmup_steps=T0,
                     few_shot_range=few_range, test_range=test_range)


def _daily_profile(rng: np.random.Generator, steps_per_day: int) -> np.ndarray:
    """One smooth daily speed profile with rise, drop-rebound, and
    post-rise-fluctuation motifs at randomized times and magnitudes."""
    t = np.arange(steps_per_day) / steps_per_day  # day fraction
    base = 55.0 + rng.uniform(-8.0, 8.0)

    def bump(center, width, height):
        return height * np.exp(-0.5 * ((t - center) / width) ** 2)

    profile = np.full(steps_per_day, base)
    # rapid morning rise
    rise_at = rng.uniform(0.25, 0.40)
    profile += rng.uniform(12.0, 20.0) / (1.0 + np.exp(-(t - rise_at) / 0.015))
    # midday drop followed by rebound
    drop_at = rng.uniform(0.45, 0.60)
    profile += bump(drop_at, 0.03, -rng.uniform(15.0, 25.0))
    profile += bump(drop_at + 0.07, 0.025, rng.uniform(8.0, 14.0))
    # evening rise followed by fluctuation
    eve_at = rng.uniform(0.70, 0.85)
    profile += rng.uniform(8.0, 16.0) / (1.0 + np.exp(-(t - eve_at) / 0.02))
    wobble = np.where(t > eve_at,
                      np.sin((t - eve_at) * rng.uniform(40.0, 70.0)) *
                      rng.uniform(3.0, 6.0) * np.exp(-(t - eve_at) * 6.0), 0.0)
    return profile + wobble


def _random_sparse_adjacency(rng: np.random.Generator, n: int) -> np.ndarray:
    """Symmetric weighted ring-plus-chords graph, zero diagonal."""
    A = np.zeros((n, n))
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = rng.uniform(0.5, 1.0)
    extra = max(1, n // 3)
    for _ in range(extra):
        i, j = rng.choice(n, size=2, replace=False)
        w = rng.uniform(0.3, 1.0)
        A[i, j] = A[j, i] = max(A[i, j], w)
    return A


def generate_synthetic_corpus(spec: SyntheticSpec) -> tuple[list[CityDataset], dict]:
    """Cities sharing ``num_profiles`` daily profiles; deterministic per seed.

    Returns the cities plus provenance: the planted per-node profile labels
    and the shared profiles, for clustering-recovery checks.
    """
    rng = np.random.default_rng(spec.seed)
    steps_per_day = MINUTES_PER_DAY // spec.interval_minutes
    T = spec.days * steps_per_day
    profiles = np.stack([_daily_profile(rng, steps_per_day)
                         for _ in range(spec.num_profiles)])
    cities: list[CityDataset] = []
    labels: dict[str, np.ndarray] = {}
    for c in range(spec.num_cities):
        n = spec.nodes_per_city
        A = _random_sparse_adjacency(rng, n)
        node_profile = rng.integers(0, spec.num_profiles, size=n)
        gain = rng.uniform(0.8, 1.2, size=n)
        offset = rng.uniform(-4.0, 4.0, size=n)
        city_gain = rng.uniform(0.85, 1.15)
        city_offset = rng.uniform(-5.0, 5.0)
        day = profiles[node_profile]  # (n, steps_per_day)
        series = np.tile(day, (1, spec.days)).T  # (T, n)
        series = city_gain * (gain * series + offset) + city_offset
        if spec.spatial_mix > 0:
            deg = A.sum(axis=1, keepdims=True)
            W = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
            series = (1 - spec.spatial_mix) * series + spec.spatial_mix * (series @ W.T)
        lo, hi = series.min(), series.max()
        if lo < 2.0 or hi > 98.0:
            # city-level affine squeeze keeps every node an affine image of
            # its profile while guaranteeing headroom for the noise
            series = 5.0 + (series - lo) * (90.0 / max(hi - lo, 1e-9))
        if spec.noise_std > 0:
            series = series + rng.normal(0.0, spec.noise_std, size=series.shape)
        series = np.clip(series, 0.0, 100.0)
        tod = time_of_day_channel(T, spec.interval_minutes, 0)
        speed = np.stack([series, np.repeat(tod[:, None], n, axis=1)], axis=2)
        name = f"synth{c}"
        cities.append(CityDataset(name=name, adjacency=A, speed=speed,
                                  interval_minutes=spec.interval_minutes,
                                  start_offset=0).validate())
        labels[name] = node_profile
    return cities, {"labels": labels, "profiles": profiles}


def day_window_starts(city: CityDataset, T0: int, exclude_last_day: bool = False,
                      limit_steps: int | None = None) -> list[int]:
    """Non-overlapping day-aligned window starts (stride T0)."""
    end = city.num_steps if limit_steps is None else min(limit_steps, city.num_steps)
    if exclude_last_day:
        end -= city.steps_per_day
    return [s for s in range(0, max(end - T0 + 1, 0), T0)]
