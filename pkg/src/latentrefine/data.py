"""The three 2D toy target densities and seeded batch serving.

Each dataset kind carries its bounding box and its expected Betti numbers
(connected components b0, circular holes b1), used by the topology checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = ["DatasetSpec", "sample_dataset", "shuffled_batches", "save_points_csv", "load_points_csv", "KINDS"]


_GAUSS_CENTERS = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
_GAUSS_SIGMA = 0.4

# Rings tangent at the origin so the support is one connected figure eight.
_DONUT_CENTERS = np.array([[-1.5, 0.0], [1.5, 0.0]])
_DONUT_RADIUS = 1.5
_DONUT_SIGMA_R = 0.15

_RINGS_CENTERS = np.array([[-3.0, -1.5], [0.0, 1.5], [3.0, -1.5]])
_RINGS_RADIUS = 1.2
_RINGS_SIGMA_R = 0.12

_KIND_INFO = {
    "gaussians": {"betti": (4, 0), "bounds": (-4.0, 4.0, -4.0, 4.0)},
    "double_donut": {"betti": (1, 2), "bounds": (-4.5, 4.5, -3.0, 3.0)},
    "rings": {"betti": (3, 3), "bounds": (-5.0, 5.0, -3.5, 3.5)},
}

KINDS = tuple(_KIND_INFO)


@dataclass
class DatasetSpec:
    """Which toy density to draw from, how much, and with what seed."""

    kind: str = "gaussians"
    n_train: int = 480_000
    n_test: int = 2_000_000
    seed: int = 0
    betti: tuple[int, int] = field(init=False)
    bounds: tuple[float, float, float, float] = field(init=False)

    def __post_init__(self):
        if self.kind not in _KIND_INFO:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        self.betti = _KIND_INFO[self.kind]["betti"]
        self.bounds = _KIND_INFO[self.kind]["bounds"]


def _truncated_normal(rng: np.random.Generator, mean, sigma, n, n_sigmas=4.0):
    """Normal draws resampled until within mean +- n_sigmas * sigma."""
    out = rng.normal(mean, sigma, size=n)
    lo, hi = mean - n_sigmas * sigma, mean + n_sigmas * sigma
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sigma, size=int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def _sample_ring_mixture(rng, centers, radius, sigma_r, n):
    which = rng.integers(0, len(centers), size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = _truncated_normal(rng, radius, sigma_r, n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + centers[which]


def sample_points(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n i.i.d. points from the named density."""
    if n <= 0:
        raise ConfigError(f"sample count must be positive, got {n}")
    if kind == "gaussians":
        which = rng.integers(0, 4, size=n)
        pts = rng.normal(0.0, _GAUSS_SIGMA, size=(n, 2))
        return pts + _GAUSS_CENTERS[which]
    if kind == "double_donut":
        return _sample_ring_mixture(rng, _DONUT_CENTERS, _DONUT_RADIUS, _DONUT_SIGMA_R, n)
    if kind == "rings":
        return _sample_ring_mixture(rng, _RINGS_CENTERS, _RINGS_RADIUS, _RINGS_SIGMA_R, n)
    raise ConfigError(f"unknown dataset kind {kind!r}; choose from {KINDS}")


def sample_dataset(spec: DatasetSpec) -> np.ndarray:
    """The training sample for a spec: n_train points, deterministic per seed.

    Training uses seed stream 0; test sets use streams 1 and up, so they are
    independent of training draws.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    return sample_points(spec.kind, spec.n_train, rng)


def sample_test_set(spec: DatasetSpec, stream: int = 1) -> np.ndarray:
    """An independent test sample; distinct `stream` values are independent."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(stream,)))
    return sample_points(spec.kind, spec.n_test, rng)


def mode_centers(kind: str) -> np.ndarray:
    if kind == "gaussians":
        return _GAUSS_CENTERS.copy()
    if kind == "double_donut":
        return _DONUT_CENTERS.copy()
    if kind == "rings":
        return _RINGS_CENTERS.copy()
    raise ConfigError(f"unknown dataset kind {kind!r}")


def shuffled_batches(data: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Yield one epoch of batches in a fresh random order.

    The final partial batch is kept. Reusing the same generator across epochs
    gives a new permutation each time; recreating it from the same seed
    replays the identical sequence.
    """
    if batch_size <= 0:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    n = len(data)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield data[order[start : start + batch_size]]


def save_points_csv(path, points: np.ndarray, header: str = "x0,x1") -> None:
    """Write points as CSV: one point per line, '.' decimals, trailing newline."""
    np.savetxt(path, points, fmt="%.9g", delimiter=",", header=header, comments="")


def load_points_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
