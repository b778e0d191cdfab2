"""Histogram-based probability distances (JSD, exact EMD) and a topology check.

Distributions are compared as normalized 2D histograms over a fixed bounding
box. Mass falling outside the box is tracked separately; for transport it is
folded into the nearest boundary bins so both marginals stay balanced, and
for JSD it contributes one shared out-of-range bucket.

EMD is solved exactly. Because the ground cost (Euclidean distance between
bin centers) is a metric, mass common to both histograms can stay in place
at zero cost, so only the difference masses enter the linear program; the
reduced problem goes to a sparse simplex solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.optimize import linprog

from .errors import ConfigError, ContractError

__all__ = [
    "Histogram2D",
    "histogram",
    "jsd",
    "emd",
    "emd_with_flow",
    "b0_diagnostic",
    "score_uncertainty",
    "MethodScore",
    "ScoreReport",
]


@dataclass
class Histogram2D:
    """Normalized binned density over a fixed box.

    ``mass`` holds in-range probability; ``oor_extra`` holds the clipped
    out-of-range mass, already placed in its nearest boundary bin.
    mass.sum() + out_of_range_mass == 1.
    """

    bounds: tuple[float, float, float, float]
    bins: tuple[int, int]
    mass: np.ndarray
    oor_extra: np.ndarray

    @property
    def out_of_range_mass(self) -> float:
        return float(self.oor_extra.sum())

    def bin_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x0min, x0max, x1min, x1max = self.bounds
        b0, b1 = self.bins
        c0 = x0min + (np.arange(b0) + 0.5) * (x0max - x0min) / b0
        c1 = x1min + (np.arange(b1) + 0.5) * (x1max - x1min) / b1
        return c0, c1

    def full_mass(self) -> np.ndarray:
        """In-range mass plus clipped out-of-range mass; sums to 1."""
        return self.mass + self.oor_extra

    def same_binning(self, other: "Histogram2D") -> bool:
        return self.bins == other.bins and np.allclose(self.bounds, other.bounds)


def histogram(
    points: np.ndarray,
    weights: np.ndarray | None = None,
    bounds: tuple[float, float, float, float] = (-4.0, 4.0, -4.0, 4.0),
    bins: tuple[int, int] = (64, 64),
) -> Histogram2D:
    """Weighted, normalized 2D histogram with an out-of-range boundary fold."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ConfigError(f"points must have shape (n, 2), got {points.shape}")
    b0, b1 = bins
    if b0 < 2 or b1 < 2:
        raise ConfigError(f"need at least 2 bins per axis, got {bins}")
    x0min, x0max, x1min, x1max = bounds
    if weights is None:
        weights = np.ones(len(points))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(points),):
            raise ConfigError("weights must be one scalar per point")
        if np.any(weights < 0):
            raise ConfigError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0.0:
        raise ConfigError("total weight must be positive")

    in_range = (
        (points[:, 0] >= x0min)
        & (points[:, 0] <= x0max)
        & (points[:, 1] >= x1min)
        & (points[:, 1] <= x1max)
    )
    edges0 = np.linspace(x0min, x0max, b0 + 1)
    edges1 = np.linspace(x1min, x1max, b1 + 1)
    mass, _, _ = np.histogram2d(
        points[in_range, 0], points[in_range, 1],
        bins=(edges0, edges1), weights=weights[in_range],
    )
    oor_extra = np.zeros((b0, b1))
    if not np.all(in_range):
        clipped = np.clip(
            points[~in_range],
            [x0min, x1min],
            # nudge inside so the top edge bins correctly
            [np.nextafter(x0max, -np.inf), np.nextafter(x1max, -np.inf)],
        )
        oor_extra, _, _ = np.histogram2d(
            clipped[:, 0], clipped[:, 1],
            bins=(edges0, edges1), weights=weights[~in_range],
        )
    return Histogram2D(
        bounds=tuple(float(v) for v in bounds),
        bins=(b0, b1),
        mass=mass / total,
        oor_extra=oor_extra / total,
    )


def _check_same_binning(p: Histogram2D, q: Histogram2D):
    if not p.same_binning(q):
        raise ConfigError(
            f"histograms must share binning: {p.bins}/{p.bounds} vs {q.bins}/{q.bounds}"
        )


def jsd(p: Histogram2D, q: Histogram2D) -> float:
    """Jensen-Shannon divergence in nats: JSD = KL(p||m)/2 + KL(q||m)/2, m=(p+q)/2.

    Bins where a distribution has zero mass contribute nothing to its term.
    The out-of-range buckets enter as one extra shared cell.
    """
    _check_same_binning(p, q)
    pv = np.append(p.mass.ravel(), p.out_of_range_mass)
    qv = np.append(q.mass.ravel(), q.out_of_range_mass)
    m = 0.5 * (pv + qv)
    out = 0.0
    for v in (pv, qv):
        nz = v > 0
        out += 0.5 * float(np.sum(v[nz] * np.log(v[nz] / m[nz])))
    return out


def _reduced_transport_problem(p: Histogram2D, q: Histogram2D):
    """Difference masses and their bin coordinates after removing common mass."""
    a = p.full_mass().ravel()
    b = q.full_mass().ravel()
    common = np.minimum(a, b)
    ra = a - common
    rb = b - common
    src = np.flatnonzero(ra > 1e-15)
    dst = np.flatnonzero(rb > 1e-15)
    c0, c1 = p.bin_centers()
    centers = np.stack(np.meshgrid(c0, c1, indexing="ij"), axis=-1).reshape(-1, 2)
    return ra[src], rb[dst], centers[src], centers[dst], src, dst


def _transport_cost_matrix(src_xy: np.ndarray, dst_xy: np.ndarray) -> np.ndarray:
    diff = src_xy[:, None, :] - dst_xy[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _solve_transport(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray):
    """Exact min-cost flow via LP simplex; returns (cost, flow matrix)."""
    ns, nd = cost.shape
    # equality rows: one per source (its outflow) and one per sink (its inflow)
    col = np.arange(ns * nd)
    row_src = np.repeat(np.arange(ns), nd)
    row_dst = ns + np.tile(np.arange(nd), ns)
    a_eq = sparse.coo_matrix(
        (
            np.ones(2 * ns * nd),
            (np.concatenate([row_src, row_dst]), np.concatenate([col, col])),
        ),
        shape=(ns + nd, ns * nd),
    ).tocsr()
    b_eq = np.concatenate([supply, demand])
    res = linprog(
        cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs"
    )
    if not res.success:
        raise ContractError(
            f"transport solver failed: status={res.status} message={res.message!r}"
        )
    return float(res.fun), res.x.reshape(ns, nd)


def emd(p: Histogram2D, q: Histogram2D) -> float:
    """Exact earth mover's distance under Euclidean bin-center ground cost."""
    return emd_with_flow(p, q)[0]


def emd_with_flow(p: Histogram2D, q: Histogram2D):
    """EMD plus the optimal flow on the reduced (difference-mass) supports.

    Returns (cost, flow, src_indices, dst_indices): ``flow[i, j]`` is the mass
    moved from flat bin ``src_indices[i]`` to flat bin ``dst_indices[j]``.
    Mass shared by both histograms stays in place at zero cost, which is
    optimal because the ground cost is a metric.
    """
    _check_same_binning(p, q)
    supply, demand, src_xy, dst_xy, src, dst = _reduced_transport_problem(p, q)
    if len(supply) == 0 or len(demand) == 0:
        return 0.0, np.zeros((len(supply), len(demand))), src, dst
    # balance tiny float asymmetry between the two residual totals
    scale = demand.sum() / supply.sum()
    supply = supply * scale
    cost = _transport_cost_matrix(src_xy, dst_xy)
    value, flow = _solve_transport(supply, demand, cost)
    return value, flow, src, dst


def emd_sinkhorn(p: Histogram2D, q: Histogram2D, reg: float = 1e-2, n_iter: int = 500) -> float:
    """Entropy-regularized transport cost (fast approximation, never used for scores)."""
    _check_same_binning(p, q)
    supply, demand, src_xy, dst_xy, _, _ = _reduced_transport_problem(p, q)
    if len(supply) == 0 or len(demand) == 0:
        return 0.0
    total = supply.sum()
    a = supply / total
    b = demand / demand.sum()
    cost = _transport_cost_matrix(src_xy, dst_xy)
    log_k = -cost / reg
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    log_a, log_b = np.log(a), np.log(b)
    for _ in range(n_iter):
        f = reg * (log_a - _logsumexp((log_k + g / reg), axis=1))
        g = reg * (log_b - _logsumexp((log_k.T + f / reg), axis=1))
    plan = np.exp(log_k + f[:, None] / reg + g[None, :] / reg)
    return float((plan * cost).sum() * total)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def b0_diagnostic(h: Histogram2D, threshold_quantile: float = 0.95) -> int:
    """Number of 8-connected components among the heaviest bins.

    The mass threshold is the largest value t such that bins with mass >= t
    still hold at least ``threshold_quantile`` of the total in-range mass.
    """
    if not (0.0 < threshold_quantile < 1.0):
        raise ConfigError("threshold_quantile must lie in (0, 1)")
    mass = h.mass
    total = mass.sum()
    if total <= 0.0:
        warnings.warn("empty histogram: b0 = 0")
        return 0
    flat = np.sort(mass.ravel())[::-1]
    cum = np.cumsum(flat)
    k = int(np.searchsorted(cum, threshold_quantile * total) + 1)
    threshold = flat[min(k, len(flat)) - 1]
    retained = mass >= threshold
    if threshold <= 0.0:
        retained = mass > 0.0
    if not retained.any():
        warnings.warn("no bins above threshold: b0 = 0")
        return 0
    _, n_components = ndimage.label(retained, structure=_EIGHT_CONNECTED)
    return int(n_components)


def score_uncertainty(truth_a: Histogram2D, truth_b: Histogram2D) -> tuple[float, float]:
    """Truth-vs-truth (EMD, JSD): the quoted uncertainty of the score table."""
    return emd(truth_a, truth_b), jsd(truth_a, truth_b)


# ---------------------------------------------------------------------------
# Score reporting

UNWEIGHTED_METHODS = ("baseline", "hmc", "laser")
ALL_METHODS = ("baseline", "hmc", "laser", "dctr")


@dataclass
class MethodScore:
    emd: float
    jsd: float


@dataclass
class ScoreReport:
    dataset: str
    scores: dict = field(default_factory=dict)  # method -> MethodScore
    emd_err: float = 0.0
    jsd_err: float = 0.0

    def add(self, method: str, emd_value: float, jsd_value: float) -> None:
        self.scores[method] = MethodScore(emd=emd_value, jsd=jsd_value)

    def to_csv(self) -> str:
        lines = ["method,emd,emd_err,jsd,jsd_err"]
        for method, s in self.scores.items():
            lines.append(
                f"{method},{s.emd:.6g},{self.emd_err:.6g},{s.jsd:.6g},{self.jsd_err:.6g}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, dataset: str = "") -> "ScoreReport":
        report = cls(dataset=dataset)
        lines = [ln for ln in text.strip().splitlines()[1:] if ln]
        for ln in lines:
            method, emd_v, emd_e, jsd_v, jsd_e = ln.split(",")
            report.add(method, float(emd_v), float(jsd_v))
            report.emd_err = float(emd_e)
            report.jsd_err = float(jsd_e)
        return report

    def to_table(self) -> str:
        header = f"{'Method':<10} {'EMD':>12} {'JSD':>12}"
        rows = [f"# dataset: {self.dataset}", header, "-" * len(header)]
        for method, s in self.scores.items():
            rows.append(
                f"{method:<10} {_fmt_pm(s.emd, self.emd_err):>12} "
                f"{_fmt_pm(s.jsd, self.jsd_err):>12}"
            )
        return "\n".join(rows) + "\n"


def _fmt_pm(value: float, err: float) -> str:
    return f"{value:.3f}({err:.3f})"
