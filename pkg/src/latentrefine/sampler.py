"""Unweighting backends over the reweighted latent density.

The target is q(z) proportional to p_Z(z) * w(g(z)): a standard-normal prior
tilted by the pulled-back classifier weights. Hamiltonian Monte Carlo
explores it with gradient-guided proposals (the normalization constant
cancels in the Metropolis ratio and is never computed); rejection sampling
is the simple alternative for narrowly distributed weights.

Chains are vectorized into one batch for target evaluations but own private
RNG streams, so permuting chain seeds permutes per-chain outputs exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .flow import FlowModel
from .nncore import Tape
from .reweight import Classifier, WeightedLatentBatch

__all__ = [
    "LatentTarget",
    "leapfrog",
    "hmc_run",
    "HmcDiagnostics",
    "rejection_sample",
    "RejectionReport",
]

_LOG_2PI = np.log(2.0 * np.pi)


class LatentTarget:
    """Log-density (up to a constant) and its gradient on the latent plane."""

    def __init__(self, log_q, grad_log_q, log_q_and_grad=None):
        self.log_q = log_q
        self.grad_log_q = grad_log_q
        self._fused = log_q_and_grad

    def log_q_and_grad(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._fused is not None:
            return self._fused(z)
        return self.log_q(z), self.grad_log_q(z)

    @classmethod
    def standard_normal(cls) -> "LatentTarget":
        def log_q(z):
            return -0.5 * (z * z).sum(axis=1) - _LOG_2PI

        def grad_log_q(z):
            return -z

        return cls(log_q, grad_log_q)

    @classmethod
    def from_flow_classifier(cls, flow: FlowModel, classifier: Classifier) -> "LatentTarget":
        """log q(z) = log p_Z(z) + log w(g(z)), with the classifier's weight clipping."""

        def fused(z):
            z = np.asarray(z, dtype=np.float64)
            tape = Tape()
            z_node = tape.leaf(z)
            x_node, _ = flow.forward_nodes(tape, z_node, frozen=True)
            log_w = classifier.log_weight_node(tape, x_node)
            log_prior = (z_node * z_node).sum(axis=1) * (-0.5) - _LOG_2PI
            total = (log_prior + log_w).sum()
            tape.backward(total)
            return (log_prior + log_w).value, z_node.grad

        return cls(
            log_q=lambda z: fused(z)[0],
            grad_log_q=lambda z: fused(z)[1],
            log_q_and_grad=fused,
        )


def leapfrog(
    target: LatentTarget,
    z: np.ndarray,
    momentum: np.ndarray,
    eps: float,
    n_steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Symplectic integration of Hamiltonian dynamics with identity mass matrix.

    Deterministic given inputs; kick-drift-kick form, so reversing the final
    momentum and integrating again returns to the start.
    """
    if eps <= 0:
        raise ConfigError(f"step size must be positive, got {eps}")
    z = np.array(z, dtype=np.float64)
    p = np.array(momentum, dtype=np.float64)
    if n_steps == 0:
        return z, p
    p = p + 0.5 * eps * target.grad_log_q(z)
    for step in range(n_steps):
        z = z + eps * p
        grad = target.grad_log_q(z)
        p = p + (eps if step < n_steps - 1 else 0.5 * eps) * grad
    return z, p


@dataclass
class HmcDiagnostics:
    n_chains: int
    n_iterations: int
    burn_in: int
    acceptance_rate: float
    divergences: int
    divergence_fraction: float
    r_hat: list  # per dimension
    autocorr_time: list  # per dimension, mean over chains

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def hmc_run(
    target: LatentTarget,
    n_chains: int = 100,
    burn_in: int = 3000,
    n_keep: int = 1000,
    eps: float = 0.004,
    n_steps: int = 50,
    seed: int = 0,
    initial: np.ndarray | None = None,
    min_acceptance: float = 0.1,
    max_divergence_fraction: float = 0.01,
    dim: int = 2,
) -> tuple[np.ndarray, HmcDiagnostics]:
    """Metropolis-corrected HMC; returns chain-major samples of shape (chains*kept, dim).

    Every chain draws momenta and acceptance uniforms from its own stream
    seeded by (seed, chain index); positions are batched per iteration for
    the target evaluation.
    """
    if n_chains <= 0 or n_keep <= 0 or burn_in < 0 or n_steps <= 0:
        raise ConfigError("chain counts, kept samples, and step counts must be positive")
    chain_rngs = [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
        for c in range(n_chains)
    ]
    if initial is None:
        z = np.stack([rng.standard_normal(dim) for rng in chain_rngs])
    else:
        z = np.array(initial, dtype=np.float64)
        if z.shape != (n_chains, dim):
            raise ConfigError(f"initial positions must have shape {(n_chains, dim)}")
    log_q = target.log_q(z)

    kept = np.empty((n_chains, n_keep, dim))
    n_iterations = burn_in + n_keep
    accepted = 0
    proposed = 0
    divergences = 0

    for it in range(n_iterations):
        p0 = np.stack([rng.standard_normal(dim) for rng in chain_rngs])
        u = np.array([rng.random() for rng in chain_rngs])
        z_new, p_new = leapfrog(target, z, p0, eps, n_steps)
        log_q_new = target.log_q(z_new)
        h_old = -log_q + 0.5 * (p0 * p0).sum(axis=1)
        h_new = -log_q_new + 0.5 * (p_new * p_new).sum(axis=1)
        finite = np.isfinite(h_new)
        divergences += int((~finite).sum())
        log_accept = np.where(finite, h_old - h_new, -np.inf)
        accept = np.log(u) < log_accept
        z = np.where(accept[:, None], z_new, z)
        log_q = np.where(accept, log_q_new, log_q)
        accepted += int(accept.sum())
        proposed += n_chains
        if it == burn_in - 1 and burn_in > 0:
            rate_so_far = accepted / proposed
            if rate_so_far < min_acceptance:
                raise DivergenceError(
                    f"HMC acceptance {rate_so_far:.3f} < {min_acceptance} during "
                    f"burn-in; reduce the step size (eps={eps}) or step count"
                )
        if it >= burn_in:
            kept[:, it - burn_in, :] = z

    acceptance_rate = accepted / proposed
    divergence_fraction = divergences / proposed
    if acceptance_rate < min_acceptance:
        raise DivergenceError(
            f"HMC acceptance {acceptance_rate:.3f} < {min_acceptance}; "
            f"reduce the step size (eps={eps}) or step count"
        )
    diagnostics = HmcDiagnostics(
        n_chains=n_chains,
        n_iterations=n_iterations,
        burn_in=burn_in,
        acceptance_rate=float(acceptance_rate),
        divergences=divergences,
        divergence_fraction=float(divergence_fraction),
        r_hat=[float(v) for v in split_r_hat(kept)],
        autocorr_time=[float(v) for v in autocorr_time(kept)],
    )
    if divergence_fraction > max_divergence_fraction:
        raise DivergenceError(
            f"{divergences} divergent trajectories "
            f"({100 * divergence_fraction:.2f}% > {100 * max_divergence_fraction}%)"
        )
    return kept.reshape(n_chains * n_keep, dim), diagnostics


def split_r_hat(kept: np.ndarray) -> np.ndarray:
    """Gelman-Rubin statistic per dimension, with each chain split in half."""
    n_chains, n_iter, dim = kept.shape
    half = n_iter // 2
    if half < 2:
        return np.full(dim, np.nan)
    chains = np.concatenate([kept[:, :half, :], kept[:, half : 2 * half, :]], axis=0)
    m, n = chains.shape[0], chains.shape[1]
    means = chains.mean(axis=1)
    variances = chains.var(axis=1, ddof=1)
    between = n * means.var(axis=0, ddof=1)
    within = variances.mean(axis=0)
    var_plus = (n - 1) / n * within + between / n
    return np.sqrt(var_plus / within)


def autocorr_time(kept: np.ndarray, max_lag: int | None = None) -> np.ndarray:
    """Integrated autocorrelation time per dimension (initial positive sequence)."""
    n_chains, n_iter, dim = kept.shape
    if max_lag is None:
        max_lag = min(n_iter - 1, 250)
    out = np.zeros(dim)
    for d in range(dim):
        taus = []
        for c in range(n_chains):
            x = kept[c, :, d]
            x = x - x.mean()
            denom = float(x @ x)
            if denom == 0.0:
                continue
            tau = 1.0
            for lag in range(1, max_lag + 1):
                rho = float(x[:-lag] @ x[lag:]) / denom
                if rho <= 0:
                    break
                tau += 2.0 * rho
            taus.append(tau)
        out[d] = np.mean(taus) if taus else np.nan
    return out


@dataclass
class RejectionReport:
    n_input: int
    n_accepted: int
    w_cap: float
    n_above_cap: int
    efficiency_expected: float  # sum(w) / (n * w_cap)
    efficiency_observed: float


def rejection_sample(
    weighted: WeightedLatentBatch,
    w_cap: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, RejectionReport]:
    """Keep each latent point with probability w / w_cap; output is unweighted.

    Weights above the cap are clipped to acceptance 1 and counted.
    """
    if w_cap <= 0:
        raise ConfigError(f"w_cap must be positive, got {w_cap}")
    w = weighted.w
    n_above = int((w > w_cap).sum())
    accept = rng.random(len(w)) < np.minimum(w / w_cap, 1.0)
    report = RejectionReport(
        n_input=len(w),
        n_accepted=int(accept.sum()),
        w_cap=float(w_cap),
        n_above_cap=n_above,
        efficiency_expected=float(w.mean() / w_cap),
        efficiency_observed=float(accept.mean()),
    )
    return weighted.z[accept], report
