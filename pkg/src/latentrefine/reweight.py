"""Post-hoc classifier, likelihood-ratio weights, and latent pull-back.

A sigmoid classifier f trained with BCE to separate generated from real
samples yields per-sample weights w = f / (1 - f); reweighting the generated
density by w approximates the real one. Because the generator is a bijection,
the weight of a latent point z is simply the weight of g(z).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import shuffled_batches
from .errors import ConfigError, DivergenceError
from .flow import FlowModel
from .nncore import AdamState, Mlp, Tape, adam_step, bce_with_logits

__all__ = [
    "Classifier",
    "ClassifierTrainConfig",
    "WeightedLatentBatch",
    "train_classifier",
    "weight",
    "compute_weights",
    "pull_back",
]

F_CLIP = 1e-6  # classifier output floored/capped to [F_CLIP, 1 - F_CLIP]
W_MAX = 1e3  # hard cap on likelihood-ratio weights

_LOGIT_LO = float(np.log(F_CLIP) - np.log1p(-F_CLIP))
_LOGIT_HI = float(np.log(W_MAX))  # log-weight cap; tighter than the f-cap side


class Classifier:
    """MLP with sigmoid output; exposes probabilities, logits, and weights."""

    def __init__(self, rng: np.random.Generator, n_hidden: int = 8, units: int = 96,
                 hidden_slope: float = 0.01):
        sizes = [2] + [units] * n_hidden + [1]
        self.net = Mlp(sizes, rng, hidden_slope, output_activation="sigmoid")

    def predict(self, x: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        """P(real | x), in (0, 1)."""
        return self._batched(x, chunk, apply_output_activation=True)

    def logits(self, x: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        return self._batched(x, chunk, apply_output_activation=False)

    def _batched(self, x: np.ndarray, chunk: int, apply_output_activation: bool) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(len(x))
        for start in range(0, len(x), chunk):
            sel = slice(start, start + chunk)
            out[sel] = self.net.forward_array(
                x[sel], apply_output_activation=apply_output_activation
            )[:, 0]
        return out

    def log_weight_node(self, tape: Tape, x_node):
        """log w(x) as a tape node, with the same clipping as ``weight``.

        For a sigmoid classifier, log(f/(1-f)) is exactly the logit, so the
        clipped log-weight is a clamp of the pre-activation output.
        """
        logits = self.net.forward(tape, x_node, apply_output_activation=False, frozen=True)
        return logits.clip(_LOGIT_LO, _LOGIT_HI).sum(axis=1)


@dataclass
class WeightStats:
    mean_weight: float
    max_weight: float
    n_floored: int  # f below F_CLIP
    n_capped: int  # weight hit W_MAX


@dataclass
class WeightedLatentBatch:
    """Latent points, their images under the flow, and their weights."""

    z: np.ndarray
    x: np.ndarray
    w: np.ndarray

    def __len__(self):
        return len(self.z)

    def save_csv(self, path) -> None:
        table = np.column_stack([self.z, self.x, self.w])
        np.savetxt(path, table, fmt="%.9g", delimiter=",", header="z0,z1,x0,x1,w", comments="")

    @classmethod
    def load_csv(cls, path) -> "WeightedLatentBatch":
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(z=table[:, 0:2], x=table[:, 2:4], w=table[:, 4])


def compute_weights(classifier: Classifier, x: np.ndarray) -> tuple[np.ndarray, WeightStats]:
    """Likelihood-ratio weights w = f/(1-f) with clipping, plus clip counts."""
    f = classifier.predict(x)
    n_floored = int((f < F_CLIP).sum() + (f > 1.0 - F_CLIP).sum())
    f = np.clip(f, F_CLIP, 1.0 - F_CLIP)
    w = f / (1.0 - f)
    n_capped = int((w > W_MAX).sum())
    w = np.minimum(w, W_MAX)
    stats = WeightStats(
        mean_weight=float(w.mean()),
        max_weight=float(w.max()),
        n_floored=n_floored,
        n_capped=n_capped,
    )
    return w, stats


def weight(classifier: Classifier, x: np.ndarray) -> np.ndarray:
    return compute_weights(classifier, x)[0]


def pull_back(classifier: Classifier, flow: FlowModel, z_batch: np.ndarray) -> WeightedLatentBatch:
    """Assign each latent point the weight of its generated image."""
    x, _ = flow.g_forward(z_batch)
    w, _ = compute_weights(classifier, x)
    return WeightedLatentBatch(z=np.asarray(z_batch, dtype=np.float64), x=x, w=w)


@dataclass
class ClassifierTrainConfig:
    epochs: int = 50
    batch_size: int = 2000
    alpha0: float = 1e-3
    gamma: float = 0.999
    heldout_fraction: float = 0.05


@dataclass
class ClassifierHistory:
    train_bce: list = field(default_factory=list)
    val_bce: list = field(default_factory=list)
    calibration: list = field(default_factory=list)  # (mean f, frac real) per bin, last epoch


def _bce_array(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def train_classifier(
    gen_samples: np.ndarray,
    data_samples: np.ndarray,
    config: ClassifierTrainConfig,
    rng: np.random.Generator,
) -> tuple[Classifier, ClassifierHistory]:
    """BCE training of real-vs-generated; class sizes equalized by subsampling.

    Labels: generated samples 0, real samples 1.
    """
    if len(gen_samples) == 0 or len(data_samples) == 0:
        raise ConfigError("both sample sets must be nonempty")
    n = min(len(gen_samples), len(data_samples))
    gen = gen_samples[rng.permutation(len(gen_samples))[:n]]
    real = data_samples[rng.permutation(len(data_samples))[:n]]

    merged = np.vstack([gen, real])
    labels = np.concatenate([np.zeros(n), np.ones(n)])
    stacked = np.column_stack([merged, labels])

    train, val = _split(stacked, config.heldout_fraction, rng)
    classifier = Classifier(rng)
    params = classifier.net.parameters()
    state = AdamState.for_params(params, alpha0=config.alpha0, gamma=config.gamma)
    history = ClassifierHistory()

    for _ in range(config.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for batch in shuffled_batches(train, config.batch_size, rng):
            tape = Tape()
            logits = classifier.net.forward(tape, batch[:, :2], apply_output_activation=False)
            loss = bce_with_logits(logits, batch[:, 2])
            if not np.isfinite(loss.value):
                raise DivergenceError("classifier BCE became non-finite")
            tape.backward(loss)
            adam_step(state, params, tape.grads_for(params))
            epoch_loss += float(loss.value)
            n_batches += 1
        state.end_epoch()
        history.train_bce.append(epoch_loss / max(n_batches, 1))
        val_logits = classifier.logits(val[:, :2])
        history.val_bce.append(_bce_array(val_logits, val[:, 2]))

    history.calibration = _calibration_curve(classifier, val)
    return classifier, history


def _split(stacked: np.ndarray, fraction: float, rng: np.random.Generator):
    n_val = max(1, int(round(len(stacked) * fraction)))
    order = rng.permutation(len(stacked))
    return stacked[order[n_val:]], stacked[order[:n_val]]


def _calibration_curve(classifier: Classifier, val: np.ndarray, n_bins: int = 10):
    f = classifier.predict(val[:, :2])
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    curve = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (f >= lo) & (f < hi)
        if sel.sum() > 0:
            curve.append((float(f[sel].mean()), float(val[sel, 2].mean())))
    return curve
