"""Latent refiner GAN: maps a 4D auxiliary space onto the reweighted 2D latent.

The discriminator's real term carries the likelihood-ratio weights of the
latent points (normalized by their sum); the fake term and the
non-saturating generator loss are unweighted. With unit weights the whole
objective reduces to a standard BCE GAN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .flow import FlowModel
from .metrics import histogram, jsd
from .nncore import AdamState, Mlp, Node, Tape, adam_step
from .reweight import WeightedLatentBatch

__all__ = ["RefinerGan", "RefinerTrainConfig", "weighted_bce", "train_refiner", "refine_and_generate"]


class RefinerGan:
    def __init__(
        self,
        rng: np.random.Generator,
        aux_dim: int = 4,
        latent_dim: int = 2,
        n_hidden: int = 7,
        units: int = 100,
        hidden_slope: float = 0.01,
    ):
        self.aux_dim = aux_dim
        self.latent_dim = latent_dim
        self.generator = Mlp(
            [aux_dim] + [units] * n_hidden + [latent_dim], rng, hidden_slope
        )
        self.discriminator = Mlp(
            [latent_dim] + [units] * n_hidden + [1], rng, hidden_slope,
            output_activation="sigmoid",
        )

    def generate(self, n: int, rng: np.random.Generator, chunk: int = 200_000) -> np.ndarray:
        """Draw n refined latent points from the auxiliary prior."""
        out = np.empty((n, self.latent_dim))
        done = 0
        while done < n:
            m = min(chunk, n - done)
            y = rng.standard_normal((m, self.aux_dim))
            out[done : done + m] = self.generator.forward_array(y)
            done += m
        return out


def weighted_bce(d_out_real: Node, w, d_out_fake: Node) -> tuple[Node, Node]:
    """Weight-carrying GAN losses from discriminator probabilities.

    Returns (discriminator loss, generator loss):
      disc = -sum(w * log D(real)) / sum(w) - mean(log(1 - D(fake)))
      gen  = -mean(log D(fake))                     (non-saturating)
    """
    w = np.asarray(w, dtype=np.float64).reshape(d_out_real.value.shape)
    if np.all(w == 0.0):
        raise ConfigError("weights must not be all zero")
    if np.any(w < 0.0):
        raise ConfigError("weights must be nonnegative")
    real_term = -((d_out_real.log() * w).sum() / w.sum())
    fake_term = -((1.0 - d_out_fake).log().mean())
    disc_loss = real_term + fake_term
    gen_loss = -(d_out_fake.log().mean())
    return disc_loss, gen_loss


def _disc_loss_logits(real_logits: Node, w: np.ndarray, fake_logits: Node) -> Node:
    """Same discriminator loss, stable in the saturated regions.

    Uses -log sigmoid(l) = softplus(-l) and -log(1 - sigmoid(l)) = softplus(l).
    """
    real_term = ((-real_logits).softplus() * w.reshape(-1, 1)).sum() / w.sum()
    fake_term = fake_logits.softplus().mean()
    return real_term + fake_term


def _gen_loss_logits(fake_logits: Node) -> Node:
    return (-fake_logits).softplus().mean()


@dataclass
class RefinerTrainConfig:
    epochs: int = 200
    batch_size: int = 2000
    alpha0: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    gamma: float = 0.999
    disc_updates_per_gen: int = 4
    collapse_threshold: float = 0.05
    collapse_patience: int = 20  # epochs of near-zero discriminator loss
    log_jsd_bins: int = 32  # per-epoch latent JSD diagnostic


@dataclass
class RefinerHistory:
    disc_loss: list = field(default_factory=list)
    gen_loss: list = field(default_factory=list)
    latent_jsd: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def _weighted_batch_stream(weighted: WeightedLatentBatch, batch_size: int, rng):
    """Endless shuffled (z, w) batches cycling over the training set."""
    n = len(weighted)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            sel = order[start : start + batch_size]
            yield weighted.z[sel], weighted.w[sel]


def train_refiner(
    weighted: WeightedLatentBatch,
    config: RefinerTrainConfig,
    rng: np.random.Generator,
    gan: RefinerGan | None = None,
) -> tuple[RefinerGan, RefinerHistory]:
    """Adversarial training on the weighted latent sample.

    One epoch is n/batch_size generator updates, each preceded by
    ``disc_updates_per_gen`` discriminator updates on fresh batches.
    """
    if len(weighted) < config.batch_size:
        raise ConfigError(
            f"weighted latent set ({len(weighted)}) smaller than one batch "
            f"({config.batch_size})"
        )
    if gan is None:
        gan = RefinerGan(rng)
    gen_params = gan.generator.parameters()
    disc_params = gan.discriminator.parameters()
    adam_kwargs = dict(
        alpha0=config.alpha0, beta1=config.beta1, beta2=config.beta2, gamma=config.gamma
    )
    gen_state = AdamState.for_params(gen_params, **adam_kwargs)
    disc_state = AdamState.for_params(disc_params, **adam_kwargs)

    gen_updates_per_epoch = max(1, len(weighted) // config.batch_size)
    real_batches = _weighted_batch_stream(weighted, config.batch_size, rng)
    history = RefinerHistory()
    target_hist = _latent_histogram(weighted.z, weighted.w, config.log_jsd_bins)
    collapse_streak = 0

    for _ in range(config.epochs):
        disc_sum = gen_sum = 0.0
        for _ in range(gen_updates_per_epoch):
            for _ in range(config.disc_updates_per_gen):
                z_real, w_real = next(real_batches)
                y = rng.standard_normal((config.batch_size, gan.aux_dim))
                fake = gan.generator.forward_array(y)
                tape = Tape()
                real_logits = gan.discriminator.forward(
                    tape, z_real, apply_output_activation=False
                )
                fake_logits = gan.discriminator.forward(
                    tape, fake, apply_output_activation=False
                )
                loss = _disc_loss_logits(real_logits, w_real, fake_logits)
                if not np.isfinite(loss.value):
                    raise DivergenceError("discriminator loss became non-finite")
                tape.backward(loss)
                adam_step(disc_state, disc_params, tape.grads_for(disc_params))
                disc_sum += float(loss.value)

            y = rng.standard_normal((config.batch_size, gan.aux_dim))
            tape = Tape()
            fake = gan.generator.forward(tape, y)
            fake_logits = gan.discriminator.forward(
                tape, fake, apply_output_activation=False, frozen=True
            )
            loss = _gen_loss_logits(fake_logits)
            if not np.isfinite(loss.value):
                raise DivergenceError("generator loss became non-finite")
            tape.backward(loss)
            adam_step(gen_state, gen_params, tape.grads_for(gen_params))
            gen_sum += float(loss.value)

        gen_state.end_epoch()
        disc_state.end_epoch()
        n_disc = gen_updates_per_epoch * config.disc_updates_per_gen
        mean_disc = disc_sum / n_disc
        history.disc_loss.append(mean_disc)
        history.gen_loss.append(gen_sum / gen_updates_per_epoch)
        history.lr.append(gen_state.effective_lr())
        history.latent_jsd.append(
            _epoch_jsd(gan, target_hist, config.log_jsd_bins, rng)
        )

        collapse_streak = collapse_streak + 1 if mean_disc < config.collapse_threshold else 0
        if collapse_streak >= config.collapse_patience:
            raise DivergenceError(
                f"discriminator collapse: mean loss < {config.collapse_threshold} "
                f"for {collapse_streak} consecutive epochs "
                f"(last gen loss {history.gen_loss[-1]:.4f})"
            )
    return gan, history


_LATENT_BOX = (-4.0, 4.0, -4.0, 4.0)


def _latent_histogram(z: np.ndarray, w, bins: int):
    return histogram(z, weights=w, bounds=_LATENT_BOX, bins=(bins, bins))


def _epoch_jsd(gan: RefinerGan, target_hist, bins: int, rng) -> float:
    sample = gan.generate(20_000, rng)
    return jsd(histogram(sample, bounds=_LATENT_BOX, bins=(bins, bins)), target_hist)


def refine_and_generate(
    flow: FlowModel, gan: RefinerGan, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Unweighted refined samples: auxiliary noise -> refined latent -> features."""
    if n <= 0:
        raise ConfigError(f"sample count must be positive, got {n}")
    z = gan.generate(n, rng)
    x, _ = flow.g_forward(z)
    return x
