"""RealNVP flow in 2D: affine coupling blocks with exact log-density.

Each block transforms the dims selected by ``1 - mask`` using scale and
translation nets fed with the masked (kept) dims. Scales pass through a soft
clamp ``s -> s_max * tanh(s / s_max)`` so exp(s) cannot overflow, and the
final layers of both subnets start at zero, making a fresh model the
identity map with zero log-det.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .data import shuffled_batches
from .errors import ConfigError, DivergenceError
from .nncore import AdamState, Mlp, Node, Param, Tape, adam_step

__all__ = ["CouplingBlock", "FlowModel", "FlowTrainConfig", "train_flow"]

_LOG_2PI = np.log(2.0 * np.pi)


class CouplingBlock:
    def __init__(
        self,
        mask: np.ndarray,
        units: int,
        rng: np.random.Generator,
        n_hidden: int = 3,
        s_max: float = 4.0,
        hidden_slope: float = 0.01,
    ):
        self.mask = np.asarray(mask, dtype=np.float64)
        self.s_max = float(s_max)
        sizes = [2] + [units] * n_hidden + [2]
        self.s_net = Mlp(sizes, rng, hidden_slope, zero_init_last=True)
        self.t_net = Mlp(sizes, rng, hidden_slope, zero_init_last=True)

    def parameters(self) -> list[Param]:
        return self.s_net.parameters() + self.t_net.parameters()

    def _soft_clamp_array(self, s: np.ndarray) -> np.ndarray:
        return self.s_max * np.tanh(s / self.s_max)

    # Forward: latent -> data. Active dims a = 1 - mask get a * (x e^s + t).
    def forward_array(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        act = 1.0 - self.mask
        keep = x * self.mask
        s = act * self._soft_clamp_array(self.s_net.forward_array(keep))
        t = act * self.t_net.forward_array(keep)
        y = keep + act * (x * np.exp(s) + t)
        return y, s.sum(axis=1)

    def inverse_array(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        act = 1.0 - self.mask
        keep = y * self.mask
        s = act * self._soft_clamp_array(self.s_net.forward_array(keep))
        t = act * self.t_net.forward_array(keep)
        x = keep + act * ((y - t) * np.exp(-s))
        return x, -s.sum(axis=1)

    def forward_node(self, tape: Tape, x: Node, frozen: bool = False) -> tuple[Node, Node]:
        act = 1.0 - self.mask
        keep = x * self.mask
        s_raw = self.s_net.forward(tape, keep, frozen=frozen)
        s = ((s_raw * (1.0 / self.s_max)).tanh() * self.s_max) * act
        t = self.t_net.forward(tape, keep, frozen=frozen) * act
        y = keep + (x * s.exp() + t) * act
        return y, s.sum(axis=1)

    def inverse_node(self, tape: Tape, y: Node, frozen: bool = False) -> tuple[Node, Node]:
        act = 1.0 - self.mask
        keep = y * self.mask
        s_raw = self.s_net.forward(tape, keep, frozen=frozen)
        s = ((s_raw * (1.0 / self.s_max)).tanh() * self.s_max) * act
        t = self.t_net.forward(tape, keep, frozen=frozen) * act
        x = keep + ((y - t) * (-s).exp()) * act
        return x, -(s.sum(axis=1))


def _check_finite(arr: np.ndarray, block_index: int, direction: str):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(
            f"non-finite values leaving coupling block {block_index} ({direction})"
        )


class FlowModel:
    """Stack of coupling blocks with alternating masks over a 2D standard-normal prior."""

    def __init__(
        self,
        n_blocks: int,
        units: int,
        rng: np.random.Generator,
        n_hidden: int = 3,
        s_max: float = 4.0,
        hidden_slope: float = 0.01,
    ):
        if n_blocks < 1:
            raise ConfigError("need at least one coupling block")
        self.n_blocks = n_blocks
        self.units = units
        self.blocks = [
            CouplingBlock(
                np.array([1.0, 0.0]) if i % 2 == 0 else np.array([0.0, 1.0]),
                units,
                rng,
                n_hidden=n_hidden,
                s_max=s_max,
                hidden_slope=hidden_slope,
            )
            for i in range(n_blocks)
        ]

    def parameters(self) -> list[Param]:
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    # -- array paths (generation / density evaluation) --

    def g_forward(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map latent points to feature space; returns (x, log|det dg/dz|)."""
        x = np.asarray(z, dtype=np.float64)
        logdet = np.zeros(len(x))
        for i, block in enumerate(self.blocks):
            x, ld = block.forward_array(x)
            _check_finite(x, i, "forward")
            logdet += ld
        return x, logdet

    def g_inverse(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map feature points back to latent; returns (z, log|det dg^-1/dx|)."""
        z = np.asarray(x, dtype=np.float64)
        logdet = np.zeros(len(z))
        for i in range(len(self.blocks) - 1, -1, -1):
            z, ld = self.blocks[i].inverse_array(z)
            _check_finite(z, i, "inverse")
            logdet += ld
        return z, logdet

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z, logdet_inv = self.g_inverse(x)
        prior = -0.5 * (z * z).sum(axis=1) - _LOG_2PI
        return prior + logdet_inv

    def sample(self, n: int, rng: np.random.Generator, chunk: int = 200_000) -> np.ndarray:
        out = np.empty((n, 2))
        done = 0
        while done < n:
            m = min(chunk, n - done)
            z = rng.standard_normal((m, 2))
            out[done : done + m] = self.g_forward(z)[0]
            done += m
        return out

    # -- tape paths (training / latent gradients) --

    def forward_nodes(self, tape: Tape, z: Node, frozen: bool = False) -> tuple[Node, Node]:
        x, logdet = z, None
        for block in self.blocks:
            x, ld = block.forward_node(tape, x, frozen=frozen)
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def log_prob_nodes(self, tape: Tape, x_batch: np.ndarray) -> Node:
        z = tape.leaf(x_batch)
        logdet = None
        for i in range(len(self.blocks) - 1, -1, -1):
            z, ld = self.blocks[i].inverse_node(tape, z)
            logdet = ld if logdet is None else logdet + ld
        prior = (z * z).sum(axis=1) * (-0.5) - _LOG_2PI
        return prior + logdet


@dataclass
class FlowTrainConfig:
    epochs: int = 100
    batch_size: int = 2000
    alpha0: float = 1e-3
    gamma: float = 0.999
    weight_decay: float = 1e-5
    heldout_fraction: float = 0.05


@dataclass
class TrainHistory:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def nll_loss(model: FlowModel, batch: np.ndarray, tape: Tape) -> Node:
    """Training objective: negative mean log-density of the batch."""
    return -(model.log_prob_nodes(tape, batch).mean())


def heldout_split(data: np.ndarray, fraction: float, rng: np.random.Generator):
    n_val = max(1, int(round(len(data) * fraction)))
    order = rng.permutation(len(data))
    return data[order[n_val:]], data[order[:n_val]]


def train_flow(
    model: FlowModel,
    data: np.ndarray,
    config: FlowTrainConfig,
    rng: np.random.Generator,
) -> TrainHistory:
    """Maximum-likelihood training with Adam and per-epoch LR decay, in place."""
    params = model.parameters()
    state = AdamState.for_params(
        params,
        alpha0=config.alpha0,
        gamma=config.gamma,
        weight_decay=config.weight_decay,
    )
    train, val = heldout_split(data, config.heldout_fraction, rng)
    history = TrainHistory()
    last_good = [p.value.copy() for p in params]
    for _ in range(config.epochs):
        epoch_loss = 0.0
        n_batches = 0
        for batch in shuffled_batches(train, config.batch_size, rng):
            tape = Tape()
            loss = nll_loss(model, batch, tape)
            if not np.isfinite(loss.value):
                for p, v in zip(params, last_good):
                    p.value[:] = v
                raise DivergenceError(
                    "flow training loss became non-finite; parameters rolled back "
                    "to the last completed epoch"
                )
            tape.backward(loss)
            adam_step(state, params, tape.grads_for(params))
            epoch_loss += float(loss.value)
            n_batches += 1
        state.end_epoch()
        last_good = [p.value.copy() for p in params]
        history.train_nll.append(epoch_loss / max(n_batches, 1))
        history.val_nll.append(float(-model.log_prob(val).mean()))
        history.lr.append(state.effective_lr())
    return history
