"""Variational-state novelty reward.

A VAE over flattened observations. The novelty of a state is the KL divergence
between the encoder's diagonal Gaussian and the unit-Gaussian prior,
normalized into [0, 1] by the largest divergence seen so far in the run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .gridworld import Observation

log = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0


@dataclass
class LatentDistribution:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class VaeModel:
    encoder: nn.DenseNet
    decoder: nn.DenseNet
    latent_dim: int
    encoder_opt: nn.OptimizerState = None
    decoder_opt: nn.OptimizerState = None
    lr: float = 1e-3

    def __post_init__(self):
        if self.encoder.output_dim != 2 * self.latent_dim:
            raise ValueError("encoder must output 2 * latent_dim values (mu, logvar)")
        if self.decoder.input_dim != self.latent_dim:
            raise ValueError("decoder input dim must equal latent_dim")
        if self.decoder.output_dim != self.encoder.input_dim:
            raise ValueError("decoder must reconstruct the encoder's input")
        if self.encoder_opt is None:
            self.encoder_opt = nn.OptimizerState.for_net(self.encoder, self.lr)
        if self.decoder_opt is None:
            self.decoder_opt = nn.OptimizerState.for_net(self.decoder, self.lr)

    @classmethod
    def create(cls, obs_dim: int, rng: np.random.Generator, latent_dim: int = 16, hidden: int = 128,
               lr: float = 1e-3) -> VaeModel:
        encoder = nn.DenseNet.mlp(obs_dim, 2 * latent_dim, rng, hidden=hidden)
        decoder = nn.DenseNet.mlp(latent_dim, obs_dim, rng, hidden=hidden)
        return cls(encoder, decoder, latent_dim, lr=lr)

    @property
    def obs_dim(self) -> int:
        return self.encoder.input_dim


def _split(vae: VaeModel, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = vae.latent_dim
    return out[..., :d], out[..., d:]


def encode(vae: VaeModel, obs: np.ndarray) -> LatentDistribution:
    mu, logvar = _split(vae, nn.predict(vae.encoder, obs))
    return LatentDistribution(mu, np.clip(logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT))


def kl_divergence(dist: LatentDistribution):
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)); a float, or one value per row for batches."""
    mu, logvar = np.asarray(dist.mu, dtype=float), np.asarray(dist.logvar, dtype=float)
    kl = 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)
    # exact zero at the prior can round to tiny negatives
    kl = np.maximum(kl, 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def reparameterized_sample(dist: LatentDistribution, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(np.shape(dist.mu))
    return dist.mu + np.exp(0.5 * dist.logvar) * eps


@dataclass
class KlNormalizer:
    """Maps raw KL values into [0, 1].

    ``mode="running_max"`` divides by the largest KL seen so far;
    ``mode="fixed"`` divides by ``scale`` and clips at 1.
    """

    running_max: float = 0.0
    epsilon: float = 1e-8
    mode: str = "running_max"
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("running_max", "fixed"):
            raise ValueError(f"unknown normalizer mode {self.mode!r}")

    def __call__(self, kl: float) -> float:
        if self.mode == "fixed":
            return min(1.0, kl / self.scale)
        if kl > self.running_max:
            self.running_max = kl
        return min(1.0, kl / (self.running_max + self.epsilon))


def intrinsic_reward(vae: VaeModel, norm: KlNormalizer, obs: np.ndarray) -> float:
    """Normalized novelty of ``obs``, using the encoder mean (no sampling)."""
    return norm(kl_divergence(encode(vae, obs)))


@dataclass
class RolloutBuffer:
    """The per-segment dataset: a seed state followed by stored transitions."""

    seed_state: Observation | np.ndarray
    transitions: list = field(default_factory=list)

    def add(self, transition) -> None:
        self.transitions.append(transition)

    def reset(self, state) -> None:
        self.seed_state = state
        self.transitions = []

    def __len__(self) -> int:
        return 1 + len(self.transitions)

    def states(self) -> np.ndarray:
        rows = [self.seed_state] + [t.next_obs for t in self.transitions]
        return np.stack([r.vector if isinstance(r, Observation) else np.asarray(r, dtype=float) for r in rows])


def loss_and_gradients(vae: VaeModel, x: np.ndarray, eps: np.ndarray):
    """Mean over the batch of ``sum((decoder(z) - x)**2) + KL``, with z = mu + sigma * eps.

    Returns ``(loss, encoder_grads, decoder_grads, reconstruction_mse)``. ``eps``
    is passed in so the loss is a deterministic function of the parameters.
    """
    x = np.atleast_2d(x)
    batch = x.shape[0]
    enc_out, enc_tape = nn.forward(vae.encoder, x)
    mu, raw_logvar = _split(vae, enc_out)
    logvar = np.clip(raw_logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    recon, dec_tape = nn.forward(vae.decoder, z)

    err = recon - x
    sq = np.sum(err * err, axis=1)
    kl = 0.5 * np.sum(mu * mu + sigma * sigma - logvar - 1.0, axis=1)
    loss = float(np.mean(sq + kl))

    dec_grads = nn.backward(vae.decoder, dec_tape, 2.0 * err / batch)
    dz = dec_grads.input
    d_mu = dz + mu / batch
    d_logvar = dz * 0.5 * sigma * eps + 0.5 * (sigma * sigma - 1.0) / batch
    d_logvar = d_logvar * (np.abs(raw_logvar) < LOGVAR_LIMIT)
    enc_grads = nn.backward(vae.encoder, enc_tape, np.concatenate([d_mu, d_logvar], axis=1))
    return loss, enc_grads, dec_grads, float(np.mean(err * err))


def evaluate(vae: VaeModel, states: np.ndarray) -> tuple[float, float]:
    """``(loss, reconstruction_mse)`` using the latent mean, i.e. without sampling noise."""
    states = np.atleast_2d(states)
    loss, _, _, mse = loss_and_gradients(vae, states, np.zeros((states.shape[0], vae.latent_dim)))
    return loss, mse


def train_vae(vae: VaeModel, buffer: RolloutBuffer | np.ndarray, epochs: int, rng: np.random.Generator,
              batch_size: int = 64) -> tuple[VaeModel, float]:
    """Run ``epochs`` shuffled minibatch passes over the buffer's states.

    Returns the model (updated in place) and the post-training mean loss, or
    NaN when the buffer is empty.
    """
    states = buffer.states() if isinstance(buffer, RolloutBuffer) else np.atleast_2d(buffer)
    if states.size == 0:
        log.warning("train_vae called with an empty buffer; skipping")
        return vae, float("nan")
    n = states.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = states[order[start:start + batch_size]]
            eps = rng.standard_normal((batch.shape[0], vae.latent_dim))
            loss, enc_grads, dec_grads, _ = loss_and_gradients(vae, batch, eps)
            if not np.isfinite(loss):
                raise nn.TrainingError(f"non-finite VAE loss {loss}")
            nn.apply_update(vae.encoder_opt, vae.encoder, enc_grads)
            nn.apply_update(vae.decoder_opt, vae.decoder, dec_grads)
    return vae, evaluate(vae, states)[0]


def save_vae(vae: VaeModel, path) -> None:
    nn.save_checkpoint(path, {"encoder": vae.encoder, "decoder": vae.decoder}, {"latent_dim": vae.latent_dim})


def load_vae(path, lr: float = 1e-3) -> VaeModel:
    nets, meta = nn.load_checkpoint(path)
    return VaeModel(nets["encoder"], nets["decoder"], int(meta["latent_dim"]), lr=lr)
