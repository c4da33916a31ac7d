"""Advantage actor-critic trained on extrinsic plus intrinsic rewards.

The per-step reward is ``r_ext + beta_vae * r_vae + beta_llm * r_llm``. Every
``n_steps`` steps (and at episode end) the actor and critic are updated from
n-step returns and the VAE is retrained on the states gathered since the
last update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn
from .gridworld import N_ACTIONS, OBS_DIM, GridWorld, Observation, observe, step, visible_objects
from .vsimr import KlNormalizer, RolloutBuffer, VaeModel, intrinsic_reward, train_vae

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    beta_vae: float = 0.005
    beta_llm: float = 0.005
    gamma: float = 0.99
    n_steps: int = 128
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes: int = 1000
    seed: int = 0
    actor_lr: float = 7e-4
    critic_lr: float = 7e-4
    vae_lr: float = 1e-3
    vae_epochs: int = 4
    latent_dim: int = 16
    hidden: int = 128
    max_grad_norm: float | None = 0.5

    def __post_init__(self):
        if self.beta_vae < 0 or self.beta_llm < 0:
            raise ValueError("beta weights must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.n_steps < 1 or self.episodes < 1:
            raise ValueError("n_steps and episodes must be positive")


@dataclass
class ActorCritic:
    actor: nn.DenseNet
    critic: nn.DenseNet
    actor_opt: nn.OptimizerState
    critic_opt: nn.OptimizerState

    def __post_init__(self):
        if self.actor.output_dim != N_ACTIONS or self.critic.output_dim != 1:
            raise ValueError(f"actor must output {N_ACTIONS} logits and critic a single value")

    @classmethod
    def create(cls, rng: np.random.Generator, obs_dim: int = OBS_DIM, hidden: int = 128,
               actor_lr: float = 7e-4, critic_lr: float = 7e-4) -> ActorCritic:
        actor = nn.DenseNet.mlp(obs_dim, N_ACTIONS, rng, hidden=hidden)
        critic = nn.DenseNet.mlp(obs_dim, 1, rng, hidden=hidden)
        return cls(actor, critic, nn.OptimizerState.for_net(actor, actor_lr),
                   nn.OptimizerState.for_net(critic, critic_lr))


@dataclass
class Transition:
    obs: np.ndarray  # state the action was taken in
    next_obs: Observation
    action: int
    r_extrinsic: float
    r_vae: float
    r_llm: float
    log_prob: float
    value_estimate: float
    terminal: bool


@dataclass
class EpisodeLog:
    episode: int
    extrinsic_return: float
    vae_reward_sum: float
    llm_reward_sum: float
    steps: int
    success: bool


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    entropy: float


def combined_reward(r_ext: float, r_vae: float, r_llm: float, cfg: TrainingConfig) -> float:
    return r_ext + cfg.beta_vae * r_vae + cfg.beta_llm * r_llm


def select_action(ac: ActorCritic, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]:
    """Sample from the policy; returns ``(action, log_prob, value_estimate)``."""
    logp = nn.log_softmax(nn.predict(ac.actor, obs))
    action = nn.sample_categorical(np.exp(logp), rng)
    value = float(nn.predict(ac.critic, obs)[0])
    return action, float(logp[action]), value


def compute_returns(segment: list[Transition], bootstrap_value: float, cfg: TrainingConfig) -> np.ndarray:
    """Backward n-step returns ``G_t = r_total(t) + gamma * G_{t+1}``; terminals cut the chain."""
    returns = np.empty(len(segment))
    g = bootstrap_value
    for i in range(len(segment) - 1, -1, -1):
        tr = segment[i]
        if tr.terminal:
            g = 0.0
        g = combined_reward(tr.r_extrinsic, tr.r_vae, tr.r_llm, cfg) + cfg.gamma * g
        returns[i] = g
    return returns


def policy_loss_gradient(logits: np.ndarray, actions: np.ndarray, advantages: np.ndarray,
                         entropy_coef: float) -> tuple[float, float, np.ndarray]:
    """Loss ``mean(-log pi(a|s) * A) - entropy_coef * mean(H)`` and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = nn.log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(n)
    ent = -(probs * logp).sum(axis=1)
    loss = float(np.mean(-logp[rows, actions] * advantages) - entropy_coef * np.mean(ent))
    grad = probs * advantages[:, None]
    grad[rows, actions] -= advantages
    grad += entropy_coef * probs * (logp + ent[:, None])
    return loss, float(np.mean(ent)), grad / n


def update(ac: ActorCritic, segment: list[Transition], returns: np.ndarray,
           cfg: TrainingConfig) -> tuple[ActorCritic, UpdateStats]:
    """One actor and one critic optimizer step on a segment."""
    if len(returns) != len(segment):
        raise ValueError("returns are not aligned with the segment")
    x = np.stack([tr.obs for tr in segment])
    actions = np.array([tr.action for tr in segment])
    advantages = returns - np.array([tr.value_estimate for tr in segment])

    logits, actor_tape = nn.forward(ac.actor, x)
    actor_loss, mean_entropy, d_logits = policy_loss_gradient(logits, actions, advantages, cfg.entropy_coef)

    values, critic_tape = nn.forward(ac.critic, x)
    diff = values[:, 0] - returns
    critic_loss = float(cfg.value_coef * np.mean(diff * diff))
    d_values = (cfg.value_coef * 2.0 * diff / len(segment))[:, None]

    if not (np.isfinite(actor_loss) and np.isfinite(critic_loss)):
        raise nn.TrainingError(
            f"non-finite loss: actor={actor_loss} critic={critic_loss} "
            f"returns=[{returns.min()}, {returns.max()}] advantages=[{advantages.min()}, {advantages.max()}]"
        )
    actor_grads = nn.clip_grad_norm(nn.backward(ac.actor, actor_tape, d_logits), cfg.max_grad_norm)
    critic_grads = nn.clip_grad_norm(nn.backward(ac.critic, critic_tape, d_values), cfg.max_grad_norm)
    nn.apply_update(ac.actor_opt, ac.actor, actor_grads)
    nn.apply_update(ac.critic_opt, ac.critic, critic_grads)
    return ac, UpdateStats(actor_loss, critic_loss, mean_entropy)


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for (network init, action sampling, VAE training)."""
    init_ss, action_ss, vae_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_ss), np.random.default_rng(action_ss), np.random.default_rng(vae_ss)


def train(env_factory: Callable[[int], GridWorld], cfg: TrainingConfig, vae: VaeModel | None = None,
          llm_scorer: Callable[[list[str], bool], float] | None = None, normalizer: KlNormalizer | None = None,
          ac: ActorCritic | None = None, on_episode: Callable[[EpisodeLog], None] | None = None,
          episodes: Iterable[int] | None = None) -> list[EpisodeLog]:
    """Run the intrinsically motivated A2C loop.

    ``vae`` and ``llm_scorer`` are optional; a missing module contributes a
    zero reward. ``on_episode`` is called after every episode so callers can
    persist logs incrementally.
    """
    init_rng, action_rng, vae_rng = seed_streams(cfg.seed)
    if ac is None:
        ac = ActorCritic.create(init_rng, hidden=cfg.hidden, actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr)
    if vae is not None and normalizer is None:
        normalizer = KlNormalizer()

    logs = []
    for ep in (episodes if episodes is not None else range(cfg.episodes)):
        world = env_factory(ep)
        obs = observe(world)
        buffer = RolloutBuffer(obs)
        segment: list[Transition] = []
        ext_sum = vae_sum = llm_sum = 0.0
        t = 0
        while True:
            x = obs.vector
            action, log_prob, value = select_action(ac, x, action_rng)
            outcome = step(world, action)
            nxt = outcome.observation
            r_vae = intrinsic_reward(vae, normalizer, nxt.vector) if vae is not None else 0.0
            r_llm = llm_scorer(*visible_objects(nxt)) if llm_scorer is not None else 0.0
            tr = Transition(x, nxt, action, outcome.extrinsic_reward, r_vae, r_llm, log_prob, value,
                            outcome.terminated)
            segment.append(tr)
            buffer.add(tr)
            ext_sum += outcome.extrinsic_reward
            vae_sum += r_vae
            llm_sum += r_llm
            t += 1
            done = outcome.terminated or outcome.truncated
            if t % cfg.n_steps == 0 or done:
                bootstrap = 0.0 if outcome.terminated else float(nn.predict(ac.critic, nxt.vector)[0])
                update(ac, segment, compute_returns(segment, bootstrap, cfg), cfg)
                if vae is not None:
                    train_vae(vae, buffer, cfg.vae_epochs, vae_rng)
                buffer.reset(nxt)
                segment = []
            if done:
                break
            obs = nxt
        record = EpisodeLog(ep, ext_sum, vae_sum, llm_sum, t, outcome.terminated)
        logs.append(record)
        if on_episode is not None:
            on_episode(record)
    return logs


def save_actor_critic(ac: ActorCritic, path) -> None:
    nn.save_checkpoint(path, {"actor": ac.actor, "critic": ac.critic})


def load_actor_critic(path, actor_lr: float = 7e-4, critic_lr: float = 7e-4) -> ActorCritic:
    nets, _ = nn.load_checkpoint(path)
    actor, critic = nets["actor"], nets["critic"]
    return ActorCritic(actor, critic, nn.OptimizerState.for_net(actor, actor_lr),
                       nn.OptimizerState.for_net(critic, critic_lr))
