"""Deterministic policy-gradient learner for the inverter coordination task.

Actor maps the voltage-magnitude state to one coefficient per zone through
relu/tanh hidden layers and a tanh output (so actions respect [-1, 1] before
any clamping). The critic scores (state, action) with the action appended to
the state vector. Targets are soft-updated copies. Training is strictly
sequential on one RNG stream, so a (seed, config, scenarios) triple pins the
whole trajectory bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .env import Env, MdpAction, MdpState
from .errors import CheckpointError, ModelMismatchError, NumericalError, TrainingError

ACTOR_HIDDEN = (400, 300)
CRITIC_HIDDEN = (400, 300)
FINAL_INIT = 3e-3


@dataclass
class AgentNets:
    actor: nn.MlpModel
    critic: nn.MlpModel
    actor_target: nn.MlpModel
    critic_target: nn.MlpModel

    @property
    def state_dim(self) -> int:
        return self.actor.input_dim

    @property
    def action_dim(self) -> int:
        return self.actor.output_dim


def build_agent(state_dim: int, action_dim: int,
                rng: np.random.Generator | None = None) -> AgentNets:
    """Fresh actor/critic with target copies equal to the learned nets."""
    rng = rng if rng is not None else np.random.default_rng()
    actor = nn.build_mlp([state_dim, *ACTOR_HIDDEN, action_dim],
                         activations=["relu", "tanh", "tanh"],
                         rng=rng, final_init_scale=FINAL_INIT)
    critic = nn.build_mlp([state_dim + action_dim, *CRITIC_HIDDEN, 1],
                          activations=["relu", "relu", "identity"],
                          rng=rng, final_init_scale=FINAL_INIT)
    actor.eval()
    critic.eval()
    return AgentNets(actor=actor, critic=critic,
                     actor_target=nn.clone_model(actor),
                     critic_target=nn.clone_model(critic))


@dataclass
class TrainConfig:
    episodes: int = 100
    horizon: int = 20
    gamma: float = 0.95
    tau: float = 0.001
    batch_size: int = 64
    actor_lr: float = 0.001
    critic_lr: float = 0.001
    noise_sigma_start: float = 0.5
    noise_sigma_end: float = 0.005
    noise_mu: float = 0.1  # OU mean-reversion rate when noise_process = "ou"
    noise_process: str = "gaussian"  # or "ou"
    buffer_capacity: int = 10_000
    updates_start: str = "batch"  # "batch": buffer >= batch_size; "filled": at capacity
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer capacity")
        if self.noise_process not in ("gaussian", "ou"):
            raise ValueError("noise_process must be 'gaussian' or 'ou'")
        if self.updates_start not in ("batch", "filled"):
            raise ValueError("updates_start must be 'batch' or 'filled'")


class ReplayBuffer:
    """Fixed-capacity ring of transitions; eviction is oldest-first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s2, terminal: bool) -> None:
        i = self.head
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.terminal[i] = terminal
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
                "s2": self.s2[idx], "terminal": self.terminal[idx]}


class OuNoise:
    """Ornstein-Uhlenbeck process pulled toward zero, one state per episode."""

    def __init__(self, dim: int, theta: float, sigma: float):
        self.theta = theta
        self.sigma = sigma
        self.x = np.zeros(dim)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        self.x += self.theta * (0.0 - self.x) + self.sigma * rng.standard_normal(self.x.shape)
        return self.x


def act(nets: AgentNets, state: MdpState, sigma: float = 0.0,
        rng: np.random.Generator | None = None,
        noise: OuNoise | None = None) -> MdpAction:
    """Deterministic policy plus optional exploration noise, clamped to [-1, 1]."""
    vec = state.as_vector()
    if vec.shape[0] != nets.actor.input_dim:
        raise ModelMismatchError(
            f"state has {vec.shape[0]} entries, actor expects {nets.actor.input_dim}")
    nets.actor.eval()
    out, _ = nn.forward(nets.actor, vec[None, :])
    a = out[0]
    if noise is not None:
        a = a + noise.sample(rng)
    elif sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return MdpAction(np.clip(a, -1.0, 1.0))


def critic_value(nets: AgentNets, state: MdpState, action: MdpAction) -> float:
    x = np.concatenate([state.as_vector(), action.coefficients])
    if x.shape[0] != nets.critic.input_dim:
        raise ModelMismatchError(
            f"state+action has {x.shape[0]} entries, critic expects {nets.critic.input_dim}")
    nets.critic.eval()
    out, _ = nn.forward(nets.critic, x[None, :])
    return float(out[0, 0])


def td_loss(nets: AgentNets, batch: dict, gamma: float
            ) -> tuple[float, dict[str, np.ndarray]]:
    """Squared TD error against target-network bootstrap values.

    y = r + gamma * Q'(s', pi'(s')) with y = r on terminal transitions;
    returns (mean squared error, critic parameter gradients).
    """
    a2, _ = nn.forward(nets.actor_target, batch["s2"])
    q2, _ = nn.forward(nets.critic_target, np.hstack([batch["s2"], a2]))
    y = batch["r"][:, None] + gamma * q2 * (~batch["terminal"])[:, None]

    q, cache = nn.forward(nets.critic, np.hstack([batch["s"], batch["a"]]))
    diff = q - y
    loss = float(np.mean(diff * diff))
    dq = 2.0 * diff / diff.size
    grads, _ = nn.backward(nets.critic, cache, dq)
    return loss, grads


def policy_gradient(nets: AgentNets, states: np.ndarray
                    ) -> tuple[float, dict[str, np.ndarray]]:
    """Gradients for descending -mean Q(s, pi(s)) (i.e. policy ascent).

    The critic's own parameters are not touched; its backward pass only
    supplies dQ/da, chained into the actor.
    """
    states = np.atleast_2d(states)
    a, cache_a = nn.forward(nets.actor, states)
    q, cache_c = nn.forward(nets.critic, np.hstack([states, a]))
    mean_q = float(np.mean(q))
    dq = np.full_like(q, -1.0 / q.shape[0])  # d(-mean Q)/dQ
    _, dx = nn.backward(nets.critic, cache_c, dq)
    da = dx[:, states.shape[1]:]
    grads, _ = nn.backward(nets.actor, cache_a, da)
    return mean_q, grads


def policy_update(nets: AgentNets, states: np.ndarray, optimizer: nn.AdamState) -> float:
    """One actor ascent step on the sampled policy gradient; returns mean Q."""
    mean_q, grads = policy_gradient(nets, states)
    nn.adam_step(optimizer, nn.model_parameters(nets.actor), grads)
    return mean_q


def soft_update(learned: dict[str, np.ndarray], target: dict[str, np.ndarray],
                tau: float) -> None:
    """theta' <- tau * theta + (1 - tau) * theta', elementwise in place."""
    for key, src in learned.items():
        dst = target.get(key)
        if dst is None or dst.shape != src.shape:
            raise ModelMismatchError(f"target parameter {key!r} missing or misshapen")
        dst *= 1.0 - tau
        dst += tau * src


def soft_update_nets(nets: AgentNets, tau: float) -> None:
    soft_update(nn.model_parameters(nets.actor), nn.model_parameters(nets.actor_target), tau)
    soft_update(nn.model_parameters(nets.critic), nn.model_parameters(nets.critic_target), tau)


def _sigma_schedule(cfg: TrainConfig, episode: int) -> float:
    if cfg.episodes <= 1:
        return cfg.noise_sigma_start
    frac = episode / (cfg.episodes - 1)
    return cfg.noise_sigma_start + (cfg.noise_sigma_end - cfg.noise_sigma_start) * frac


def train(env: Env, scenarios, cfg: TrainConfig,
          nets: AgentNets | None = None,
          buffer: ReplayBuffer | None = None,
          critic_freeze_updates: int = 0) -> tuple[AgentNets, list[float]]:
    """Offline training loop: explore, replay, update, soft-track targets.

    One critic and one actor update per environment step once the buffer
    holds enough transitions; exploration sigma anneals linearly across
    episodes. Returns the nets and the cumulative-reward-per-episode series.
    On a non-finite loss the run aborts with TrainingError carrying the last
    episode-boundary snapshot in ``last_good``.

    ``nets``/``buffer`` allow resuming or fine-tuning an existing agent;
    ``critic_freeze_updates`` skips the first N critic updates (fine-tune
    stabilization).
    """
    if len(scenarios) == 0:
        raise TrainingError("scenario set is empty")
    rng = np.random.default_rng(cfg.seed)
    env.rng = rng  # one stream drives exploration, sampling, and measurement noise

    if nets is None:
        nets = build_agent(env.cfg.state_dim, env.cfg.n_zones, rng)
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity, nets.state_dim, nets.action_dim)
    actor_opt = nn.AdamState(learning_rate=cfg.actor_lr)
    critic_opt = nn.AdamState(learning_rate=cfg.critic_lr)
    critic_params = nn.model_parameters(nets.critic)

    threshold = cfg.batch_size if cfg.updates_start == "batch" else cfg.buffer_capacity
    scenario_list = list(scenarios)
    trajectory: list[float] = []
    updates = 0
    snapshot = _snapshot(nets)

    for episode in range(cfg.episodes):
        sigma = _sigma_schedule(cfg, episode)
        scenario = scenario_list[rng.integers(len(scenario_list))]
        ou = OuNoise(nets.action_dim, cfg.noise_mu, sigma) \
            if cfg.noise_process == "ou" else None
        try:
            state = env.reset(scenario)
            cum_reward = 0.0
            for _ in range(cfg.horizon):
                action = act(nets, state, sigma=sigma, rng=rng, noise=ou)
                next_state, r, done, info = env.step(action)
                buffer.push(state.as_vector(), action.coefficients, r,
                            next_state.as_vector(), info["terminal"])
                cum_reward += r
                state = next_state

                if len(buffer) >= threshold:
                    batch = buffer.sample(cfg.batch_size, rng)
                    if updates >= critic_freeze_updates:
                        loss, grads = td_loss(nets, batch, cfg.gamma)
                        if not math.isfinite(loss):
                            raise NumericalError(f"TD loss diverged to {loss}")
                        nn.adam_step(critic_opt, critic_params, grads)
                    policy_update(nets, batch["s"], actor_opt)
                    soft_update_nets(nets, cfg.tau)
                    updates += 1
                if done:
                    break
        except NumericalError as exc:
            err = TrainingError(f"aborted in episode {episode}: {exc}", epoch=episode)
            err.last_good = snapshot
            raise err from exc
        trajectory.append(cum_reward)
        snapshot = _snapshot(nets)
    return nets, trajectory


def _snapshot(nets: AgentNets) -> AgentNets:
    return AgentNets(actor=nn.clone_model(nets.actor),
                     critic=nn.clone_model(nets.critic),
                     actor_target=nn.clone_model(nets.actor_target),
                     critic_target=nn.clone_model(nets.critic_target))


def trajectory_csv(trajectory: list[float], cfg: TrainConfig) -> str:
    lines = ["episode, cumulative_reward, sigma"]
    for ep, cum in enumerate(trajectory):
        lines.append(f"{ep},{cum!r},{_sigma_schedule(cfg, ep)!r}")
    return "\n".join(lines) + "\n"


# --- checkpoint bundle ------------------------------------------------------


def save_agent(path, nets: AgentNets, cfg: TrainConfig,
               buffer: ReplayBuffer | None = None,
               rng: np.random.Generator | None = None,
               feeder_fingerprint: str = "") -> None:
    """Bundle nets, config, and optionally replay/RNG state into one file."""
    arrays: dict[str, np.ndarray] = {}
    descriptors = {}
    for name in ("actor", "critic", "actor_target", "critic_target"):
        net_arrays, descriptor = nn.model_to_arrays(getattr(nets, name))
        descriptors[name] = descriptor
        for key, val in net_arrays.items():
            arrays[f"{name}.{key}"] = val
    meta = {
        "kind": "agent",
        "nets": descriptors,
        "config": asdict(cfg),
        "feeder_fingerprint": feeder_fingerprint,
        "has_buffer": buffer is not None,
    }
    if buffer is not None:
        arrays["buffer.s"] = buffer.s[:buffer.size]
        arrays["buffer.a"] = buffer.a[:buffer.size]
        arrays["buffer.r"] = buffer.r[:buffer.size]
        arrays["buffer.s2"] = buffer.s2[:buffer.size]
        arrays["buffer.terminal"] = buffer.terminal[:buffer.size].astype(float)
        meta["buffer"] = {"capacity": buffer.capacity, "size": buffer.size,
                          "head": buffer.head}
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    nn.save_checkpoint(path, arrays, meta)


def load_agent(path) -> tuple[AgentNets, TrainConfig, ReplayBuffer | None, dict]:
    arrays, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "agent":
        raise CheckpointError(f"{path} is not an agent checkpoint")

    def net(name):
        prefix = f"{name}."
        sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        return nn.model_from_arrays(sub, meta["nets"][name])

    nets = AgentNets(actor=net("actor"), critic=net("critic"),
                     actor_target=net("actor_target"), critic_target=net("critic_target"))
    cfg = TrainConfig(**meta["config"])
    buffer = None
    if meta.get("has_buffer"):
        info = meta["buffer"]
        buffer = ReplayBuffer(info["capacity"], nets.state_dim, nets.action_dim)
        size = info["size"]
        buffer.s[:size] = arrays["buffer.s"]
        buffer.a[:size] = arrays["buffer.a"]
        buffer.r[:size] = arrays["buffer.r"]
        buffer.s2[:size] = arrays["buffer.s2"]
        buffer.terminal[:size] = arrays["buffer.terminal"].astype(bool)
        buffer.size = size
        buffer.head = info["head"]
    return nets, cfg, buffer, meta
