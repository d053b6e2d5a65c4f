"""
Synchronous advantage actor-critic over the trading environment.

The update follows the plain form: returns are discounted sums bootstrapped
from the critic on truncated rollouts, advantages are G_t - V(s_t), and the
total loss is policy + c_v * value + c_e * entropy.
"""
import os
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from backend.components.config import A2CConfig
from backend.components.errors import (
    DimensionError,
    EnvironmentStateError,
    InsufficientDataError,
    NumericalError,
    TrainingAbortedError,
)
from backend.components.metrics import EquityCurve
from backend.components.neural_net import (
    AdamState,
    MlpParams,
    adam_step,
    backward,
    clip_by_global_norm,
    entropy,
    forward,
    forward_with_cache,
    init_mlp,
    load_checkpoint,
    log_softmax,
    sample_action,
    save_checkpoint,
    softmax,
)

logger = logging.getLogger(__name__)

TRAINING_LOG_COLUMNS = ["update_idx", "timesteps", "policy_loss", "value_loss", "entropy", "mean_reward", "equity"]


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    entropies: np.ndarray
    terminal: bool
    bootstrap_value: float = 0.0
    final_equity: float = float("nan")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class LossBreakdown:
    policy_loss: float
    value_loss: float
    entropy_loss: float
    total_loss: float

    @classmethod
    def combine(cls, policy_loss: float, value_loss: float, entropy_loss: float, config: A2CConfig) -> "LossBreakdown":
        total = policy_loss + config.value_coef * value_loss + config.entropy_coef * entropy_loss
        return cls(policy_loss, value_loss, entropy_loss, total)


def collect_rollout(env, actor: MlpParams, critic: MlpParams, horizon: int, rng: np.random.Generator) -> Trajectory:
    """
    Samples up to `horizon` consecutive steps from the current policy.

    Args:
        env: A reset environment that is not done.
        actor (MlpParams): Policy network (state -> action logits).
        critic (MlpParams): Value network (state -> scalar).
        horizon (int): Maximum number of steps T.
        rng (np.random.Generator): Source of the action draws.

    Returns:
        Trajectory: Stops early and is marked terminal if the episode ends;
        otherwise carries critic(s_T) as the bootstrap value.
    """
    if env.done:
        raise EnvironmentStateError("cannot collect a rollout from a finished episode")
    if horizon < 1:
        raise EnvironmentStateError(f"rollout horizon must be >= 1, got {horizon}")
    states, actions, rewards, log_probs, values, entropies = [], [], [], [], [], []
    state = env.observe().as_vector()
    terminal = False
    final_equity = float("nan")
    for _ in range(horizon):
        probs = softmax(forward(actor, state))
        action, log_prob = sample_action(probs, rng)
        value = float(forward(critic, state)[0])
        result = env.step(action)
        states.append(state)
        actions.append(action)
        rewards.append(result.reward)
        log_probs.append(log_prob)
        values.append(value)
        entropies.append(float(entropy(probs)))
        final_equity = float(result.info.get("equity", float("nan")))
        state = result.next_state.as_vector()
        if result.done:
            terminal = True
            break
    bootstrap = 0.0 if terminal else float(forward(critic, state)[0])
    return Trajectory(np.asarray(states), np.asarray(actions, dtype=np.int64), np.asarray(rewards),
                      np.asarray(log_probs), np.asarray(values), np.asarray(entropies),
                      terminal, bootstrap, final_equity)


def discounted_returns(rewards, gamma: float, terminal: bool = True, bootstrap_value: float = 0.0) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, starting from 0 (terminal) or the bootstrap value."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) == 0:
        raise InsufficientDataError("cannot compute returns of an empty trajectory")
    returns = np.empty_like(rewards)
    running = 0.0 if terminal else float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def compute_returns(trajectory: Trajectory, gamma: float) -> np.ndarray:
    return discounted_returns(trajectory.rewards, gamma, trajectory.terminal, trajectory.bootstrap_value)


def compute_advantages(returns, value_estimates) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    value_estimates = np.asarray(value_estimates, dtype=np.float64)
    if returns.shape != value_estimates.shape:
        raise DimensionError(f"{len(returns)} returns vs {len(value_estimates)} value estimates")
    return returns - value_estimates


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    if len(advantages) < 2:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def compute_losses(trajectory: Trajectory, returns, advantages, config: A2CConfig) -> LossBreakdown:
    """Losses from the quantities recorded while the rollout was collected."""
    returns = np.asarray(returns, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if not len(trajectory) == len(returns) == len(advantages):
        raise DimensionError("trajectory, returns and advantages must be aligned")
    policy_loss = -float(np.mean(trajectory.log_probs * advantages))
    value_loss = float(np.mean((trajectory.values - returns) ** 2))
    entropy_loss = -float(np.mean(trajectory.entropies))
    return LossBreakdown.combine(policy_loss, value_loss, entropy_loss, config)


def loss_gradients(actor: MlpParams, critic: MlpParams, states, actions, returns, advantages,
                   config: A2CConfig) -> Tuple[LossBreakdown, MlpParams, MlpParams]:
    """
    Recomputes the losses on a batch and backpropagates the total loss.
    Advantages are constants: no gradient flows through them into the critic.

    Returns:
        Tuple[LossBreakdown, MlpParams, MlpParams]: Losses, actor gradients, critic gradients.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    returns = np.asarray(returns, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    batch = len(actions)

    logits, actor_cache = forward_with_cache(actor, states)
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    onehot = np.zeros_like(p)
    onehot[np.arange(batch), actions] = 1.0
    chosen_log_p = log_p[np.arange(batch), actions]
    h = -(p * log_p).sum(axis=1)

    values, critic_cache = forward_with_cache(critic, states)
    values = values[:, 0]

    losses = LossBreakdown.combine(
        -float(np.mean(chosen_log_p * advantages)),
        float(np.mean((values - returns) ** 2)),
        -float(np.mean(h)),
        config,
    )

    d_logits = -(advantages / batch)[:, None] * (onehot - p)
    d_logits += config.entropy_coef * p * (log_p + h[:, None]) / batch
    d_values = config.value_coef * 2.0 * (values - returns) / batch
    actor_grads = backward(actor, actor_cache, d_logits)
    critic_grads = backward(critic, critic_cache, d_values[:, None])
    return losses, actor_grads, critic_grads


@dataclass
class TrainingResult:
    actor: MlpParams
    critic: MlpParams
    log: pd.DataFrame
    updates: int
    timesteps: int
    checkpoints: List[str] = field(default_factory=list)


@dataclass
class GreedyResult:
    curve: EquityCurve
    trade_log: pd.DataFrame
    actions: List[int]


class A2CAgent:
    """
    Owns the actor and critic networks and runs the training loop:
    collect -> returns -> advantages -> losses -> Adam, until the timestep budget is spent.
    """
    def __init__(self, config: A2CConfig, state_size: int, n_actions: int,
                 actor: Optional[MlpParams] = None, critic: Optional[MlpParams] = None):
        self.config = config
        self.state_size = state_size
        self.n_actions = n_actions
        self.rng = np.random.default_rng(config.seed)
        hidden = list(config.hidden_sizes)
        self.actor = actor if actor is not None else init_mlp([state_size] + hidden + [n_actions], self.rng)
        self.critic = critic if critic is not None else init_mlp([state_size] + hidden + [1], self.rng)
        if self.actor.layer_sizes != [state_size] + hidden + [n_actions]:
            raise DimensionError(f"actor layers {self.actor.layer_sizes} do not fit this environment")
        if self.critic.layer_sizes != [state_size] + hidden + [1]:
            raise DimensionError(f"critic layers {self.critic.layer_sizes} do not fit this environment")

    @property
    def architecture(self) -> Dict[str, List[int]]:
        return {"actor": self.actor.layer_sizes, "critic": self.critic.layer_sizes}

    def action_probabilities(self, state: np.ndarray) -> np.ndarray:
        return softmax(forward(self.actor, state))

    def act_greedy(self, state: np.ndarray) -> int:
        return int(np.argmax(forward(self.actor, state)))

    def save(self, path: str, header: Optional[Dict[str, Any]] = None) -> str:
        return save_checkpoint(path, {"actor": self.actor, "critic": self.critic},
                               {**(header or {}), "state_size": self.state_size, "n_actions": self.n_actions})

    @classmethod
    def load(cls, path: str, config: A2CConfig, state_size: int, n_actions: int,
             expected_header: Optional[Dict[str, Any]] = None) -> "A2CAgent":
        hidden = list(config.hidden_sizes)
        expected = {"actor": [state_size] + hidden + [n_actions], "critic": [state_size] + hidden + [1]}
        networks, _ = load_checkpoint(path, expected, expected_header)
        return cls(config, state_size, n_actions, networks["actor"], networks["critic"])

    def _reset_episode(self, env) -> None:
        starts = env.valid_starts()
        start = starts[int(self.rng.integers(len(starts)))]
        env.reset(start, seed=self.config.seed)

    def train(self, env_factory: Callable[[], Any], checkpoint_dir: Optional[str] = None,
              header: Optional[Dict[str, Any]] = None) -> TrainingResult:
        """
        Trains until `total_timesteps` environment steps have been consumed.

        Args:
            env_factory (Callable): Builds the training environment.
            checkpoint_dir (Optional[str]): Where periodic and final checkpoints go; None disables them.
            header (Optional[Dict[str, Any]]): Provenance stored in every checkpoint header.

        Returns:
            TrainingResult: The trained networks plus the per-update log.
        """
        config = self.config
        rows: List[Dict[str, Any]] = []
        checkpoints: List[str] = []
        timesteps, updates = 0, 0
        if config.total_timesteps == 0:
            logger.info("total_timesteps is 0; returning the initialized networks")
            if checkpoint_dir:
                checkpoints.append(self.save(os.path.join(checkpoint_dir, "model.json"),
                                             {**(header or {}), "update_idx": 0, "timesteps": 0}))
            return TrainingResult(self.actor, self.critic, pd.DataFrame(rows, columns=TRAINING_LOG_COLUMNS),
                                  0, 0, checkpoints)

        env = env_factory()
        if env.state_size != self.state_size or env.n_actions != self.n_actions:
            raise DimensionError("environment shape does not match the agent networks")
        actor_opt = AdamState.for_params(self.actor, config.learning_rate)
        critic_opt = AdamState.for_params(self.critic, config.learning_rate)
        self._reset_episode(env)

        while timesteps < config.total_timesteps:
            if env.done:
                self._reset_episode(env)
            horizon = min(config.rollout_steps, config.total_timesteps - timesteps)
            trajectory = collect_rollout(env, self.actor, self.critic, horizon, self.rng)
            returns = compute_returns(trajectory, config.gamma)
            advantages = compute_advantages(returns, trajectory.values)
            if config.normalize_advantages:
                advantages = normalize_advantages(advantages)
            losses, actor_grads, critic_grads = loss_gradients(
                self.actor, self.critic, trajectory.states, trajectory.actions, returns, advantages, config)
            last_good = checkpoints[-1] if checkpoints else None
            if not np.isfinite(losses.total_loss):
                raise TrainingAbortedError(f"non-finite loss at update {updates + 1}", last_good)
            if config.max_grad_norm is not None:
                clip_by_global_norm([actor_grads, critic_grads], config.max_grad_norm)
            try:
                adam_step(actor_opt, self.actor, actor_grads)
                adam_step(critic_opt, self.critic, critic_grads)
            except NumericalError as e:
                raise TrainingAbortedError(f"update {updates + 1}: {e}", last_good) from e

            timesteps += len(trajectory)
            updates += 1
            rows.append({
                "update_idx": updates,
                "timesteps": timesteps,
                "policy_loss": losses.policy_loss,
                "value_loss": losses.value_loss,
                "entropy": -losses.entropy_loss,
                "mean_reward": float(np.mean(trajectory.rewards)),
                "equity": trajectory.final_equity,
            })
            if updates % config.log_interval == 0:
                logger.info("update %d (%d/%d steps): policy=%.6g value=%.6g entropy=%.4f",
                            updates, timesteps, config.total_timesteps,
                            losses.policy_loss, losses.value_loss, -losses.entropy_loss)
            if checkpoint_dir and updates % config.checkpoint_interval == 0:
                path = os.path.join(checkpoint_dir, f"checkpoint_{updates:06d}.json")
                checkpoints.append(self.save(path, {**(header or {}), "update_idx": updates, "timesteps": timesteps}))

        if checkpoint_dir:
            final = os.path.join(checkpoint_dir, "model.json")
            checkpoints.append(self.save(final, {**(header or {}), "update_idx": updates, "timesteps": timesteps}))
        logger.info("Training finished after %d updates and %d steps", updates, timesteps)
        return TrainingResult(self.actor, self.critic, pd.DataFrame(rows, columns=TRAINING_LOG_COLUMNS),
                              updates, timesteps, checkpoints)

    def evaluate_greedy(self, env, start: Optional[int] = None) -> GreedyResult:
        return evaluate_greedy(env, self.actor, start)


def evaluate_greedy(env, actor: MlpParams, start: Optional[int] = None) -> GreedyResult:
    """
    Runs the argmax policy from `start` to the end of the environment's data.

    The curve holds the equity at every date from start to the episode end,
    so its first value is the initial capital.
    """
    start = env.valid_starts()[0] if start is None else start
    state = env.reset(start)
    equities = [env.equity()]
    actions: List[int] = []
    while not env.done:
        action = int(np.argmax(forward(actor, state.as_vector())))
        result = env.step(action)
        actions.append(action)
        equities.append(float(result.info["equity"]))
        state = result.next_state
    dates = env.features.calendar[start:env.end + 1]
    return GreedyResult(EquityCurve(dates, np.asarray(equities)), env.trade_log_frame(), actions)
