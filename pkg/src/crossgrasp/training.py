"""PPO core: advantage estimation, clipped-surrogate updates, Adam, and the
gradient all-reduce protocol used by the multi-worker harness.

The update path is built for replica consistency: gradients are flattened in
the canonical parameter order, averaged in ascending worker-id order, clipped
once, and applied through per-worker Adam instances that stay bit-identical
because they see identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .policy import gaussian_entropy, gaussian_log_prob


class TrainingError(RuntimeError):
    """Aborted update (non-finite loss, worker failure)."""


class ProtocolError(TrainingError):
    """Gradient-exchange misuse: mismatched update index or missing worker."""


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    steps_per_update: int = 32

    def validate(self) -> None:
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")


# ---------------------------------------------------------------------------
# generalized advantage estimation
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap_value, gamma: float,
                lam: float):
    """Exponentially weighted TD-residual advantages for one trajectory.

    ``dones[t]`` marks that step t ended an episode, cutting the bootstrap
    and the recursion.  Returns (advantages, returns) with
    returns = advantages + values.  Math runs in float64, output is float32.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(f"series lengths differ: {rewards.shape}, {values.shape}, {dones.shape}")
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0] if rewards.ndim > 1 else np.float64(0.0))
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        adv[t] = running
        next_value = values[t]
    returns = adv + values
    return adv.astype(np.float32), returns.astype(np.float32)


# ---------------------------------------------------------------------------
# rollout storage
# ---------------------------------------------------------------------------

class RolloutBuffer:
    """Fixed-horizon per-shard trajectory store, (T, N) layout.

    For the transformer the model input is the (H, obs) history snapshot at
    each step; for recurrent baselines it is the observation plus the hidden
    state that preceded the step.
    """

    def __init__(self, steps: int, n_envs: int, action_dim: int,
                 hist_shape: tuple | None = None,
                 obs_dim: int | None = None, hidden_shape: tuple | None = None):
        self.steps = steps
        self.n_envs = n_envs
        if hist_shape is not None:
            self.hist = np.zeros((steps, n_envs, *hist_shape), dtype=np.float32)
            self.obs = None
            self.hidden = None
        else:
            self.hist = None
            self.obs = np.zeros((steps, n_envs, obs_dim), dtype=np.float32)
            self.hidden = np.zeros((steps, n_envs, *hidden_shape), dtype=np.float32)
        self.actions = np.zeros((steps, n_envs, action_dim), dtype=np.float32)
        self.log_probs = np.zeros((steps, n_envs), dtype=np.float32)
        self.rewards = np.zeros((steps, n_envs), dtype=np.float32)
        self.values = np.zeros((steps, n_envs), dtype=np.float32)
        self.dones = np.zeros((steps, n_envs), dtype=np.float32)
        self.adr_levels = np.zeros((steps, n_envs), dtype=np.int8)
        self.advantages = None
        self.returns = None

    @property
    def size(self) -> int:
        return self.steps * self.n_envs

    def seal(self, bootstrap_values: np.ndarray, gamma: float, lam: float) -> None:
        """Compute per-env advantages/returns; normalization happens later,
        once global batch statistics are known."""
        adv, ret = compute_gae(self.rewards, self.values, self.dones,
                               bootstrap_values, gamma, lam)
        self.advantages = adv
        self.returns = ret

    def advantage_moments(self) -> tuple[float, float, int]:
        if self.advantages is None:
            raise TrainingError("buffer not sealed")
        a = self.advantages.astype(np.float64)
        return float(a.sum()), float((a * a).sum()), a.size

    def normalize_advantages(self, mean: float, std: float) -> None:
        self.advantages = ((self.advantages - np.float32(mean))
                           / np.float32(std)).astype(np.float32)

    def gather(self, flat_idx: np.ndarray) -> dict:
        """Minibatch rows by flat (t * n_envs + env) index."""
        t_idx, e_idx = np.divmod(flat_idx, self.n_envs)
        batch = {
            "actions": self.actions[t_idx, e_idx],
            "log_probs": self.log_probs[t_idx, e_idx],
            "advantages": self.advantages[t_idx, e_idx],
            "returns": self.returns[t_idx, e_idx],
        }
        if self.hist is not None:
            batch["hist"] = self.hist[t_idx, e_idx]
        else:
            batch["obs"] = self.obs[t_idx, e_idx]
            batch["hidden"] = self.hidden[t_idx, e_idx]
        return batch


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def ppo_minibatch_loss(policy, batch: dict, cfg: PpoConfig):
    """Clipped-surrogate PPO loss over one gathered minibatch.

    Returns (loss Tensor, stats dict).  Shapes follow the policy: the
    transformer emits (n, 1, A) means, recurrent baselines (n, A); the
    stored per-sample scalars are reshaped to match.
    """
    actions = batch["actions"]
    if "hist" in batch:
        mean, value = policy.forward(batch["hist"])
        act_t = Tensor(actions[:, None, :])
        per_sample = (actions.shape[0], 1)
    else:
        hidden = np.ascontiguousarray(np.swapaxes(batch["hidden"], 0, 1))
        mean, value, _ = policy.forward(batch["obs"], hidden)
        act_t = Tensor(actions)
        per_sample = (actions.shape[0],)

    logp = gaussian_log_prob(mean, policy.log_std, act_t)
    logp_old = batch["log_probs"].reshape(per_sample)
    adv = batch["advantages"].reshape(per_sample)
    ratio = ad.exp(ad.sub(logp, Tensor(logp_old)))
    clipped = nn.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
    adv_t = Tensor(adv)
    surrogate = nn.minimum(ad.mul(ratio, adv_t), ad.mul(clipped, adv_t))
    policy_loss = ad.scalar_mul(ad.tensor_mean(surrogate), -1.0)

    ret = batch["returns"].reshape(value.shape)
    verr = ad.sub(value, Tensor(ret))
    value_loss = ad.tensor_mean(ad.mul(verr, verr))

    entropy = gaussian_entropy(policy.log_std)
    loss = ad.add(policy_loss,
                  ad.sub(ad.scalar_mul(value_loss, cfg.value_coef),
                         ad.scalar_mul(entropy, cfg.entropy_coef)))

    logp_new = logp.data.reshape(-1)
    ratio_np = ratio.data.reshape(-1)
    stats = {
        "policy_loss": policy_loss.data.item(),
        "value_loss": value_loss.data.item(),
        "entropy": entropy.data.item(),
        "kl": float(np.mean(logp_old.reshape(-1) - logp_new)),
        "clip_frac": float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_epsilon)),
    }
    return loss, stats


def minibatch_gradient(policy, batch: dict, cfg: PpoConfig):
    """Flat gradient of the PPO loss for one minibatch, plus stats."""
    with ad.Tape() as tape:
        loss, stats = ppo_minibatch_loss(policy, batch, cfg)
    if not np.isfinite(loss.data.item()):
        raise TrainingError(
            f"non-finite loss {loss.data.item()} "
            f"(policy={stats['policy_loss']:.4g}, value={stats['value_loss']:.4g})")
    grads = ad.backward(loss, tape)
    return policy.params.flatten_grads(grads), stats


def clip_gradient(flat: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(flat))
    if norm > max_norm:
        return flat * np.float32(max_norm / norm)
    return flat


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Flat-vector Adam; float32 state so replicas stay bit-identical."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.float32(lr)
        self.beta1 = np.float32(beta1)
        self.beta2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.m = np.zeros(size, dtype=np.float32)
        self.v = np.zeros(size, dtype=np.float32)
        self.t = 0

    def step(self, params: nn.ParameterSet, flat_grad: np.ndarray) -> None:
        if flat_grad.shape != self.m.shape:
            raise TrainingError(f"gradient length {flat_grad.shape} != {self.m.shape}")
        self.t += 1
        g = flat_grad.astype(np.float32, copy=False)
        one = np.float32(1.0)
        self.m = self.beta1 * self.m + (one - self.beta1) * g
        self.v = self.beta2 * self.v + (one - self.beta2) * (g * g)
        mhat = self.m / (one - self.beta1 ** np.float32(self.t))
        vhat = self.v / (one - self.beta2 ** np.float32(self.t))
        update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        params.load_flat(params.flatten() - update)


# ---------------------------------------------------------------------------
# gradient all-reduce
# ---------------------------------------------------------------------------

@dataclass
class GradientPacket:
    """One worker's flat gradient for one synchronized update."""

    data: np.ndarray
    worker_id: int
    update_index: int


def allreduce_mean(packets: list[GradientPacket]) -> np.ndarray:
    """Elementwise mean over workers, summed in ascending worker-id order so
    every replica sees bit-identical results."""
    if not packets:
        raise ProtocolError("allreduce with no packets")
    ids = [p.worker_id for p in packets]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate worker ids {ids}")
    index = packets[0].update_index
    length = packets[0].data.shape
    for p in packets:
        if p.update_index != index:
            raise ProtocolError(
                f"update index mismatch: worker {p.worker_id} at {p.update_index}, expected {index}")
        if p.data.shape != length:
            raise ProtocolError(
                f"gradient length mismatch: worker {p.worker_id} has {p.data.shape}, expected {length}")
    ordered = sorted(packets, key=lambda p: p.worker_id)
    acc = ordered[0].data.astype(np.float32, copy=True)
    for p in ordered[1:]:
        acc += p.data
    return acc / np.float32(len(ordered))


class GradientExchange:
    """In-process barrier-style exchange; a socket transport could replace it
    behind the same submit/reduce surface."""

    def __init__(self, world_size: int):
        self.world_size = world_size
        self._packets: list[GradientPacket] = []

    def submit(self, packet: GradientPacket) -> None:
        self._packets.append(packet)

    def reduce(self) -> np.ndarray:
        if len(self._packets) != self.world_size:
            raise ProtocolError(
                f"barrier incomplete: {len(self._packets)}/{self.world_size} workers reported")
        try:
            return allreduce_mean(self._packets)
        finally:
            self._packets = []


# ---------------------------------------------------------------------------
# single-process update (reference path and unit-test surface)
# ---------------------------------------------------------------------------

def ppo_update(policy, optimizer: Adam, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Full epochs x minibatches pass over one sealed buffer.

    Advantages are normalized in place over the whole batch first.  Returns
    averaged stats (kl, clip_frac, losses).
    """
    cfg.validate()
    if buffer.advantages is None:
        raise TrainingError("buffer must be sealed before ppo_update")
    s, ss, n = buffer.advantage_moments()
    mean = s / n
    var = max(ss / n - mean * mean, 0.0)
    buffer.normalize_advantages(mean, np.sqrt(var) + 1e-8)

    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(buffer.size)
        for chunk in np.array_split(perm, cfg.minibatches):
            grad, stats = minibatch_gradient(policy, buffer.gather(chunk), cfg)
            grad = clip_gradient(grad, cfg.max_grad_norm)
            optimizer.step(policy.params, grad)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}
