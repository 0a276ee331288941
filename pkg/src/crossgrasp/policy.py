"""History-conditioned policies over the 377-dim observation.

The main network tokenizes the last H observations, runs three pre-layernorm
transformer blocks with causal self-attention, and reads the newest token
into two-layer MLP action and value heads.  A learned state-independent
log-std vector completes a diagonal-Gaussian action distribution.  Recurrent
baselines (stacked GRU / LSTM cells) and the small distilled student MLP
share the same head layout.

All forwards run in the dtype of their parameters, so a float64 shadow copy
(:meth:`to_double` on each policy) supports tight gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .env import OBS_DIMS
from .morphology import ACTION_DIMS

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ATTENTION_MASK_FILL = -1e9


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformerPolicyConfig:
    history: int = 5
    layers: int = 3
    width: int = 128
    heads: int = 4
    feedforward: int = 256
    head_hidden: int = 128
    obs_dim: int = OBS_DIMS
    action_dim: int = ACTION_DIMS
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.history < 1:
            raise ValueError("history must be >= 1")


@dataclass(frozen=True)
class RecurrentPolicyConfig:
    kind: str = "gru"                    # "gru" | "lstm"
    layers: int = 3
    hidden: int = 128
    head_hidden: int = 128
    obs_dim: int = OBS_DIMS
    action_dim: int = ACTION_DIMS
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.kind not in ("gru", "lstm"):
            raise ValueError(f"unknown recurrent kind {self.kind!r}")


@dataclass(frozen=True)
class StudentConfig:
    obs_dim: int = 158
    hidden: tuple = (256, 256)
    action_dim: int = ACTION_DIMS


# ---------------------------------------------------------------------------
# history buffer
# ---------------------------------------------------------------------------

class HistoryBuffer:
    """Ring of the last H observations, zero-padded until it fills.

    ``snapshot`` returns rows ordered oldest to newest with the zeros first,
    so after k < H pushes exactly the last k rows are real.
    """

    def __init__(self, capacity: int, obs_dim: int = OBS_DIMS):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self._buf = np.zeros((capacity, obs_dim), dtype=np.float32)
        self._count = 0

    def reset(self) -> None:
        self._buf[...] = 0.0
        self._count = 0

    def push(self, obs: np.ndarray) -> None:
        self._buf[:-1] = self._buf[1:]
        self._buf[-1] = obs
        self._count = min(self._count + 1, self.capacity)

    @property
    def filled(self) -> int:
        return self._count

    def snapshot(self) -> np.ndarray:
        return self._buf.copy()


# ---------------------------------------------------------------------------
# diagonal Gaussian head
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian over actions; log_std is pre-clamp."""

    mean: np.ndarray
    log_std: np.ndarray


def clamp_log_std_np(log_std: np.ndarray) -> np.ndarray:
    """Float mirror of the tensor-side clamp (identical op order/bits)."""
    d = log_std.dtype.type
    return (np.maximum(log_std + d(-LOG_STD_MIN), 0)
            - np.maximum(log_std + d(-LOG_STD_MAX), 0) + d(LOG_STD_MIN))


def gaussian_log_prob(mean: Tensor, log_std: Tensor, actions: Tensor) -> Tensor:
    """Per-sample log density, reducing the trailing action axis.

    ``log_std`` is the raw learned vector; the clamp is applied here so the
    rollout-side numpy mirror stays bit-identical.
    """
    action_dim = log_std.shape[-1]
    ls = nn.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    z = ad.mul(ad.sub(actions, mean), ad.exp(ad.scalar_mul(ls, -1.0)))
    quad = ad.tensor_sum(ad.mul(z, z), axis=-1)
    const = nn._const_like(mean, 0.5 * action_dim * math.log(2.0 * math.pi))
    return ad.sub(ad.scalar_mul(quad, -0.5), ad.add(ad.tensor_sum(ls), const))


def gaussian_log_prob_np(mean: np.ndarray, log_std: np.ndarray,
                         actions: np.ndarray) -> np.ndarray:
    """Numpy mirror of :func:`gaussian_log_prob`, bit-identical in float32."""
    d = mean.dtype.type
    ls = clamp_log_std_np(log_std)
    z = (actions - mean) * np.exp(ls * d(-1.0))
    quad = (z * z).sum(axis=-1)
    const = d(0.5 * log_std.shape[-1] * math.log(2.0 * math.pi))
    return quad * d(-0.5) - (ls.sum() + const)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    """Entropy of the (state-independent) diagonal Gaussian, a scalar."""
    action_dim = log_std.shape[-1]
    ls = nn.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)
    const = nn._const_like(log_std, 0.5 * action_dim * (1.0 + math.log(2.0 * math.pi)))
    return ad.add(ad.tensor_sum(ls), const)


def sample_action(dist: ActionDistribution, rng: np.random.Generator,
                  deterministic: bool = False) -> tuple[np.ndarray, float]:
    """Draw an action and its log probability; deterministic mode returns the mean."""
    mean = dist.mean.astype(np.float32, copy=False)
    log_std = dist.log_std.astype(np.float32, copy=False)
    if deterministic:
        action = mean.copy()
    else:
        sigma = np.exp(clamp_log_std_np(log_std))
        action = mean + sigma * rng.standard_normal(mean.shape[-1]).astype(np.float32)
    logp = gaussian_log_prob_np(mean, log_std, action)
    return action, float(logp)


# ---------------------------------------------------------------------------
# transformer policy
# ---------------------------------------------------------------------------

class TransformerPolicy:
    """Causal transformer over H observation tokens."""

    kind = "transformer"

    def __init__(self, cfg: TransformerPolicyConfig, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        p = nn.ParameterSet()
        self.embed = nn.Linear(p, "embed", cfg.obs_dim, cfg.width, rng, dtype)
        p.add("pos", rng.normal(0.0, 0.02, size=(cfg.history, cfg.width)).astype(dtype))
        self.blocks = []
        for i in range(cfg.layers):
            blk = {
                "ln1": nn.LayerNorm(p, f"block{i}.ln1", cfg.width, dtype),
                "q": nn.Linear(p, f"block{i}.q", cfg.width, cfg.width, rng, dtype),
                "k": nn.Linear(p, f"block{i}.k", cfg.width, cfg.width, rng, dtype),
                "v": nn.Linear(p, f"block{i}.v", cfg.width, cfg.width, rng, dtype),
                "o": nn.Linear(p, f"block{i}.o", cfg.width, cfg.width, rng, dtype),
                "ln2": nn.LayerNorm(p, f"block{i}.ln2", cfg.width, dtype),
                "ff1": nn.Linear(p, f"block{i}.ff1", cfg.width, cfg.feedforward, rng, dtype),
                "ff2": nn.Linear(p, f"block{i}.ff2", cfg.feedforward, cfg.width, rng, dtype),
            }
            self.blocks.append(blk)
        self.ln_final = nn.LayerNorm(p, "ln_final", cfg.width, dtype)
        self.action_head = nn.Mlp(p, "action_head",
                                  [cfg.width, cfg.head_hidden, cfg.action_dim], rng, dtype)
        self.value_head = nn.Mlp(p, "value_head",
                                 [cfg.width, cfg.head_hidden, 1], rng, dtype)
        p.add("log_std", np.full(cfg.action_dim, cfg.log_std_init, dtype=dtype))
        self.params = p

        h = cfg.history
        self._mask = np.triu(np.full((h, h), ATTENTION_MASK_FILL), k=1).astype(dtype)
        sel = np.zeros((1, h), dtype=dtype)
        sel[0, -1] = 1.0
        self._select_last = sel

    # -- forward pieces ----------------------------------------------------

    def _as_input(self, obs_hist) -> Tensor:
        if isinstance(obs_hist, Tensor):
            return obs_hist
        arr = np.asarray(obs_hist, dtype=self.dtype)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (self.cfg.history, self.cfg.obs_dim):
            raise ValueError(
                f"history batch must be (B, {self.cfg.history}, {self.cfg.obs_dim}),"
                f" got {arr.shape}")
        return Tensor(arr, dtype=self.dtype)

    def _attention(self, blk, x: Tensor) -> Tensor:
        cfg = self.cfg
        dh = cfg.width // cfg.heads
        scale = 1.0 / math.sqrt(dh)
        mask = Tensor(self._mask, dtype=self.dtype)
        q, k, v = blk["q"](x), blk["k"](x), blk["v"](x)
        heads = []
        for h in range(cfg.heads):
            lo, hi = h * dh, (h + 1) * dh
            qs = ad.slice_lastdim(q, lo, hi)
            ks = ad.slice_lastdim(k, lo, hi)
            vs = ad.slice_lastdim(v, lo, hi)
            scores = ad.scalar_mul(ad.matmul(qs, ad.transpose_2d(ks)), scale)
            weights = ad.softmax_lastdim(ad.add(scores, mask))
            heads.append(ad.matmul(weights, vs))
        return blk["o"](ad.concat_lastdim(heads))

    def token_states(self, obs_hist) -> Tensor:
        """Contextualized token embeddings, (B, H, width)."""
        x = self._as_input(obs_hist)
        pos = ad.embedding_lookup(self.params["pos"], np.arange(self.cfg.history))
        x = ad.add(self.embed(x), pos)
        for blk in self.blocks:
            x = ad.add(x, self._attention(blk, blk["ln1"](x)))
            ff = blk["ff2"](ad.tanh(blk["ff1"](blk["ln2"](x))))
            x = ad.add(x, ff)
        return self.ln_final(x)

    def forward(self, obs_hist) -> tuple[Tensor, Tensor]:
        """(action mean (B, 1, A), value (B, 1, 1)) from the newest token."""
        tokens = self.token_states(obs_hist)
        last = ad.matmul(Tensor(self._select_last, dtype=self.dtype), tokens)
        return self.action_head(last), self.value_head(last)

    @property
    def log_std(self) -> Tensor:
        return self.params["log_std"]

    # -- numpy conveniences --------------------------------------------------

    def act(self, obs_hist) -> tuple[np.ndarray, np.ndarray]:
        """Batched rollout forward (no tape): means (B, A) and values (B,)."""
        mean, value = self.forward(obs_hist)
        return mean.data.reshape(-1, self.cfg.action_dim), value.data.reshape(-1)

    def distribution(self, obs_hist) -> ActionDistribution:
        mean, _ = self.act(obs_hist)
        return ActionDistribution(mean=mean[0], log_std=self.params["log_std"].data.copy())

    def to_double(self) -> "TransformerPolicy":
        twin = TransformerPolicy(self.cfg, seed=0, dtype=np.float64)
        twin.params.load_state_dict(self.params.state_dict())
        return twin


# ---------------------------------------------------------------------------
# recurrent baselines
# ---------------------------------------------------------------------------

class RecurrentPolicy:
    """Stacked GRU or LSTM cells with the same heads as the transformer.

    Hidden state is a numpy array carried by the caller: (layers, B, hidden)
    for GRU, (layers, B, 2 * hidden) for LSTM with cell state in the second
    half.  Gradients flow through one step (stored-state updates), not
    through time.
    """

    def __init__(self, cfg: RecurrentPolicyConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.kind = cfg.kind
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        p = nn.ParameterSet()
        gate_mult = 3 if cfg.kind == "gru" else 4
        self.cells = []
        for i in range(cfg.layers):
            n_in = cfg.obs_dim if i == 0 else cfg.hidden
            cell = {
                "wx": nn.Linear(p, f"cell{i}.x", n_in, gate_mult * cfg.hidden, rng, dtype),
                "wh": nn.Linear(p, f"cell{i}.h", cfg.hidden, gate_mult * cfg.hidden, rng, dtype),
            }
            self.cells.append(cell)
        self.action_head = nn.Mlp(p, "action_head",
                                  [cfg.hidden, cfg.head_hidden, cfg.action_dim], rng, dtype)
        self.value_head = nn.Mlp(p, "value_head", [cfg.hidden, cfg.head_hidden, 1], rng, dtype)
        p.add("log_std", np.full(cfg.action_dim, cfg.log_std_init, dtype=dtype))
        self.params = p

    def init_hidden(self, batch: int) -> np.ndarray:
        width = self.cfg.hidden * (1 if self.kind == "gru" else 2)
        return np.zeros((self.cfg.layers, batch, width), dtype=self.dtype)

    def _gru_cell(self, cell, x: Tensor, h: Tensor) -> Tensor:
        nh = self.cfg.hidden
        xg = cell["wx"](x)
        hg = cell["wh"](h)
        r = ad.sigmoid(ad.add(ad.slice_lastdim(xg, 0, nh), ad.slice_lastdim(hg, 0, nh)))
        z = ad.sigmoid(ad.add(ad.slice_lastdim(xg, nh, 2 * nh),
                              ad.slice_lastdim(hg, nh, 2 * nh)))
        n = ad.tanh(ad.add(ad.slice_lastdim(xg, 2 * nh, 3 * nh),
                           ad.mul(r, ad.slice_lastdim(hg, 2 * nh, 3 * nh))))
        one = nn._const_like(x, 1.0)
        return ad.add(ad.mul(ad.sub(one, z), n), ad.mul(z, h))

    def _lstm_cell(self, cell, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        nh = self.cfg.hidden
        g = ad.add(cell["wx"](x), cell["wh"](h))
        i = ad.sigmoid(ad.slice_lastdim(g, 0, nh))
        f = ad.sigmoid(ad.slice_lastdim(g, nh, 2 * nh))
        gg = ad.tanh(ad.slice_lastdim(g, 2 * nh, 3 * nh))
        o = ad.sigmoid(ad.slice_lastdim(g, 3 * nh, 4 * nh))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, gg))
        return ad.mul(o, ad.tanh(c_new)), c_new

    def forward(self, obs, hidden: np.ndarray):
        """(mean (B, A), value (B, 1), new hidden) for one step."""
        if isinstance(obs, Tensor):
            x = obs
        else:
            arr = np.asarray(obs, dtype=self.dtype)
            if arr.ndim == 1:
                arr = arr[None]
            x = Tensor(arr, dtype=self.dtype)
        nh = self.cfg.hidden
        new_hidden = np.empty_like(hidden)
        for i, cell in enumerate(self.cells):
            if self.kind == "gru":
                h = Tensor(hidden[i], dtype=self.dtype)
                x = self._gru_cell(cell, x, h)
                new_hidden[i] = x.data
            else:
                h = Tensor(hidden[i][:, :nh], dtype=self.dtype)
                c = Tensor(hidden[i][:, nh:], dtype=self.dtype)
                x, c_new = self._lstm_cell(cell, x, h, c)
                new_hidden[i][:, :nh] = x.data
                new_hidden[i][:, nh:] = c_new.data
        return self.action_head(x), self.value_head(x), new_hidden

    @property
    def log_std(self) -> Tensor:
        return self.params["log_std"]

    def act(self, obs, hidden):
        mean, value, new_hidden = self.forward(obs, hidden)
        return (mean.data.reshape(-1, self.cfg.action_dim),
                value.data.reshape(-1), new_hidden)

    def to_double(self) -> "RecurrentPolicy":
        twin = RecurrentPolicy(self.cfg, seed=0, dtype=np.float64)
        twin.params.load_state_dict(self.params.state_dict())
        return twin


# ---------------------------------------------------------------------------
# distilled student
# ---------------------------------------------------------------------------

class StudentPolicy:
    """Memoryless MLP regressor onto teacher action means."""

    kind = "student"

    def __init__(self, cfg: StudentConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
        p = nn.ParameterSet()
        sizes = [cfg.obs_dim, *cfg.hidden, cfg.action_dim]
        self.net = nn.Mlp(p, "student", sizes, rng, dtype)
        self.params = p

    def forward(self, obs) -> Tensor:
        if isinstance(obs, Tensor):
            return self.net(obs)
        arr = np.asarray(obs, dtype=self.dtype)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.shape[-1] != self.cfg.obs_dim:
            raise ValueError(f"student expects obs width {self.cfg.obs_dim}, got {arr.shape}")
        return self.net(Tensor(arr, dtype=self.dtype))

    def act(self, obs) -> np.ndarray:
        return self.forward(obs).data.reshape(-1, self.cfg.action_dim)

    def to_double(self) -> "StudentPolicy":
        twin = StudentPolicy(self.cfg, seed=0, dtype=np.float64)
        twin.params.load_state_dict(self.params.state_dict())
        return twin
