"""Deep Q-learning agent with a one-hidden-layer value network.

The network is trained online, one transition at a time, with the
semi-gradient Q-learning update and an epsilon-greedy behaviour policy
whose epsilon decays linearly once per episode. There is no replay buffer
and no target network.

The per-step numerics run in small numba kernels; everything else is plain
numpy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

LOG = "log"
RELU = "relu"
SILU = "silu"
ACTIVATIONS = (LOG, RELU, SILU)
_ACT_CODE = {LOG: 0, RELU: 1, SILU: 2}

UNIFORM01 = "uniform01"
XAVIER = "xavier"
HE = "he"
INITS = (UNIFORM01, XAVIER, HE)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, episode: Optional[int] = None):
        super().__init__(message)
        self.episode = episode


# --- activations --------------------------------------------------------------


def _sigmoid(x):
    # tanh form avoids overflow warnings for large |x|.
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def activation(kind: str, x):
    """Log (logistic sigmoid), ReLU or SiLU, elementwise."""
    x = np.asarray(x, dtype=float)
    if kind == LOG:
        return _sigmoid(x)
    if kind == RELU:
        return np.maximum(x, 0.0)
    if kind == SILU:
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, x):
    x = np.asarray(x, dtype=float)
    if kind == LOG:
        s = _sigmoid(x)
        return s * (1.0 - s)
    if kind == RELU:
        return (x > 0).astype(float)
    if kind == SILU:
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    raise ValueError(f"unknown activation {kind!r}")


def init_weights(scheme: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Weight matrix of shape ``(fan_out, fan_in)``."""
    fan_out, fan_in = shape
    if fan_out <= 0 or fan_in <= 0:
        raise ValueError(f"bad layer shape {shape}")
    if scheme == UNIFORM01:
        return rng.uniform(0.0, 1.0, size=shape)
    if scheme == XAVIER:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == HE:
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


# --- kernels ------------------------------------------------------------------


@numba.njit(cache=True)
def _act(kind, z):
    if kind == 0:
        s = 1.0 / (1.0 + math.exp(-z)) if z > -700.0 else 0.0
        return s, s * (1.0 - s)
    if kind == 1:
        if z > 0.0:
            return z, 1.0
        return 0.0, 0.0
    s = 1.0 / (1.0 + math.exp(-z)) if z > -700.0 else 0.0
    return z * s, s * (1.0 + z * (1.0 - s))


@numba.njit(cache=True)
def _forward(W1, b1, W2, b2, x, hk, ok, h, dh, q, dq):
    n_hidden, n_in = W1.shape
    for j in range(n_hidden):
        u = b1[j]
        for i in range(n_in):
            u += W1[j, i] * x[i]
        h[j], dh[j] = _act(hk, u)
    for a in range(W2.shape[0]):
        z = b2[a]
        for j in range(n_hidden):
            z += W2[a, j] * h[j]
        q[a], dq[a] = _act(ok, z)


@numba.njit(cache=True)
def _td_step(W1, b1, W2, b2, hk, ok, s, a, r, s_next, alpha, gamma, terminal, h, dh, q, dq):
    """In-place semi-gradient step; returns (td_error, target)."""
    _forward(W1, b1, W2, b2, s_next, hk, ok, h, dh, q, dq)
    target = r
    if not terminal:
        best = q[0]
        for k in range(1, q.shape[0]):
            if q[k] > best:
                best = q[k]
        target = r + gamma * best
    if not math.isfinite(target):
        return math.nan, target
    _forward(W1, b1, W2, b2, s, hk, ok, h, dh, q, dq)
    err = target - q[a]
    g = err * dq[a]
    n_hidden, n_in = W1.shape
    for j in range(n_hidden):
        gh = g * W2[a, j] * dh[j]
        W2[a, j] += alpha * g * h[j]
        for i in range(n_in):
            W1[j, i] += alpha * gh * s[i]
        b1[j] += alpha * gh
    b2[a] += alpha * g
    return err, target


@numba.njit(cache=True)
def _table_episode(W1, b1, W2, b2, hk, ok, mean, std, miss, r_hidden, r_detected,
                   eps, n_steps, alpha, gamma, term_on_detect, env_rng, policy_rng,
                   out_action, out_reward, out_detected, out_td, s, s_next, h, dh, q, dq):
    """One episode against a detection table, drawing random numbers in the
    same order as the generic loop in ``train``. Returns the index of the
    step whose target went non-finite, or -1."""
    n_in = mean.shape[0]
    n_out = W2.shape[0]
    for i in range(n_in):
        s[i] = mean[i] + std[i] * env_rng.standard_normal()
    for t in range(n_steps):
        if policy_rng.random() < eps:
            a = min(int(policy_rng.random() * n_out), n_out - 1)
        else:
            _forward(W1, b1, W2, b2, s, hk, ok, h, dh, q, dq)
            a = 0
            for k in range(1, n_out):
                if q[k] > q[a]:
                    a = k
        detected = env_rng.random() >= miss[a]
        r = r_detected[a] if detected else r_hidden[a]
        for i in range(n_in):
            s_next[i] = mean[i] + std[i] * env_rng.standard_normal()
        terminal = term_on_detect and detected
        err, target = _td_step(W1, b1, W2, b2, hk, ok, s, a, r, s_next, alpha, gamma, terminal,
                               h, dh, q, dq)
        out_action[t] = a
        out_reward[t] = r
        out_detected[t] = detected
        out_td[t] = err
        if not math.isfinite(target):
            return t
        if terminal:
            for i in range(n_in):
                s[i] = mean[i] + std[i] * env_rng.standard_normal()
        else:
            for i in range(n_in):
                s[i] = s_next[i]
    return -1


# --- network ------------------------------------------------------------------


@dataclass
class NetworkSpec:
    hidden: int = 25
    hidden_activation: str = LOG
    output_activation: str = SILU
    init: str = XAVIER

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden layer needs at least one unit")
        for kind in (self.hidden_activation, self.output_activation):
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")
        if self.init not in INITS:
            raise ValueError(f"unknown init scheme {self.init!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        if "activation" in d:
            hid, out = parse_activation_pair(d.pop("activation"))
            d.setdefault("hidden_activation", hid)
            d.setdefault("output_activation", out)
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


def parse_activation_pair(text: str) -> tuple[str, str]:
    """``"Log-SiLU"`` -> ``("log", "silu")`` (hidden, output)."""
    parts = [p.strip().lower() for p in text.replace(" ", "").split("-")]
    if len(parts) != 2 or any(p not in ACTIVATIONS for p in parts):
        raise ValueError(f"bad activation pair {text!r}")
    return parts[0], parts[1]


class QNetwork:
    """Fully connected ``n_in -> hidden -> n_out`` action-value network."""

    def __init__(self, W1, b1, W2, b2, hidden_activation=LOG, output_activation=SILU, init=XAVIER):
        self.W1 = np.ascontiguousarray(W1, dtype=float)
        self.b1 = np.ascontiguousarray(b1, dtype=float)
        self.W2 = np.ascontiguousarray(W2, dtype=float)
        self.b2 = np.ascontiguousarray(b2, dtype=float)
        if self.W1.shape[0] != self.b1.shape[0] or self.W2.shape != (self.b2.shape[0], self.W1.shape[0]):
            raise ValueError("inconsistent layer shapes")
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.init = init
        self._hk = _ACT_CODE[hidden_activation]
        self._ok = _ACT_CODE[output_activation]
        self._h = np.zeros(self.n_hidden)
        self._dh = np.zeros(self.n_hidden)
        self._q = np.zeros(self.n_out)
        self._dq = np.zeros(self.n_out)

    @classmethod
    def initialize(cls, n_in: int, n_out: int, spec: NetworkSpec, rng: np.random.Generator) -> "QNetwork":
        W1 = init_weights(spec.init, (spec.hidden, n_in), rng)
        W2 = init_weights(spec.init, (n_out, spec.hidden), rng)
        return cls(W1, np.zeros(spec.hidden), W2, np.zeros(n_out),
                   spec.hidden_activation, spec.output_activation, spec.init)

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def layer_sizes(self) -> tuple[int, int, int]:
        return (self.n_in, self.n_hidden, self.n_out)

    def parameters(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def copy(self) -> "QNetwork":
        return QNetwork(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
                        self.hidden_activation, self.output_activation, self.init)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(getattr(x, "values", x), dtype=float)
        if x.shape != (self.n_in,):
            raise ValueError(f"expected input of length {self.n_in}, got shape {x.shape}")
        return x

    def q_values(self, x) -> np.ndarray:
        x = self._check(x)
        _forward(self.W1, self.b1, self.W2, self.b2, x, self._hk, self._ok,
                 self._h, self._dh, self._q, self._dq)
        return self._q.copy()

    def q_values_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        hidden = activation(self.hidden_activation, X @ self.W1.T + self.b1)
        return activation(self.output_activation, hidden @ self.W2.T + self.b2)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "init": self.init,
            "parameters": self.flat_parameters().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QNetwork":
        n_in, n_hidden, n_out = d["layer_sizes"]
        flat = np.asarray(d["parameters"], dtype=float)
        sizes = [n_hidden * n_in, n_hidden, n_out * n_hidden, n_out]
        if flat.size != sum(sizes):
            raise ValueError("parameter vector length does not match layer sizes")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(n_hidden, n_in), parts[1], parts[2].reshape(n_out, n_hidden),
                   parts[3], d["hidden_activation"], d["output_activation"], d.get("init", XAVIER))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "QNetwork":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def forward(net: QNetwork, state) -> np.ndarray:
    """Q-value vector for one state (a Fingerprint or a 1-D array)."""
    return net.q_values(state)


def loss_gradient(net: QNetwork, s, a: int, target: float) -> list[np.ndarray]:
    """Gradient of ``0.5 * (target - Q(s, a))**2`` w.r.t. (W1, b1, W2, b2).

    ``target`` is held fixed; only the taken action's output contributes.
    """
    x = net._check(s)
    u = net.W1 @ x + net.b1
    h = activation(net.hidden_activation, u)
    z = net.W2 @ h + net.b2
    q = activation(net.output_activation, z)
    g = -(target - q[a]) * activation_derivative(net.output_activation, z[a])
    gW2 = np.zeros_like(net.W2)
    gb2 = np.zeros_like(net.b2)
    gW2[a] = g * h
    gb2[a] = g
    gu = g * net.W2[a] * activation_derivative(net.hidden_activation, u)
    return [np.outer(gu, x), gu, gW2, gb2]


def td_update(net: QNetwork, s, a: int, r: float, s_next, alpha: float, gamma: float,
              terminal: bool = False) -> float:
    """One Q-learning step on ``net`` in place; returns the pre-update TD error.

    The target is ``r + gamma * max_a' Q(s_next, a')`` (just ``r`` when
    ``terminal``) and the step is ``alpha`` times the negative gradient of
    half the squared TD error.
    """
    if not 0 <= a < net.n_out:
        raise ValueError(f"action index {a} out of range")
    x = net._check(s)
    x_next = net._check(s_next)
    err, target = _td_step(net.W1, net.b1, net.W2, net.b2, net._hk, net._ok, x, int(a), float(r),
                           x_next, float(alpha), float(gamma), bool(terminal),
                           net._h, net._dh, net._q, net._dq)
    if not math.isfinite(target):
        raise DivergenceError(f"non-finite TD target {target}")
    return err


def select_action(net: QNetwork, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action index; greedy ties go to the lowest index.

    Always draws one uniform for the explore/exploit decision so the random
    stream does not depend on epsilon reaching zero.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return min(int(rng.random() * net.n_out), net.n_out - 1)
    return int(np.argmax(net.q_values(state)))


def greedy_actions(net: QNetwork, X: np.ndarray) -> np.ndarray:
    return np.argmax(net.q_values_many(X), axis=1)


# --- training -------------------------------------------------------------------


@dataclass
class AgentConfig:
    epsilon: float = 0.2
    delta: float = 0.01
    epsilon_min: float = 0.0
    alpha: float = 0.005
    gamma: float = 0.30
    episodes: int = 5000
    seed: int = 0
    steps_per_episode: int = 100
    terminal_on_detection: bool = True

    def __post_init__(self):
        if not (0 <= self.epsilon <= 1 and 0 <= self.epsilon_min <= 1):
            raise ValueError("epsilon and epsilon_min must be in [0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.episodes < 0 or self.steps_per_episode < 1:
            raise ValueError("episodes must be >= 0 and steps_per_episode >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon_schedule(config: AgentConfig, episode: int) -> float:
    """Epsilon in force during ``episode`` (0-based)."""
    return max(config.epsilon_min, config.epsilon - episode * config.delta)


# Best configuration from the final-performance study; gamma 0.30 supersedes
# the 0.10 picked in the discount study.
BEST_AGENT = AgentConfig(epsilon=0.20, delta=0.01, alpha=0.005, gamma=0.30)
BEST_AGENT_GAMMA_010 = AgentConfig(epsilon=0.20, delta=0.01, alpha=0.005, gamma=0.10)
BEST_NETWORK = NetworkSpec(hidden=25, hidden_activation=LOG, output_activation=SILU, init=XAVIER)
# Fixed baseline of the one-at-a-time hyperparameter studies.
STUDY_AGENT = AgentConfig(epsilon=0.40, delta=0.01, alpha=0.005, gamma=0.10)
STUDY_NETWORK = NetworkSpec(hidden=40, hidden_activation=LOG, output_activation=SILU, init=HE)


@dataclass
class RunRecord:
    """Per-step training log plus greedy-action checkpoints."""

    episode: np.ndarray
    step: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    detected: np.ndarray
    epsilon: np.ndarray
    td_error: np.ndarray
    profile_ids: list[int] = field(default_factory=list)
    # (episodes completed, greedy action index on the probe states)
    checkpoints: list[tuple[int, int]] = field(default_factory=list)
    states: Optional[np.ndarray] = None
    afterstates: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, n_steps: int, n_features: int = 0, keep_states: bool = False) -> "RunRecord":
        return cls(
            episode=np.zeros(n_steps, dtype=np.int64),
            step=np.zeros(n_steps, dtype=np.int64),
            action=np.zeros(n_steps, dtype=np.int64),
            reward=np.zeros(n_steps),
            detected=np.zeros(n_steps, dtype=bool),
            epsilon=np.zeros(n_steps),
            td_error=np.zeros(n_steps),
            states=np.zeros((n_steps, n_features)) if keep_states else None,
            afterstates=np.zeros((n_steps, n_features)) if keep_states else None,
        )

    def __len__(self) -> int:
        return len(self.action)

    def write_csv(self, path: str | Path) -> None:
        ids = self.profile_ids or list(range(1, int(self.action.max(initial=0)) + 2))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "step", "action", "reward", "detected", "epsilon", "td_error"])
            for i in range(len(self)):
                w.writerow([
                    int(self.episode[i]), int(self.step[i]), ids[int(self.action[i])],
                    repr(float(self.reward[i])), int(self.detected[i]),
                    repr(float(self.epsilon[i])), repr(float(self.td_error[i])),
                ])

    def same_as(self, other: "RunRecord") -> bool:
        arrays = ("episode", "step", "action", "reward", "detected", "epsilon", "td_error")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays) and \
            self.checkpoints == other.checkpoints


def modal_greedy_action(net: QNetwork, probe: np.ndarray) -> int:
    counts = np.bincount(greedy_actions(net, probe), minlength=net.n_out)
    return int(np.argmax(counts))


def trial_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for one training run, all derived from ``seed``."""
    names = ("init", "env", "policy", "probe", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def train(env, config: AgentConfig, network_spec: NetworkSpec = BEST_NETWORK,
          checkpoint_every: int = 10, probe_size: int = 32,
          keep_states: bool = False, use_kernel: bool = True) -> tuple[QNetwork, RunRecord]:
    """Train a fresh network on ``env``.

    Each episode starts from a fresh normal fingerprint and runs
    ``config.steps_per_episode`` steps. With ``terminal_on_detection`` a
    detected step gets no bootstrap term and the next step restarts from a
    fresh normal fingerprint. Epsilon is lowered by ``delta`` after every
    episode. The whole run is a function of ``config.seed``.

    Environments exposing ``table_arrays()`` run each episode in a compiled
    kernel that consumes the random streams exactly like the generic loop.
    """
    streams = trial_streams(config.seed)
    n_actions = len(env.profiles)
    net = QNetwork.initialize(env.n_features, n_actions, network_spec, streams["init"])
    L = config.steps_per_episode
    record = RunRecord.empty(config.episodes * L, env.n_features, keep_states)
    record.profile_ids = [p.id for p in env.profiles]

    probe = np.vstack([env.sample_normal(streams["probe"]).values for _ in range(probe_size)])
    if checkpoint_every > 0:
        record.checkpoints.append((0, modal_greedy_action(net, probe)))

    env_rng, policy_rng = streams["env"], streams["policy"]
    alpha, gamma = config.alpha, config.gamma
    table = env.table_arrays() if (use_kernel and not keep_states and hasattr(env, "table_arrays")) else None
    if table is not None:
        s_buf, nxt_buf = np.empty(env.n_features), np.empty(env.n_features)
    i = 0
    for ep in range(config.episodes):
        eps = epsilon_schedule(config, ep)
        if table is not None:
            sl = slice(i, i + L)
            bad = _table_episode(net.W1, net.b1, net.W2, net.b2, net._hk, net._ok, *table,
                                 float(eps), L, float(alpha), float(gamma),
                                 bool(config.terminal_on_detection), env_rng, policy_rng,
                                 record.action[sl], record.reward[sl], record.detected[sl],
                                 record.td_error[sl], s_buf, nxt_buf,
                                 net._h, net._dh, net._q, net._dq)
            if bad >= 0:
                raise DivergenceError(f"diverged in episode {ep}: non-finite TD target", ep)
            record.episode[sl] = ep
            record.step[sl] = np.arange(L)
            record.epsilon[sl] = eps
            i += L
            if not net.is_finite():
                raise DivergenceError(f"non-finite parameters after episode {ep}", ep)
            if checkpoint_every > 0 and (ep + 1) % checkpoint_every == 0:
                record.checkpoints.append((ep + 1, modal_greedy_action(net, probe)))
            continue
        s = env.sample_normal(env_rng).values
        for t in range(L):
            a = select_action(net, s, eps, policy_rng)
            step = env.step(a, env_rng, episode_index=ep)
            nxt = step.afterstate.values
            terminal = config.terminal_on_detection and step.detected
            try:
                err = td_update(net, s, a, step.reward, nxt, alpha, gamma, terminal)
            except DivergenceError as exc:
                raise DivergenceError(f"diverged in episode {ep}: {exc}", ep) from None
            record.episode[i] = ep
            record.step[i] = t
            record.action[i] = a
            record.reward[i] = step.reward
            record.detected[i] = step.detected
            record.epsilon[i] = eps
            record.td_error[i] = err
            if keep_states:
                record.states[i] = s
                record.afterstates[i] = nxt
            i += 1
            s = env.sample_normal(env_rng).values if terminal else nxt
        if not net.is_finite():
            raise DivergenceError(f"non-finite parameters after episode {ep}", ep)
        if checkpoint_every > 0 and (ep + 1) % checkpoint_every == 0:
            record.checkpoints.append((ep + 1, modal_greedy_action(net, probe)))
    return net, record
