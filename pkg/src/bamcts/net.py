"""Minimal multilayer perceptrons with Gaussian output heads and Adam.

Everything is plain numpy with hand-written backpropagation. The network
graph is fixed (dense layers, tanh hidden activations, linear output),
which keeps training bitwise deterministic and makes every loss gradient
checkable against central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

LOG_TWO_PI = float(np.log(2.0 * np.pi))

DEFAULT_LOG_STD_MIN = -5.0
DEFAULT_LOG_STD_MAX = 2.0

CHECKPOINT_MAGIC = b"BAMC"
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """Dense network: tanh on hidden layers, identity on the output layer.

    ``weights[l]`` has shape ``(layer_sizes[l], layer_sizes[l + 1])`` and
    ``biases[l]`` shape ``(layer_sizes[l + 1],)``. Instances are treated as
    immutable values; training returns a new ``Mlp``.
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on a single input ``(in_dim,)`` or a batch
        ``(B, in_dim)``; the output shape mirrors the input shape."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.in_dim:
            raise ShapeError(
                f"input dimension {h.shape[1]} != expected {self.in_dim}"
            )
        last = len(self.weights) - 1
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if layer < last:
                h = np.tanh(h)
        return h[0] if single else h

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_params(self, params: list[np.ndarray]) -> "Mlp":
        weights = [params[2 * i] for i in range(len(self.weights))]
        biases = [params[2 * i + 1] for i in range(len(self.weights))]
        return Mlp(self.layer_sizes, weights, biases)

    def equals(self, other: "Mlp") -> bool:
        return self.layer_sizes == other.layer_sizes and all(
            np.array_equal(a, b)
            for a, b in zip(self.params(), other.params())
        )


def init_mlp(layer_sizes, seed: int) -> Mlp:
    """Deterministic initialization: W ~ N(0, 1/fan_in), biases zero."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ConfigError(f"need at least two layer sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases)


@dataclass
class GaussianHead:
    """Diagonal Gaussian parameters; ``log_std`` is already clamped."""

    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def forward_gaussian(
    mlp: Mlp,
    x: np.ndarray,
    log_std_min: float = DEFAULT_LOG_STD_MIN,
    log_std_max: float = DEFAULT_LOG_STD_MAX,
) -> GaussianHead:
    """Split the network output into (mean | log_std) halves, clamping
    log_std into the configured bounds before any exponentiation."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input")
    if mlp.out_dim % 2 != 0:
        raise ShapeError(
            f"gaussian head needs an even output size, got {mlp.out_dim}"
        )
    out = mlp.forward(x)
    half = mlp.out_dim // 2
    mean = out[..., :half]
    log_std = np.clip(out[..., half:], log_std_min, log_std_max)
    return GaussianHead(mean, log_std)


# ---------------------------------------------------------------------------
# forward/backward with caches


def _forward_cached(mlp: Mlp, x_batch: np.ndarray) -> list[np.ndarray]:
    """Returns the list of layer activations, acts[0] being the input."""
    acts = [x_batch]
    h = x_batch
    last = len(mlp.weights) - 1
    for layer, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if layer < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _backward(mlp: Mlp, acts: list[np.ndarray], grad_out: np.ndarray):
    """Backpropagate dL/d(output) through the cached forward pass.

    Returns per-layer weight/bias gradients (summed over the batch) and the
    gradient with respect to the input batch.
    """
    n_layers = len(mlp.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    g = grad_out
    for layer in range(n_layers - 1, -1, -1):
        if layer < n_layers - 1:
            g = g * (1.0 - acts[layer + 1] ** 2)
        grad_w[layer] = acts[layer].T @ g
        grad_b[layer] = g.sum(axis=0)
        g = g @ mlp.weights[layer].T
    return grad_w, grad_b, g


def value_and_input_grad(mlp: Mlp, x: np.ndarray):
    """Scalar-output helper: returns (value, d value / d input) for a single
    input vector. Used by the actor-critic objective to differentiate a
    critic with respect to its action slice."""
    acts = _forward_cached(mlp, np.asarray(x, dtype=np.float64)[None, :])
    if mlp.out_dim != 1:
        raise ShapeError("value_and_input_grad expects a scalar-output net")
    _, _, gx = _backward(mlp, acts, np.ones((1, 1)))
    return float(acts[-1][0, 0]), gx[0]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    """Adam state. The moment arrays are updated in place by ``train_step``;
    the state object is owned by a single trainer."""

    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_opt(
    mlp: Mlp,
    learning_rate: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptState:
    params = mlp.params()
    return OptState(
        step=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def _adam_step(opt: OptState, params: list[np.ndarray], grads: list[np.ndarray]):
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = opt.first_moment[i]
        v = opt.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        new_params.append(p - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon))
    return new_params


# ---------------------------------------------------------------------------
# loss descriptors

def _clamp_mask(raw: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return ((raw > lo) & (raw < hi)).astype(np.float64)


class GaussianNll:
    """Negative log-likelihood of a diagonal Gaussian head at a target
    vector; the raw log_std half is clamped exactly as in forward_gaussian
    (zero gradient outside the bounds)."""

    def __init__(
        self,
        log_std_min: float = DEFAULT_LOG_STD_MIN,
        log_std_max: float = DEFAULT_LOG_STD_MAX,
    ):
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    def value_and_grad(self, output: np.ndarray, target) -> tuple[float, np.ndarray]:
        y = np.asarray(target, dtype=np.float64)
        half = output.size // 2
        mean = output[:half]
        raw = output[half:]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        inv_var = np.exp(-2.0 * log_std)
        diff = mean - y
        nll = 0.5 * float(np.sum(LOG_TWO_PI + 2.0 * log_std + diff * diff * inv_var))
        g_mean = diff * inv_var
        g_raw = (1.0 - diff * diff * inv_var) * _clamp_mask(
            raw, self.log_std_min, self.log_std_max
        )
        return nll, np.concatenate([g_mean, g_raw])


class SquaredError:
    """Sum of squared errors against a target vector (per item)."""

    def value_and_grad(self, output: np.ndarray, target) -> tuple[float, np.ndarray]:
        y = np.asarray(target, dtype=np.float64)
        diff = output - y
        return float(diff @ diff), 2.0 * diff


def _stable_log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2*(log 2 - |u| - log1p(exp(-2|u|)))
    au = np.abs(u)
    return 2.0 * (np.log(2.0) - au - np.log1p(np.exp(-2.0 * au)))


class CrossEntropyToWeights:
    """-sum_j w_j log pi(a_j | s) for a squashed-Gaussian policy head.

    Each batch target is ``(actions, weights)`` where ``actions`` is an
    ``(m, action_dim)`` array of support points inside the action box and
    ``weights`` an ``(m,)`` probability vector. The support points are
    constants, so only the Gaussian-in-u part of the density carries
    gradient; the squash correction enters the loss value only.
    """

    def __init__(
        self,
        action_low: np.ndarray,
        action_high: np.ndarray,
        log_std_min: float = DEFAULT_LOG_STD_MIN,
        log_std_max: float = DEFAULT_LOG_STD_MAX,
    ):
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    def value_and_grad(self, output: np.ndarray, target) -> tuple[float, np.ndarray]:
        actions, weights = target
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64)
        if actions.shape[0] == 0:
            raise DataError("empty action support in cross-entropy target")
        half = output.size // 2
        mean = output[:half]
        raw = output[half:]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        mask = _clamp_mask(raw, self.log_std_min, self.log_std_max)
        inv_var = np.exp(-2.0 * log_std)

        center = 0.5 * (self.action_high + self.action_low)
        scale = 0.5 * (self.action_high - self.action_low)
        t = np.clip((actions - center) / scale, -1.0 + 1e-12, 1.0 - 1e-12)
        u = np.arctanh(t)  # (m, d) pre-squash points, constant w.r.t. params

        diff = u - mean  # (m, d)
        # -log pi = sum_d [0.5 log 2pi + log_std + 0.5 diff^2/var]
        #           + sum_d log(scale_d (1 - tanh(u_d)^2))
        per_point = 0.5 * np.sum(
            LOG_TWO_PI + 2.0 * log_std + diff * diff * inv_var, axis=1
        ) + np.sum(np.log(scale) + _stable_log_one_minus_tanh_sq(u), axis=1)
        loss = float(weights @ per_point)
        g_mean = -(weights[:, None] * diff * inv_var).sum(axis=0)
        g_raw = (weights[:, None] * (1.0 - diff * diff * inv_var)).sum(axis=0) * mask
        return loss, np.concatenate([g_mean, g_raw])


class ActorCriticObjective:
    """alpha * log pi(a|s) - min_i Q_i(s, a) with a reparameterized from the
    policy head: a = center + scale * tanh(mean + std * xi).

    Batch targets are ``(state, xi)`` pairs; the critics and temperature are
    held fixed, so the gradient flows through the policy head only (partly
    via the critics' input gradients).
    """

    def __init__(
        self,
        critic1: Mlp,
        critic2: Mlp,
        alpha: float,
        action_low: np.ndarray,
        action_high: np.ndarray,
        log_std_min: float = DEFAULT_LOG_STD_MIN,
        log_std_max: float = DEFAULT_LOG_STD_MAX,
    ):
        self.critic1 = critic1
        self.critic2 = critic2
        self.alpha = float(alpha)
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    def value_and_grad(self, output: np.ndarray, target) -> tuple[float, np.ndarray]:
        state, xi = target
        state = np.asarray(state, dtype=np.float64)
        xi = np.asarray(xi, dtype=np.float64)
        half = output.size // 2
        mean = output[:half]
        raw = output[half:]
        log_std = np.clip(raw, self.log_std_min, self.log_std_max)
        mask = _clamp_mask(raw, self.log_std_min, self.log_std_max)
        std = np.exp(log_std)

        center = 0.5 * (self.action_high + self.action_low)
        scale = 0.5 * (self.action_high - self.action_low)
        u = mean + std * xi
        tanh_u = np.tanh(u)
        action = center + scale * tanh_u

        log_prob = float(
            np.sum(-0.5 * LOG_TWO_PI - log_std - 0.5 * xi * xi)
            - np.sum(np.log(scale) + _stable_log_one_minus_tanh_sq(u))
        )

        x = np.concatenate([state, action])
        q1, g1 = value_and_input_grad(self.critic1, x)
        q2, g2 = value_and_input_grad(self.critic2, x)
        if q1 <= q2:
            q_min, q_grad_x = q1, g1
        else:
            q_min, q_grad_x = q2, g2
        q_grad_a = q_grad_x[state.size:]

        value = self.alpha * log_prob - q_min

        # d log_prob / du = 2 tanh(u) (squash correction); the Gaussian part
        # is constant in u because xi is held fixed.
        dlogp_du = 2.0 * tanh_u
        da_du = scale * (1.0 - tanh_u**2)
        du_dmean = 1.0
        du_draw = std * xi  # via d std / d log_std = std, masked below

        g_mean = self.alpha * dlogp_du * du_dmean - q_grad_a * da_du * du_dmean
        g_raw = (
            self.alpha * (-1.0 + dlogp_du * du_draw) - q_grad_a * da_du * du_draw
        ) * mask
        return value, np.concatenate([g_mean, g_raw])


# ---------------------------------------------------------------------------
# training


def train_step(mlp: Mlp, opt: OptState, batch, loss) -> tuple[Mlp, OptState, float]:
    """One Adam step on the mean batch gradient.

    ``batch`` is a sequence of ``(input, target)`` pairs and ``loss`` a
    descriptor with ``value_and_grad(output, target)``. Returns the updated
    network, the (in-place updated) optimizer state, and the pre-step batch
    loss.
    """
    if len(batch) == 0:
        raise ConfigError("empty training batch")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    acts = _forward_cached(mlp, inputs)
    outputs = acts[-1]

    total = 0.0
    grad_out = np.empty_like(outputs)
    for i, (_, target) in enumerate(batch):
        value, grad = loss.value_and_grad(outputs[i], target)
        total += value
        grad_out[i] = grad
    batch_loss = total / len(batch)
    if not np.isfinite(batch_loss):
        raise NumericError(f"non-finite training loss: {batch_loss!r}")

    grad_w, grad_b, _ = _backward(mlp, acts, grad_out / len(batch))
    grads = []
    for gw, gb in zip(grad_w, grad_b):
        grads.append(gw)
        grads.append(gb)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in train_step")

    new_params = _adam_step(opt, mlp.params(), grads)
    return mlp.with_params(new_params), opt, float(batch_loss)


def batch_gradient(mlp: Mlp, batch, loss) -> list[np.ndarray]:
    """Mean batch gradient without taking a step (finite-difference tests)."""
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    acts = _forward_cached(mlp, inputs)
    grad_out = np.empty_like(acts[-1])
    for i, (_, target) in enumerate(batch):
        _, grad = loss.value_and_grad(acts[-1][i], target)
        grad_out[i] = grad
    grad_w, grad_b, _ = _backward(mlp, acts, grad_out / len(batch))
    grads = []
    for gw, gb in zip(grad_w, grad_b):
        grads.append(gw)
        grads.append(gb)
    return grads


def batch_loss_value(mlp: Mlp, batch, loss) -> float:
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    outputs = mlp.forward(inputs)
    return float(
        sum(loss.value_and_grad(outputs[i], t)[0] for i, (_, t) in enumerate(batch))
        / len(batch)
    )


# ---------------------------------------------------------------------------
# checkpoint format: header (magic, version, role, layer sizes, clamp
# bounds) + little-endian float64 parameters in layer order.


def save_mlp(
    path,
    mlp: Mlp,
    role: str = "",
    log_std_bounds: tuple[float, float] = (DEFAULT_LOG_STD_MIN, DEFAULT_LOG_STD_MAX),
) -> None:
    role_bytes = role.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(role_bytes)))
        fh.write(role_bytes)
        fh.write(struct.pack("<I", len(mlp.layer_sizes)))
        fh.write(struct.pack(f"<{len(mlp.layer_sizes)}I", *mlp.layer_sizes))
        fh.write(struct.pack("<2d", *log_std_bounds))
        for p in mlp.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_mlp(path):
    """Returns (mlp, role, log_std_bounds)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (role_len,) = struct.unpack("<I", fh.read(4))
        role = fh.read(role_len).decode("utf-8")
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes))
        bounds = struct.unpack("<2d", fh.read(16))
        weights = []
        biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8")
            weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
            b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
            biases.append(b.astype(np.float64))
        return Mlp(tuple(sizes), weights, biases), role, bounds
