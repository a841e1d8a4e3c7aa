"""Deep ensembles of Gaussian dynamics/reward models and belief machinery.

Each member maps a state-action pair to a diagonal Gaussian over the
concatenated target ``(reward, next_state)``. A belief is a probability
vector over members, updated multiplicatively by member likelihoods; the
pessimistic reward subtracts the belief-weighted mixture standard deviation
(epistemic spread plus aleatoric noise) from each predicted reward.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError
from .net import (
    GaussianNll,
    Mlp,
    init_mlp,
    init_opt,
    load_mlp,
    save_mlp,
    train_step,
)

LOG_TWO_PI = float(np.log(2.0 * np.pi))
STD_FLOOR = 1e-8
DEGENERATE_LOG_MARGINAL = float(np.log(1e-300))

DATASET_MAGIC = b"BADS"
DATASET_VERSION = 1


class BeliefDegeneracyWarning(RuntimeWarning):
    """All member likelihoods underflowed; the belief was left unchanged."""


def _check_simplex(b: np.ndarray, k: int | None = None) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ContractError(f"belief must be a vector, got shape {b.shape}")
    if k is not None and b.size != k:
        raise ContractError(f"belief has {b.size} entries, expected {k}")
    if np.any(b < -1e-12) or abs(float(b.sum()) - 1.0) > 1e-6:
        raise ContractError(f"belief is not a probability simplex: {b}")
    return b


def uniform_prior(k: int) -> np.ndarray:
    """Uniform belief over k members."""
    if k <= 0:
        raise ConfigError(f"ensemble size must be positive, got {k}")
    return np.full(k, 1.0 / k)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class TransitionDataset:
    """Offline transitions plus the normalization statistics used for model
    training (inputs are ``(s, a)``, targets ``(r, s')``)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)
    target_mean: np.ndarray = field(default=None)
    target_std: np.ndarray = field(default=None)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.atleast_2d(
            np.asarray(self.next_states, dtype=np.float64)
        )
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        n = self.states.shape[0]
        if not (
            self.actions.shape[0] == n
            and self.rewards.shape[0] == n
            and self.next_states.shape[0] == n
            and self.dones.shape[0] == n
        ):
            raise DataError("transition arrays have mismatched record counts")
        if self.next_states.shape[1] != self.states.shape[1]:
            raise DataError("state and next_state dimensions differ")
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite values in transition data")
        if self.input_mean is None:
            inputs = np.concatenate([self.states, self.actions], axis=1)
            targets = np.concatenate(
                [self.rewards[:, None], self.next_states], axis=1
            )
            self.input_mean = inputs.mean(axis=0)
            self.input_std = np.maximum(inputs.std(axis=0), STD_FLOOR)
            self.target_mean = targets.mean(axis=0)
            self.target_std = np.maximum(targets.std(axis=0), STD_FLOOR)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def episode_starts(self) -> np.ndarray:
        """Indices of records that begin an episode (first record, or the
        record after a done flag)."""
        starts = np.zeros(len(self), dtype=bool)
        starts[0] = True
        starts[1:] = self.dones[:-1]
        return np.flatnonzero(starts)

    # binary format: magic, version, dims, count, then packed per-record
    # little-endian float64 (s.., a.., r, s'.., done).

    def save(self, path) -> None:
        n = len(self)
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(
                struct.pack(
                    "<IIIQ", DATASET_VERSION, self.state_dim, self.action_dim, n
                )
            )
            block = np.concatenate(
                [
                    self.states,
                    self.actions,
                    self.rewards[:, None],
                    self.next_states,
                    self.dones.astype(np.float64)[:, None],
                ],
                axis=1,
            )
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        with open(path, "rb") as fh:
            if fh.read(4) != DATASET_MAGIC:
                raise DataError(f"{path}: not a transition dataset")
            version, ds, da, n = struct.unpack("<IIIQ", fh.read(20))
            if version != DATASET_VERSION:
                raise DataError(f"{path}: unsupported dataset version {version}")
            width = ds + da + 1 + ds + 1
            block = np.frombuffer(fh.read(8 * width * n), dtype="<f8")
        block = block.reshape(n, width).astype(np.float64)
        return cls(
            states=block[:, :ds],
            actions=block[:, ds : ds + da],
            rewards=block[:, ds + da],
            next_states=block[:, ds + da + 1 : ds + da + 1 + ds],
            dones=block[:, -1] > 0.5,
        )

    def save_csv(self, path) -> None:
        ds, da = self.state_dim, self.action_dim
        header = (
            [f"s{i}" for i in range(ds)]
            + [f"a{i}" for i in range(da)]
            + ["r"]
            + [f"sp{i}" for i in range(ds)]
            + ["done"]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(len(self)):
                row = (
                    list(self.states[i])
                    + list(self.actions[i])
                    + [self.rewards[i]]
                    + list(self.next_states[i])
                    + [int(self.dones[i])]
                )
                writer.writerow(row)

    @classmethod
    def load_csv(cls, path) -> "TransitionDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ds = sum(1 for h in header if h.startswith("s") and not h.startswith("sp"))
            da = sum(1 for h in header if h.startswith("a"))
            rows = [list(map(float, row)) for row in reader if row]
        if not rows:
            raise DataError(f"{path}: no transition rows")
        block = np.asarray(rows)
        return cls(
            states=block[:, :ds],
            actions=block[:, ds : ds + da],
            rewards=block[:, ds + da],
            next_states=block[:, ds + da + 1 : ds + da + 1 + ds],
            dones=block[:, -1] > 0.5,
        )


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class EnsembleTrainConfig:
    epochs: int = 60
    batch_size: int = 256
    holdout_fraction: float = 0.1
    hidden_sizes: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    penalty_includes_reward: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


class Ensemble:
    """K Gaussian world models sharing normalization statistics.

    Immutable after construction; all prediction paths are safe to call
    concurrently. Member heads live in z-normalized space internally and
    every public method reports de-normalized quantities.
    """

    def __init__(
        self,
        members: list[Mlp],
        input_mean: np.ndarray,
        input_std: np.ndarray,
        target_mean: np.ndarray,
        target_std: np.ndarray,
        log_std_min: float = -5.0,
        log_std_max: float = 2.0,
        penalty_includes_reward: bool = True,
        holdout_nll: np.ndarray | None = None,
    ):
        if not members:
            raise ConfigError("ensemble needs at least one member")
        sizes = members[0].layer_sizes
        if any(m.layer_sizes != sizes for m in members):
            raise ConfigError("ensemble members must share an architecture")
        self.members = members
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        self.target_mean = np.asarray(target_mean, dtype=np.float64)
        self.target_std = np.asarray(target_std, dtype=np.float64)
        self.log_std_min = float(log_std_min)
        self.log_std_max = float(log_std_max)
        self.penalty_includes_reward = bool(penalty_includes_reward)
        self.holdout_nll = holdout_nll
        # stacked per-layer parameters for one-shot K-member prediction
        self._stacked_w = [
            np.stack([m.weights[l] for m in members])
            for l in range(len(members[0].weights))
        ]
        self._stacked_b = [
            np.stack([m.biases[l] for m in members])
            for l in range(len(members[0].biases))
        ]

    @property
    def K(self) -> int:
        return len(self.members)

    @property
    def state_dim(self) -> int:
        return self.target_mean.size - 1

    @property
    def action_dim(self) -> int:
        return self.input_mean.size - self.state_dim

    @property
    def target_dim(self) -> int:
        return self.target_mean.size

    def _predict_all(self, s: np.ndarray, a: np.ndarray):
        """De-normalized (means, stds) of every member at (s, a); both
        arrays have shape (K, 1 + state_dim)."""
        x = np.concatenate([np.asarray(s, np.float64), np.asarray(a, np.float64)])
        if x.size != self.input_mean.size:
            raise ShapeError(
                f"input dim {x.size} != expected {self.input_mean.size}"
            )
        h = (x - self.input_mean) / self.input_std
        last = len(self._stacked_w) - 1
        h = np.broadcast_to(h, (self.K, h.size))
        for layer, (w, b) in enumerate(zip(self._stacked_w, self._stacked_b)):
            h = np.matmul(h[:, None, :], w)[:, 0, :] + b
            if layer < last:
                h = np.tanh(h)
        half = h.shape[1] // 2
        mean_n = h[:, :half]
        log_std_n = np.clip(h[:, half:], self.log_std_min, self.log_std_max)
        means = self.target_mean + self.target_std * mean_n
        stds = self.target_std * np.exp(log_std_n)
        return means, stds

    def member_head(self, i: int, s, a):
        means, stds = self._predict_all(s, a)
        return means[i], stds[i]

    def log_likelihoods(self, s, a, r, s_next) -> np.ndarray:
        """Per-member log density of the observed target (r, s')."""
        y = np.concatenate([[float(r)], np.asarray(s_next, np.float64)])
        if y.size != self.target_dim:
            raise ShapeError(f"target dim {y.size} != expected {self.target_dim}")
        means, stds = self._predict_all(s, a)
        z = (y - means) / stds
        return np.sum(-0.5 * LOG_TWO_PI - np.log(stds) - 0.5 * z * z, axis=1)

    def update_belief(self, b, s, a, r, s_next) -> np.ndarray:
        b = _check_simplex(b, self.K)
        log_lik = self.log_likelihoods(s, a, r, s_next)
        return _posterior(b, log_lik)

    def sample_transition(self, b, s, a, rng):
        """Draw (r, s', b') from the belief-weighted mixture: pick a member
        by belief, sample its Gaussian head, then update the belief on the
        realized transition."""
        b = _check_simplex(b, self.K)
        means, stds = self._predict_all(s, a)
        i = int(np.searchsorted(np.cumsum(b), rng.random()))
        i = min(i, self.K - 1)
        y = means[i] + stds[i] * rng.standard_normal(self.target_dim)
        r = float(y[0])
        s_next = y[1:]
        z = (y - means) / stds
        log_lik = np.sum(-0.5 * LOG_TWO_PI - np.log(stds) - 0.5 * z * z, axis=1)
        return r, s_next, _posterior(b, log_lik)

    def mixture_std(self, b, s, a) -> float:
        """Belief-weighted mixture standard deviation: square root of the
        trace of the mixture covariance over the target dimensions."""
        b = _check_simplex(b, self.K)
        means, stds = self._predict_all(s, a)
        start = 0 if self.penalty_includes_reward else 1
        mu = means[:, start:]
        sigma = stds[:, start:]
        second = b @ (sigma**2 + mu**2)
        mixture_mean = b @ mu
        var = np.maximum(second - mixture_mean**2, 0.0)
        return float(np.sqrt(var.sum()))

    def penalized_reward(self, r: float, b, s, a, penalty_coeff: float) -> float:
        if penalty_coeff < 0:
            raise ConfigError(f"penalty coefficient must be >= 0, got {penalty_coeff}")
        if penalty_coeff == 0.0:
            _check_simplex(b, self.K)
            return float(r)
        return float(r) - penalty_coeff * self.mixture_std(b, s, a)


def _posterior(b: np.ndarray, log_lik: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_b = np.where(b > 0.0, np.log(np.maximum(b, 1e-320)), -np.inf)
    x = log_b + log_lik
    m = np.max(x)
    if not np.isfinite(m) or m + np.log(np.sum(np.exp(x - m))) < DEGENERATE_LOG_MARGINAL:
        warnings.warn(
            "all member likelihoods underflowed; keeping previous belief",
            BeliefDegeneracyWarning,
        )
        return b.copy()
    w = np.exp(x - m)
    return w / w.sum()


# ---------------------------------------------------------------------------
# spec operations as free functions


def member_likelihood(e: Ensemble, i: int, s, a, r, s_next) -> float:
    """Density factor of member i at the observed transition."""
    if not 0 <= i < e.K:
        raise ShapeError(f"member index {i} out of range for K={e.K}")
    return float(np.exp(e.log_likelihoods(s, a, r, s_next)[i]))


def update_belief(b, e: Ensemble, s, a, r, s_next) -> np.ndarray:
    return e.update_belief(b, s, a, r, s_next)


def sample_bamdp_transition(e, b, s, a, rng):
    return e.sample_transition(b, s, a, rng)


def penalized_reward(r, e, b, s, a, penalty_coeff) -> float:
    return e.penalized_reward(r, b, s, a, penalty_coeff)


def fit_ensemble(
    data: TransitionDataset,
    k: int,
    cfg: EnsembleTrainConfig | None = None,
    seed: int = 0,
) -> Ensemble:
    """Train K members on the offline dataset, each with a distinct weight
    initialization and an independently shuffled mini-batch sequence, and
    report per-member held-out Gaussian NLL."""
    cfg = cfg or EnsembleTrainConfig()
    if k < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {k}")
    if len(data) == 0:
        raise DataError("empty dataset")

    n = len(data)
    inputs = np.concatenate([data.states, data.actions], axis=1)
    targets = np.concatenate([data.rewards[:, None], data.next_states], axis=1)
    x = (inputs - data.input_mean) / data.input_std
    y = (targets - data.target_mean) / data.target_std

    root = np.random.SeedSequence(seed)
    split_seq, *member_seqs = root.spawn(k + 1)
    split_rng = np.random.default_rng(split_seq)
    perm = split_rng.permutation(n)
    n_holdout = int(round(n * cfg.holdout_fraction))
    holdout_idx = perm[:n_holdout]
    train_idx = perm[n_holdout:]
    if len(train_idx) < cfg.batch_size:
        raise ConfigError(
            f"{len(train_idx)} training records < batch size {cfg.batch_size}"
        )

    target_dim = y.shape[1]
    sizes = [x.shape[1], *cfg.hidden_sizes, 2 * target_dim]
    loss = GaussianNll(cfg.log_std_min, cfg.log_std_max)
    # de-normalized NLL differs from the normalized one by a constant
    denorm_shift = float(np.sum(np.log(data.target_std)))

    members = []
    holdout_nll = np.empty(k)
    for member_seq in member_seqs:
        init_seed, shuffle_seed = member_seq.generate_state(2)
        mlp = init_mlp(sizes, int(init_seed))
        opt = init_opt(mlp, learning_rate=cfg.learning_rate)
        member_rng = np.random.default_rng(int(shuffle_seed))
        for _ in range(cfg.epochs):
            order = member_rng.permutation(train_idx)
            for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = list(zip(x[idx], y[idx]))
                mlp, opt, _ = train_step(mlp, opt, batch, loss)
        members.append(mlp)
        eval_idx = holdout_idx if len(holdout_idx) > 0 else train_idx
        nll = np.mean(
            [loss.value_and_grad(mlp.forward(x[i]), y[i])[0] for i in eval_idx]
        )
        holdout_nll[len(members) - 1] = nll + denorm_shift

    return Ensemble(
        members,
        data.input_mean,
        data.input_std,
        data.target_mean,
        data.target_std,
        log_std_min=cfg.log_std_min,
        log_std_max=cfg.log_std_max,
        penalty_includes_reward=cfg.penalty_includes_reward,
        holdout_nll=holdout_nll,
    )


def save_ensemble(e: Ensemble, directory) -> None:
    """One checkpoint file per member plus a JSON manifest with the shared
    normalization statistics and the held-out NLL report."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    member_files = []
    for i, member in enumerate(e.members):
        name = f"member_{i:02d}.bamc"
        save_mlp(
            directory / name,
            member,
            role="ensemble-member",
            log_std_bounds=(e.log_std_min, e.log_std_max),
        )
        member_files.append(name)
    manifest = {
        "k": e.K,
        "members": member_files,
        "input_mean": e.input_mean.tolist(),
        "input_std": e.input_std.tolist(),
        "target_mean": e.target_mean.tolist(),
        "target_std": e.target_std.tolist(),
        "log_std_min": e.log_std_min,
        "log_std_max": e.log_std_max,
        "penalty_includes_reward": e.penalty_includes_reward,
        "holdout_nll": None if e.holdout_nll is None else list(map(float, e.holdout_nll)),
    }
    with open(directory / "ensemble.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    with open(directory / "ensemble.json") as fh:
        manifest = json.load(fh)
    members = [load_mlp(directory / name)[0] for name in manifest["members"]]
    holdout = manifest.get("holdout_nll")
    return Ensemble(
        members,
        np.asarray(manifest["input_mean"]),
        np.asarray(manifest["input_std"]),
        np.asarray(manifest["target_mean"]),
        np.asarray(manifest["target_std"]),
        log_std_min=manifest["log_std_min"],
        log_std_max=manifest["log_std_max"],
        penalty_includes_reward=manifest["penalty_includes_reward"],
        holdout_nll=None if holdout is None else np.asarray(holdout),
    )
