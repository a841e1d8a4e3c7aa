"""Search-based policy iteration: actors roll out in the learned world
model (searching at a configurable fraction of states), a learner consumes
the replay buffer, and parameter snapshots synchronize on a fixed cadence.

Three variants share the rollout path: ``ba-mbrl`` (no search, actor-critic
learner), ``ba-mcts`` (search rollouts, actor-critic learner) and
``ba-mcts-sl`` (search rollouts, supervised distillation learner, with an
optional actor-critic warm-up). Sequential mode is fully deterministic
under a fixed seed; concurrent mode runs actor workers in threads around
the locked buffer.
"""

from __future__ import annotations

import hashlib
import io
import logging
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ensemble import Ensemble, EnsembleTrainConfig, fit_ensemble, uniform_prior
from .envs import Env, evaluate_policy
from .errors import ConfigError, DataError
from .policy import (
    CriticPair,
    GaussianPolicy,
    SacConfig,
    SacOptimizers,
    SacValueAdapter,
    ValueNet,
    actor_critic_update,
    compute_z,
    make_critics,
    make_policy,
    make_sac_optimizers,
    make_value,
    sl_policy_update,
    value_update,
)
from .net import init_opt
from .search import InfoState, SearchConfig, search

logger = logging.getLogger("bamcts")

VARIANTS = ("ba-mbrl", "ba-mcts", "ba-mcts-sl")

METRICS_HEADER = (
    "epoch,mean_return,std_return,policy_loss,value_loss,"
    "critic_loss,search_calls,mean_penalty"
)


@dataclass
class Step:
    state: np.ndarray
    action: np.ndarray
    reward_raw: float
    reward_penalized: float
    search_value: float
    support_actions: np.ndarray  # (m, action_dim); a point mass when no search ran
    support_weights: np.ndarray
    searched: bool
    next_state: np.ndarray


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards_penalized(self):
        return [s.reward_penalized for s in self.steps]

    @property
    def search_values(self):
        return [s.search_value for s in self.steps]

    def digest(self) -> str:
        """Content hash of every recorded field, for byte-identity checks."""
        buf = io.BytesIO()
        for s in self.steps:
            for arr in (s.state, s.action, s.support_actions, s.support_weights, s.next_state):
                buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            buf.write(
                np.array(
                    [s.reward_raw, s.reward_penalized, s.search_value, float(s.searched)],
                    dtype="<f8",
                ).tobytes()
            )
        return hashlib.sha256(buf.getvalue()).hexdigest()


class ReplayBuffer:
    """Bounded FIFO of trajectories keyed by epoch; linearizable append and
    sample (one lock), uniform sampling over records."""

    def __init__(self, window_epochs: int):
        if window_epochs < 1:
            raise ConfigError("buffer window must be >= 1 epoch")
        self.window_epochs = window_epochs
        self._items: deque[tuple[int, Trajectory]] = deque()
        self._lock = threading.Lock()

    def add(self, epoch: int, traj: Trajectory) -> None:
        with self._lock:
            self._items.append((epoch, traj))

    def end_epoch(self, epoch: int) -> None:
        """Drop trajectories older than the retention window (epochs in
        (epoch - window, epoch] are kept)."""
        cutoff = epoch - self.window_epochs
        with self._lock:
            while self._items and self._items[0][0] <= cutoff:
                self._items.popleft()

    def epochs_present(self) -> set[int]:
        with self._lock:
            return {e for e, _ in self._items}

    def num_records(self) -> int:
        with self._lock:
            return sum(len(t) for _, t in self._items)

    def sample_records(self, rng: np.random.Generator, count: int):
        """Uniform (trajectory, index) pairs over all stored records."""
        with self._lock:
            trajs = [t for _, t in self._items]
        lengths = np.array([len(t) for t in trajs])
        total = int(lengths.sum())
        if total == 0:
            raise DataError("replay buffer is empty")
        flat = rng.integers(0, total, size=count)
        bounds = np.cumsum(lengths)
        out = []
        for f in flat:
            ti = int(np.searchsorted(bounds, f, side="right"))
            start = 0 if ti == 0 else int(bounds[ti - 1])
            out.append((trajs[ti], int(f - start)))
        return out


class ParamBus:
    """Versioned immutable snapshots published by the learner and read by
    actor workers."""

    def __init__(self, policy, value):
        self._lock = threading.Lock()
        self._version = 0
        self._policy = policy
        self._value = value

    def publish(self, policy, value) -> int:
        with self._lock:
            self._version += 1
            self._policy = policy
            self._value = value
            return self._version

    def snapshot(self):
        with self._lock:
            return self._policy, self._value, self._version


@dataclass
class TrainConfig:
    variant: str = "ba-mcts"
    search_fraction: float = 0.1       # rho: share of rollout states searched
    rollout_horizon: int = 5           # H
    epochs: int = 30                   # N
    states_per_epoch: int = 512
    learner_steps: int = 200
    snapshot_interval: int = 50        # E_l
    batch_size: int = 256
    n_step: int = 5
    gamma: float = 0.99
    penalty_coeff: float = 1.0         # lambda
    buffer_epochs: int = 5             # N_SL
    warmup_epochs: int = 0             # N_P
    search: SearchConfig = field(default_factory=SearchConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    seed: int = 0
    eval_episodes: int = 10
    eval_mode: str = "mean"
    start_from: str = "any"            # or "initial"
    workers: int = 1
    sequential: bool = True
    hidden_sizes: tuple[int, ...] = (64, 64)
    learning_rate: float = 3e-4
    model_k: int = 5
    model_training: EnsembleTrainConfig = field(default_factory=EnsembleTrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 <= self.search_fraction <= 1.0:
            raise ConfigError("search fraction must lie in [0, 1]")
        for name in (
            "rollout_horizon", "epochs", "states_per_epoch", "learner_steps",
            "snapshot_interval", "batch_size", "n_step", "buffer_epochs", "workers",
        ):
            if getattr(self, name) < 1 and not (name == "learner_steps" or name == "states_per_epoch"):
                raise ConfigError(f"{name} must be >= 1")
        if self.learner_steps < 0 or self.states_per_epoch < 0:
            raise ConfigError("counts must be non-negative")
        if self.penalty_coeff < 0:
            raise ConfigError("penalty coefficient must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup epochs must be >= 0")
        if self.start_from not in ("any", "initial"):
            raise ConfigError("start_from must be 'any' or 'initial'")
        if self.eval_mode not in ("mean", "sample"):
            raise ConfigError("eval_mode must be 'mean' or 'sample'")

    def normalized(self) -> "TrainConfig":
        """Apply variant rules: ba-mbrl never searches."""
        cfg = self
        if cfg.variant == "ba-mbrl" and cfg.search_fraction != 0.0:
            logger.info(
                "variant ba-mbrl forces search fraction 0 (was %s)",
                cfg.search_fraction,
            )
            cfg = replace(cfg, search_fraction=0.0)
        if cfg.search.penalty_coeff != cfg.penalty_coeff:
            cfg = replace(cfg, search=replace(cfg.search, penalty_coeff=cfg.penalty_coeff))
        if cfg.search.gamma != cfg.gamma:
            cfg = replace(cfg, search=replace(cfg.search, gamma=cfg.gamma))
        return cfg


def actor_rollout(
    cfg: TrainConfig,
    policy: GaussianPolicy,
    value,
    model: Ensemble,
    dataset,
    rng: np.random.Generator,
    search_fraction: float | None = None,
) -> Trajectory:
    """One model rollout from a dataset state. At each step a coin decides
    between a full tree search (action from the visit distribution) and a
    direct policy draw; the non-search branch backfills the stored search
    value with V(s) so every index can anchor an n-step target."""
    rho = cfg.search_fraction if search_fraction is None else search_fraction
    if cfg.start_from == "initial":
        starts = dataset.episode_starts()
        idx = int(starts[rng.integers(len(starts))])
    else:
        idx = int(rng.integers(len(dataset)))
    state = dataset.states[idx].copy()
    belief = uniform_prior(model.K)

    traj = Trajectory()
    for _ in range(cfg.rollout_horizon):
        coin = rng.random()
        if coin < rho:
            result = search(InfoState(state, belief), cfg.search, policy, value, model, rng)
            action = np.asarray(result.sample(rng), dtype=np.float64)
            v_ret = result.value
            support = np.stack([np.asarray(a, np.float64) for a in result.actions])
            weights = result.probabilities.copy()
            searched = True
        else:
            action, _ = policy.sample(state, rng)
            v_ret = float(value(state))
            support = action[None, :].copy()
            weights = np.array([1.0])
            searched = False
        r, s_next, belief_next = model.sample_transition(belief, state, action, rng)
        r_tilde = model.penalized_reward(r, belief, state, action, cfg.penalty_coeff)
        traj.steps.append(
            Step(
                state=state,
                action=action,
                reward_raw=r,
                reward_penalized=r_tilde,
                search_value=v_ret,
                support_actions=support,
                support_weights=weights,
                searched=searched,
                next_state=s_next,
            )
        )
        state = s_next
        belief = belief_next
    return traj


@dataclass
class LearnerState:
    policy: GaussianPolicy
    value: ValueNet
    critics: CriticPair
    policy_opt: object
    value_opt: object
    sac_opts: SacOptimizers


def make_learner_state(cfg: TrainConfig, state_dim: int, action_low, action_high) -> LearnerState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    pseed, vseed, cseed = (int(s.generate_state(1)[0]) for s in seeds)
    policy = make_policy(state_dim, action_low, action_high, cfg.hidden_sizes, pseed)
    value = make_value(state_dim, cfg.hidden_sizes, vseed)
    critics = make_critics(state_dim, np.asarray(action_low).size, cfg.hidden_sizes, cseed)
    return LearnerState(
        policy=policy,
        value=value,
        critics=critics,
        policy_opt=init_opt(policy.net, learning_rate=cfg.learning_rate),
        value_opt=init_opt(value.net, learning_rate=cfg.learning_rate),
        sac_opts=make_sac_optimizers(policy, critics, lr=cfg.learning_rate,
                                     init_temperature=cfg.sac.init_temperature),
    )


def learner_epoch(
    cfg: TrainConfig,
    buffer: ReplayBuffer,
    state: LearnerState,
    rng: np.random.Generator,
    mode: str,
    bus: ParamBus | None = None,
) -> tuple[LearnerState, dict]:
    """Run the configured number of learner steps in the given mode ("sl"
    distills search results; "sac" regresses twin critics on penalized
    transitions), publishing snapshots on the configured cadence."""
    if mode not in ("sl", "sac"):
        raise ConfigError(f"unknown learner mode {mode!r}")
    if cfg.learner_steps == 0:
        return state, {}
    if buffer.num_records() == 0:
        raise DataError("replay buffer is empty at learner epoch start")

    policy_losses, value_losses, critic_losses = [], [], []
    for step_i in range(cfg.learner_steps):
        records = buffer.sample_records(rng, cfg.batch_size)
        if mode == "sl":
            policy_batch = [
                (t.steps[i].state, t.steps[i].support_actions, t.steps[i].support_weights)
                for t, i in records
            ]
            new_policy, ploss = sl_policy_update(state.policy, policy_batch, state.policy_opt)
            value_batch = [
                (t.steps[i].state, compute_z(t, i, cfg.n_step, cfg.gamma))
                for t, i in records
            ]
            new_value, vloss = value_update(state.value, value_batch, state.value_opt)
            state = replace(state, policy=new_policy, value=new_value)
            policy_losses.append(ploss)
            value_losses.append(vloss)
        else:
            batch = [
                (
                    t.steps[i].state,
                    t.steps[i].action,
                    t.steps[i].reward_penalized,
                    t.steps[i].next_state,
                    False,
                )
                for t, i in records
            ]
            new_policy, new_critics, diag = actor_critic_update(
                state.policy, state.critics, batch, cfg.sac, state.sac_opts, rng
            )
            state = replace(state, policy=new_policy, critics=new_critics)
            policy_losses.append(diag["policy_loss"])
            critic_losses.append(diag["critic_loss"])
        if bus is not None and (step_i + 1) % cfg.snapshot_interval == 0:
            bus.publish(state.policy, state.value)

    if bus is not None:
        bus.publish(state.policy, state.value)
    metrics = {
        "policy_loss": float(np.mean(policy_losses)) if policy_losses else float("nan"),
        "value_loss": float(np.mean(value_losses)) if value_losses else float("nan"),
        "critic_loss": float(np.mean(critic_losses)) if critic_losses else float("nan"),
    }
    return state, metrics


@dataclass
class MetricsTable:
    rows: list[dict] = field(default_factory=list)
    final_state: "LearnerState | None" = None

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for row in self.rows:
            lines.append(
                "{epoch},{mean_return:.6g},{std_return:.6g},{policy_loss:.6g},"
                "{value_loss:.6g},{critic_loss:.6g},{search_calls},{mean_penalty:.6g}".format(**row)
            )
        return "\n".join(lines) + "\n"

    def final_mean_return(self, window: int = 10) -> float:
        tail = self.rows[-window:]
        return float(np.mean([r["mean_return"] for r in tail]))


def run_training(
    cfg: TrainConfig,
    dataset,
    env: Env,
    ensemble: Ensemble | None = None,
    rollout_digests: list | None = None,
) -> MetricsTable:
    """Orchestrate N epochs of rollouts -> buffer -> learner -> evaluation.

    Deterministic in sequential mode under fixed seeds. Pass a list as
    ``rollout_digests`` to collect per-epoch content hashes of the rollout
    data (used by the variant-coherence checks).
    """
    cfg = cfg.normalized()
    root_seq = np.random.SeedSequence(cfg.seed)
    fit_seq, *epoch_seqs = root_seq.spawn(cfg.epochs + 1)
    if ensemble is None:
        ensemble = fit_ensemble(
            dataset, cfg.model_k, cfg.model_training, int(fit_seq.generate_state(1)[0])
        )

    state = make_learner_state(cfg, env.state_dim, env.action_low, env.action_high)
    buffer = ReplayBuffer(cfg.buffer_epochs)
    bus = ParamBus(state.policy, state.value)
    table = MetricsTable()

    for epoch, epoch_seq in enumerate(epoch_seqs, start=1):
        warm = cfg.variant == "ba-mcts-sl" and epoch <= cfg.warmup_epochs
        mode = "sl" if (cfg.variant == "ba-mcts-sl" and not warm) else "sac"
        rho = 0.0 if warm else cfg.search_fraction

        roll_seq, learn_seq, eval_seq = epoch_seq.spawn(3)
        policy_snap, value_snap, _ = bus.snapshot()
        if cfg.variant == "ba-mcts-sl" and not warm:
            value_fn = value_snap
        else:
            value_fn = SacValueAdapter(policy_snap, state.critics)

        trajectories = []
        if cfg.sequential or cfg.workers <= 1:
            rng = np.random.default_rng(roll_seq)
            for _ in range(cfg.states_per_epoch):
                trajectories.append(
                    actor_rollout(cfg, policy_snap, value_fn, ensemble, dataset, rng, rho)
                )
        else:
            worker_seqs = roll_seq.spawn(cfg.workers)
            counts = [cfg.states_per_epoch // cfg.workers] * cfg.workers
            for i in range(cfg.states_per_epoch % cfg.workers):
                counts[i] += 1

            def work(args):
                seq, count = args
                rng_w = np.random.default_rng(seq)
                out = []
                for _ in range(count):
                    traj = actor_rollout(cfg, policy_snap, value_fn, ensemble, dataset, rng_w, rho)
                    buffer.add(epoch, traj)
                    out.append(traj)
                return out

            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                for chunk in pool.map(work, zip(worker_seqs, counts)):
                    trajectories.extend(chunk)

        if cfg.sequential or cfg.workers <= 1:
            for traj in trajectories:
                buffer.add(epoch, traj)
        buffer.end_epoch(epoch)

        if rollout_digests is not None:
            rollout_digests.append([t.digest() for t in trajectories])

        search_calls = sum(
            1 for t in trajectories for s in t.steps if s.searched
        )
        penalties = [
            s.reward_raw - s.reward_penalized for t in trajectories for s in t.steps
        ]

        state, learn_metrics = learner_epoch(
            cfg, buffer, state, np.random.default_rng(learn_seq), mode, bus
        )

        mean_ret, std_ret = evaluate_policy(
            env,
            state.policy,
            cfg.eval_episodes,
            seed=int(eval_seq.generate_state(1)[0]),
            mode=cfg.eval_mode,
        )
        row = {
            "epoch": epoch,
            "mean_return": mean_ret,
            "std_return": std_ret,
            "policy_loss": learn_metrics.get("policy_loss", float("nan")),
            "value_loss": learn_metrics.get("value_loss", float("nan")),
            "critic_loss": learn_metrics.get("critic_loss", float("nan")),
            "search_calls": search_calls,
            "mean_penalty": float(np.mean(penalties)) if penalties else 0.0,
        }
        table.rows.append(row)
        logger.info(
            "epoch %d [%s/%s] return %.4f +- %.4f searches %d",
            epoch, cfg.variant, mode, mean_ret, std_ret, search_calls,
        )

    table.final_state = state
    return table
