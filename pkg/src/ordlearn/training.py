"""Episode loop, policy-gradient updates, best-ordering tracking, pretraining.

Two reward regimes drive the actor:

* ``episodic`` -- the whole-ordering BIC arrives once per rollout and every
  step's log-probability is weighted by the same (baselined) total.
* ``dense`` -- BIC decomposability yields a per-step local reward, and each
  step is weighted by its own discounted return minus the critic baseline.

Raw BIC magnitudes grow like O(m*d), far outside what a freshly initialized
value head can regress at fixed learning rates, so returns are affinely
standardized per update batch before advantages are formed (config
``return_transform="raw"`` restores the untransformed objective).  Logged
rewards and best-score tracking always use raw scores.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .autodiff import Tensor
from .datagen import Dataset
from .graphs import DirectedGraph, GraphError, Ordering, topological_order
from .policy import PolicyDims, PolicyParams, RolloutResult
from .scoring import LocalScoreKey, ScoreCache, ScoreConfig, cache_lookup_or_compute


@dataclass(frozen=True)
class TrainConfig:
    reward_mode: str = "dense"  # "dense" | "episodic"
    gamma: float = 0.98
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 32  # episodes per parameter update
    sample_batch: int = 64  # rows drawn per episode for the encoder
    max_episodes: int = 2000
    seed: int = 0
    entropy_bonus: float = 1e-3
    entropy_decay: float = 0.99  # applied every 100 episodes
    patience: int = 500  # episodes without best-score improvement; <=0 disables
    pretrained_checkpoint: str | None = None
    critic_wiring: str = "per-step"  # "per-step" | "s0"
    return_transform: str = "standardize"  # "standardize" | "raw"
    score_on_batch: bool = False  # ablation: reward from the episode's rows only
    policy_dims: PolicyDims | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.reward_mode not in ("dense", "episodic"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.critic_wiring not in ("per-step", "s0"):
            raise ValueError(f"unknown critic wiring {self.critic_wiring!r}")
        if self.return_transform not in ("standardize", "raw"):
            raise ValueError(f"unknown return transform {self.return_transform!r}")

    def dims_for(self, n_input: int) -> PolicyDims:
        if self.policy_dims is not None:
            return self.policy_dims
        return PolicyDims(n_input=n_input)


@dataclass
class EpisodeTrajectory:
    """Float-level record of one episode: states, actions, rewards, returns."""

    actions: list[int]
    rewards: np.ndarray
    returns: np.ndarray
    states: list[np.ndarray]
    episodic_total: float

    @property
    def ordering(self) -> Ordering:
        return Ordering(tuple(self.actions))


@dataclass
class RecordedEpisode:
    trajectory: EpisodeTrajectory
    rollout: RolloutResult


@dataclass
class TrainState:
    best_score: float
    best_ordering: Ordering
    episode: int = 0
    reward_log: list[tuple[int, float, float]] = field(default_factory=list)
    greedy_ordering: Ordering | None = None
    greedy_score: float | None = None
    nan_batches: int = 0
    stopped_reason: str = "max_episodes"


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    returns = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


def run_episode(
    data: Dataset,
    params: PolicyParams,
    cfg: TrainConfig,
    cache: ScoreCache | None,
    rng: np.random.Generator,
    score_cfg: ScoreConfig | None = None,
    reward_fn=None,
    record: bool = False,
) -> tuple[EpisodeTrajectory, RecordedEpisode | None]:
    """Sample rows, roll out one ordering, compute its per-step rewards.

    Rewards come from the full dataset (the encoder alone sees the row
    subsample) unless ``cfg.score_on_batch`` asks otherwise.  The episodic
    total is exactly the BIC of the rolled-out ordering.
    """
    score_cfg = score_cfg or ScoreConfig()
    n = min(cfg.sample_batch, data.m)
    rows = rng.choice(data.m, size=n, replace=False)
    batch = data.data[rows]
    if reward_fn is None:
        score_data = Dataset(batch, data.truth) if cfg.score_on_batch else data

        def reward_fn(variable: int, parents: tuple[int, ...]) -> float:
            key = LocalScoreKey(variable, parents)
            if cache is None:
                from .scoring import local_score

                return local_score(score_data, key, score_cfg)
            return cache_lookup_or_compute(cache, score_data, key, score_cfg)

    if record:
        result = pol.rollout(pol.encode(batch, params), params, mode="Sample", rng=rng)
    else:
        with ad.no_grad():
            result = pol.rollout(pol.encode(batch, params), params, mode="Sample", rng=rng)

    perm = result.ordering.perm
    rewards = np.array(
        [reward_fn(perm[t], tuple(sorted(perm[:t]))) for t in range(len(perm))]
    )
    trajectory = EpisodeTrajectory(
        actions=list(perm),
        rewards=rewards,
        returns=discounted_returns(rewards, cfg.gamma),
        states=[np.array(s.data[0]) for s in result.step_states],
        episodic_total=float(rewards.sum()),
    )
    return trajectory, (RecordedEpisode(trajectory, result) if record else None)


# ---------------------------------------------------------------------------
# Loss assembly.  These functions are the single source of truth for both the
# training path and the finite-difference verification harness.

def _transform_returns(values_list: list[np.ndarray], cfg: TrainConfig):
    if cfg.return_transform == "raw":
        return values_list
    pooled = np.concatenate([np.atleast_1d(v) for v in values_list])
    mu = pooled.mean()
    sd = pooled.std() + 1e-8
    return [(np.atleast_1d(v) - mu) / sd for v in values_list]


def critic_values_for_episode(
    recorded: RecordedEpisode, params: PolicyParams, cfg: TrainConfig
) -> list[Tensor]:
    """Value estimates for an episode's decision states (inputs detached)."""
    states = recorded.rollout.step_states
    if cfg.critic_wiring == "s0":
        v0 = pol.critic_value(states[0].detach(), params)
        return [v0] * len(states)
    return [pol.critic_value(s.detach(), params) for s in states]


def assemble_actor_loss(
    batch: list[RecordedEpisode],
    advantages: list[np.ndarray],
    entropy_coef: float,
) -> Tensor:
    b = len(batch)
    terms: list[Tensor] = []
    weights: list[float] = []
    for recorded, adv in zip(batch, advantages):
        for node, a in zip(recorded.rollout.log_prob_nodes, adv):
            terms.append(node)
            weights.append(-a / b)
        terms.append(recorded.rollout.entropy_node)
        weights.append(-entropy_coef / b)
    return ad.weighted_sum(terms, np.array(weights))


def assemble_critic_loss(
    value_nodes: list[list[Tensor]], targets: list[np.ndarray]
) -> Tensor:
    terms: list[Tensor] = []
    weights: list[float] = []
    b = len(value_nodes)
    for values, tgt in zip(value_nodes, targets):
        per = 1.0 / (b * len(values))
        for v, r in zip(values, tgt):
            diff = ad.sub(v, Tensor(np.array(float(r))))
            terms.append(ad.mul(diff, diff))
            weights.append(per)
    return ad.weighted_sum(terms, np.array(weights))


def build_update_losses(
    batch: list[RecordedEpisode],
    params: PolicyParams,
    cfg: TrainConfig,
    entropy_coef: float,
) -> tuple[Tensor, Tensor]:
    """Actor and critic losses for one update batch of recorded episodes."""
    value_nodes = [critic_values_for_episode(rec, params, cfg) for rec in batch]
    if cfg.reward_mode == "episodic":
        raw = [np.full(len(rec.trajectory.actions), rec.trajectory.episodic_total)
               for rec in batch]
    else:
        raw = [rec.trajectory.returns for rec in batch]
    targets = _transform_returns(raw, cfg)
    advantages = [
        tgt - np.array([float(v.data) for v in values])
        for tgt, values in zip(targets, value_nodes)
    ]
    actor_loss = assemble_actor_loss(batch, advantages, entropy_coef)
    critic_loss = assemble_critic_loss(value_nodes, targets)
    return actor_loss, critic_loss


def policy_update(
    batch: list[RecordedEpisode],
    params: PolicyParams,
    actor_opt: ad.Adam,
    critic_opt: ad.Adam,
    cfg: TrainConfig,
    entropy_coef: float,
) -> tuple[float, float] | None:
    """One Adam step each for actor and critic; None if the losses went NaN."""
    actor_loss, critic_loss = build_update_losses(batch, params, cfg, entropy_coef)
    if not (math.isfinite(float(actor_loss.data)) and math.isfinite(float(critic_loss.data))):
        warnings.warn("non-finite loss; dropping this episode batch", RuntimeWarning)
        return None
    actor_opt.zero_grad()
    ad.backward(actor_loss)
    actor_opt.step()
    critic_opt.zero_grad()
    ad.backward(critic_loss)
    critic_opt.step()
    return float(actor_loss.data), float(critic_loss.data)


def policy_update_episodic(batch, params, actor_opt, critic_opt, cfg, entropy_coef=0.0):
    if cfg.reward_mode != "episodic":
        raise ValueError("policy_update_episodic requires reward_mode='episodic'")
    return policy_update(batch, params, actor_opt, critic_opt, cfg, entropy_coef)


def policy_update_dense(batch, params, actor_opt, critic_opt, cfg, entropy_coef=0.0):
    if cfg.reward_mode != "dense":
        raise ValueError("policy_update_dense requires reward_mode='dense'")
    return policy_update(batch, params, actor_opt, critic_opt, cfg, entropy_coef)


# ---------------------------------------------------------------------------
# The main search loop.

def train(
    data: Dataset,
    cfg: TrainConfig,
    score_cfg: ScoreConfig | None = None,
    cache: ScoreCache | None = None,
    out_dir=None,
    reward_fn=None,
    params: PolicyParams | None = None,
) -> tuple[TrainState, PolicyParams]:
    """Search for the best-scoring ordering of ``data``'s variables."""
    score_cfg = score_cfg or ScoreConfig()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        dims = cfg.dims_for(min(cfg.sample_batch, data.m))
        params = PolicyParams(dims, rng)
        if cfg.pretrained_checkpoint is not None:
            arrays = ad.load_checkpoint(cfg.pretrained_checkpoint)
            params.load_arrays(arrays, subset="encoder.")
            params.load_arrays(arrays, subset="decoder.")
    if cache is None:
        cache = ScoreCache()

    actor_opt = ad.Adam(params.actor(), lr=cfg.actor_lr)
    critic_opt = ad.Adam(params.critic(), lr=cfg.critic_lr)

    state = TrainState(
        best_score=-np.inf,
        best_ordering=Ordering(tuple(rng.permutation(data.d))),
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    batch: list[RecordedEpisode] = []
    since_improve = 0
    for episode in range(1, cfg.max_episodes + 1):
        trajectory, recorded = run_episode(
            data, params, cfg, cache, rng,
            score_cfg=score_cfg, reward_fn=reward_fn, record=True,
        )
        batch.append(recorded)
        state.episode = episode

        total = trajectory.episodic_total
        if total > state.best_score:
            state.best_score = total
            state.best_ordering = trajectory.ordering
            since_improve = 0
        else:
            since_improve += 1
        state.reward_log.append((episode, total, state.best_score))

        if len(batch) >= cfg.batch_size:
            coef = cfg.entropy_bonus * cfg.entropy_decay ** (episode // 100)
            if policy_update(batch, params, actor_opt, critic_opt, cfg, coef) is None:
                state.nan_batches += 1
            batch = []

        if out_dir is not None and cfg.checkpoint_every > 0 and episode % cfg.checkpoint_every == 0:
            params.save(out_dir / f"checkpoint_ep{episode}.ordl")

        if cfg.patience > 0 and since_improve >= cfg.patience:
            state.stopped_reason = "plateau"
            break

    # Final greedy decode, logged alongside the sampled best for comparison.
    if cfg.max_episodes > 0:
        n = min(cfg.sample_batch, data.m)
        rows = rng.choice(data.m, size=n, replace=False)
        with ad.no_grad():
            greedy = pol.rollout(pol.encode(data.data[rows], params), params, mode="Greedy")
        state.greedy_ordering = greedy.ordering
        if reward_fn is None:
            from .scoring import ordering_score

            state.greedy_score = ordering_score(data, greedy.ordering, score_cfg, cache)
        else:
            state.greedy_score = float(
                sum(reward_fn(v, tuple(sorted(greedy.ordering.perm[:t])))
                    for t, v in enumerate(greedy.ordering.perm))
            )

    if out_dir is not None:
        _write_run_outputs(out_dir, state, params)
    return state, params


def _write_run_outputs(out_dir: Path, state: TrainState, params: PolicyParams) -> None:
    with open(out_dir / "rewards.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "sampled_reward", "best_so_far"])
        writer.writerows(state.reward_log)
    best = {
        "best_ordering": list(state.best_ordering.perm),
        "best_score": state.best_score,
        "episodes": state.episode,
        "stopped_reason": state.stopped_reason,
    }
    if state.greedy_ordering is not None:
        best["greedy_ordering"] = list(state.greedy_ordering.perm)
        best["greedy_score"] = state.greedy_score
    (out_dir / "best_ordering.json").write_text(json.dumps(best, indent=2))
    params.save(out_dir / "final.ordl")


# ---------------------------------------------------------------------------
# Supervised pretraining on datasets with known ground-truth graphs.

def random_topological_ordering(truth: DirectedGraph, rng: np.random.Generator) -> Ordering:
    """A random linear extension: pick uniformly among current sources."""
    if topological_order(truth) is None:
        raise GraphError("truth graph is cyclic")
    indeg = truth.edges.sum(axis=0).astype(int)
    remaining = set(range(truth.d))
    perm = []
    while remaining:
        sources = sorted(v for v in remaining if indeg[v] == 0)
        pick = sources[rng.integers(len(sources))]
        perm.append(pick)
        remaining.discard(pick)
        for succ in np.nonzero(truth.edges[pick])[0]:
            indeg[succ] -= 1
    return Ordering(tuple(perm))


def teacher_forced_log_probs(
    states: Tensor, params: PolicyParams, actions: list[int]
) -> list[Tensor]:
    """Log-probabilities of a forced action sequence under the decoder."""
    result = pol.rollout(states, params, mode="Forced", forced_actions=actions)
    return result.log_prob_nodes


def pretrain_supervised(
    datasets: list[Dataset],
    cfg: TrainConfig,
    epochs: int = 300,
    lr: float | None = None,
    params: PolicyParams | None = None,
    out_path=None,
) -> tuple[PolicyParams, list[float]]:
    """Train the actor to imitate random topological orderings of known truths."""
    for ds in datasets:
        if topological_order(ds.truth) is None:
            raise GraphError("pretraining dataset has a cyclic truth graph")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        n_input = min(cfg.sample_batch, min(ds.m for ds in datasets))
        params = PolicyParams(cfg.dims_for(n_input), rng)
    opt = ad.Adam(params.actor(), lr=cfg.actor_lr if lr is None else lr)

    losses: list[float] = []
    for _ in range(epochs):
        epoch_terms: list[Tensor] = []
        weights: list[float] = []
        for ds in datasets:
            n = params.dims.n_input
            rows = rng.choice(ds.m, size=n, replace=False)
            states = pol.encode(ds.data[rows], params)
            teacher = random_topological_ordering(ds.truth, rng)
            lp_nodes = teacher_forced_log_probs(states, params, list(teacher.perm))
            for node in lp_nodes:
                epoch_terms.append(node)
                weights.append(-1.0 / (len(datasets) * len(lp_nodes)))
        loss = ad.weighted_sum(epoch_terms, np.array(weights))
        losses.append(float(loss.data))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

    if out_path is not None:
        params.save(out_path)
    return params, losses
