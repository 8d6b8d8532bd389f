"""Refinement episode environment.

Every voxel is an agent holding a four-channel state: image intensity,
its current foreground probability, and the two hint maps. A step applies
one probability adjustment per voxel, clips to [0, 1], pays each voxel a
reward equal to the drop in its cross-entropy against the ground truth,
then lets the simulated annotator click on the new error regions and
rebuilds the hint maps. Rewards therefore telescope: summed over an
episode they equal the total cross-entropy improvement, no matter what
the policy did in between.

Fresh episodes start with empty hint sets and sentinel hint maps
(uniform 1), so the first action is taken before any guidance exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .clicks import ClickBatch, OracleConfig, label_error_regions, noise_hint_maps, sample_clicks
from .geodesy import GeodesicConfig, HintMaps, HintSets, build_hint_maps
from .network import PolicyOutput, sample_actions
from .volumes import LabelMask, ProbabilityMap, Volume3D, binarize

PROB_FLOOR = 1e-6  # cross-entropy clamp; keeps rewards finite at p in {0, 1}


@dataclass(frozen=True)
class ActionSet:
    """Signed probability adjustments available to every voxel."""

    deltas: tuple[float, ...] = (-0.4, -0.2, -0.1, 0.1, 0.2, 0.4)

    def __post_init__(self) -> None:
        if len(self.deltas) < 2:
            raise ValueError("need at least two actions")
        if len(set(self.deltas)) != len(self.deltas):
            raise ValueError("duplicate action deltas")
        if any(d == 0 for d in self.deltas):
            raise ValueError("zero delta is not a valid action")
        if set(self.deltas) != {-d for d in self.deltas}:
            raise ValueError("action set must be closed under negation")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))

    def __len__(self) -> int:
        return len(self.deltas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.deltas)

    @classmethod
    def from_magnitudes(cls, magnitudes) -> ActionSet:
        mags = [abs(float(m)) for m in magnitudes]
        return cls(tuple(sorted({-m for m in mags} | set(mags))))


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 5
    gamma: float = 0.95
    actions: ActionSet = ActionSet()
    oracle: OracleConfig = OracleConfig()
    geodesy: GeodesicConfig = GeodesicConfig()
    accumulate_hints: bool = True

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def with_mode(self, mode: str) -> EnvConfig:
        return replace(self, oracle=replace(self.oracle, mode=mode))


@dataclass(frozen=True, eq=False)
class AgentState:
    """Per-voxel observation stack at one point in an episode."""

    image: Volume3D
    prob: ProbabilityMap
    hints: HintMaps
    step: int

    def channels(self) -> np.ndarray:
        return np.stack([
            self.image.data,
            self.prob.data,
            self.hints.object_map.data,
            self.hints.background_map.data,
        ])


def cross_entropy_map(prob: ProbabilityMap, truth: LabelMask) -> np.ndarray:
    p = np.clip(prob.data, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = truth.data
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def apply_actions(prob: ProbabilityMap, action_indices: np.ndarray,
                  actions: ActionSet) -> ProbabilityMap:
    """Adjust each voxel's probability by its chosen delta, clipped to [0, 1]."""
    idx = np.asarray(action_indices)
    if idx.shape != prob.dims:
        raise ValueError("action index shape must match the volume")
    if idx.min() < 0 or idx.max() >= len(actions):
        raise ValueError("action index out of range")
    return ProbabilityMap(np.clip(prob.data + actions.as_array()[idx], 0.0, 1.0))


def reward_map(prev: ProbabilityMap, cur: ProbabilityMap, truth: LabelMask) -> Volume3D:
    """Per-voxel cross-entropy decrease: positive when the update helped."""
    return Volume3D(cross_entropy_map(prev, truth) - cross_entropy_map(cur, truth))


def discounted_return(mean_rewards, gamma: float) -> float:
    """Sum of gamma^(t-1) * r_t over the episode, t starting at 1."""
    total = 0.0
    factor = 1.0
    for r in mean_rewards:
        total += factor * float(r)
        factor *= gamma
    return total


@dataclass(eq=False)
class StepRecord:
    """What the trainer needs from one env step."""

    state: AgentState          # state the action was chosen in
    actions: np.ndarray
    reward: Volume3D
    mean_reward: float
    value: float               # critic estimate of `state`, filled by the driver
    new_clicks: int


@dataclass(eq=False)
class EpisodeTrace:
    steps: list[StepRecord] = field(default_factory=list)
    truth: LabelMask | None = None
    final_state: AgentState | None = None

    @property
    def mean_rewards(self) -> list[float]:
        return [s.mean_reward for s in self.steps]


class RefineEnv:
    """One volume's refinement episode; reset() starts a new one."""

    def __init__(self, image: Volume3D, truth: LabelMask, cfg: EnvConfig = EnvConfig()) -> None:
        if image.dims != truth.dims:
            raise ValueError("image and truth dims differ")
        self.image = image
        self.truth = truth
        self.cfg = cfg
        self.hint_sets = HintSets()
        self.last_new_clicks = 0
        self._rng = np.random.default_rng(cfg.oracle.rng_seed)
        self._state: AgentState | None = None

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    @property
    def state(self) -> AgentState:
        if self._state is None:
            raise RuntimeError("call reset() before reading the state")
        return self._state

    @property
    def done(self) -> bool:
        return self._state is not None and self._state.step >= self.cfg.horizon

    def reset(self, initial_prob: ProbabilityMap,
              rng: np.random.Generator | None = None) -> AgentState:
        if initial_prob.dims != self.image.dims:
            raise ValueError("initial probability dims differ from the image")
        self._rng = rng if rng is not None else np.random.default_rng(self.cfg.oracle.rng_seed)
        self.hint_sets = HintSets()
        self.last_new_clicks = 0
        self._state = AgentState(
            image=self.image,
            prob=initial_prob,
            hints=HintMaps.sentinel(self.image.dims),
            step=0,
        )
        return self._state

    def _absorb_clicks(self, batch: ClickBatch) -> int:
        if not self.cfg.accumulate_hints:
            self.hint_sets.clear()
        added = 0
        for coord in batch.object_clicks:
            added += self.hint_sets.add(coord, positive=True)
        for coord in batch.background_clicks:
            added += self.hint_sets.add(coord, positive=False)
        return added

    def step(self, action_indices: np.ndarray) -> tuple[AgentState, Volume3D, bool]:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        if self.done:
            raise RuntimeError("episode is complete; call reset() to start another")
        prev = self._state
        new_prob = apply_actions(prev.prob, action_indices, self.cfg.actions)
        reward = reward_map(prev.prob, new_prob, self.truth)
        pred = binarize(new_prob)
        regions = label_error_regions(pred, self.truth, self.cfg.oracle.connectivity)
        batch = sample_clicks(regions, self.cfg.oracle, self.image.dims, self._rng)
        added = self._absorb_clicks(batch)
        self.last_new_clicks = added
        if batch.noise_hints:
            hints = noise_hint_maps(self.image.dims, self._rng)
        elif added or not self.cfg.accumulate_hints:
            hints = build_hint_maps(self.image, self.hint_sets, self.cfg.geodesy)
        else:
            hints = prev.hints
        self._state = AgentState(image=self.image, prob=new_prob,
                                 hints=hints, step=prev.step + 1)
        return self._state, reward, self.done


def run_episode(env: RefineEnv, net, initial_prob: ProbabilityMap,
                rng: np.random.Generator | None = None,
                action_mode: str = "sample") -> tuple[EpisodeTrace, list[PolicyOutput]]:
    """Roll one full episode; returns the trace and the per-step forward tapes.

    One generator drives everything random in the episode (action sampling
    and the oracle), so a seed fully determines the outcome.
    """
    state = env.reset(initial_prob, rng=rng)
    trace = EpisodeTrace(truth=env.truth)
    outputs: list[PolicyOutput] = []
    while not env.done:
        out = net.forward_state(state)
        actions = sample_actions(out, action_mode, env.rng)
        new_state, reward, _ = env.step(actions)
        trace.steps.append(StepRecord(
            state=state,
            actions=actions,
            reward=reward,
            mean_reward=float(reward.data.mean()),
            value=out.value_scalar,
            new_clicks=env.last_new_clicks,
        ))
        outputs.append(out)
        state = new_state
    trace.final_state = state
    return trace, outputs
