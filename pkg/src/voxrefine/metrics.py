"""Segmentation quality metrics and step-wise evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, RefineEnv, run_episode
from .volumes import LabelMask, ProbabilityMap, Volume3D, binarize


def dice(pred: LabelMask, truth: LabelMask) -> float:
    """Overlap score 2|A & B| / (|A| + |B|); empty-vs-empty counts as 1."""
    if pred.dims != truth.dims:
        raise ValueError("dice requires equal dims")
    a = pred.data
    b = truth.data
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / denom)


@dataclass
class EvalReport:
    """Dice trajectory of one refinement sequence, step 0 = initial.

    clicks_per_step holds integers for a single episode and per-step means
    when several reports are averaged.
    """

    step_dice: list[float]
    clicks_per_step: list[float] = field(default_factory=list)
    mean_rewards: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.step_dice[0]

    @property
    def final(self) -> float:
        return self.step_dice[-1]

    @property
    def deltas(self) -> list[float]:
        return [b - a for a, b in zip(self.step_dice, self.step_dice[1:])]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate_sequence(net, image: Volume3D, initial_prob: ProbabilityMap,
                      truth: LabelMask, cfg: EnvConfig,
                      seed: int = 0) -> EvalReport:
    """Run one greedy refinement episode and score every step."""
    env = RefineEnv(image, truth, cfg)
    trace, _ = run_episode(env, net, initial_prob,
                           rng=np.random.default_rng(seed), action_mode="argmax")
    scores = [dice(binarize(initial_prob), truth)]
    probs = [s.state.prob for s in trace.steps[1:]] + [trace.final_state.prob]
    scores += [dice(binarize(p), truth) for p in probs]
    return EvalReport(
        step_dice=scores,
        clicks_per_step=[s.new_clicks for s in trace.steps],
        mean_rewards=[s.mean_reward for s in trace.steps],
    )


def mean_report(reports: list[EvalReport]) -> EvalReport:
    """Average several equal-length reports step by step."""
    if not reports:
        raise ValueError("need at least one report")
    n = len(reports[0].step_dice)
    if any(len(r.step_dice) != n for r in reports):
        raise ValueError("reports have different lengths")
    k = len(reports)

    def col_mean(rows: list[list[float]]) -> list[float]:
        width = min(len(row) for row in rows)
        return [sum(row[i] for row in rows) / k for i in range(width)]

    return EvalReport(
        step_dice=[sum(r.step_dice[i] for r in reports) / k for i in range(n)],
        clicks_per_step=col_mean([r.clicks_per_step for r in reports]),
        mean_rewards=col_mean([r.mean_rewards for r in reports]),
    )
