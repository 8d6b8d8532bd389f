"""Advantage actor-critic training over refinement episodes.

One episode is one optimizer minibatch. For each step t of a trace the
return-to-go is G_t = sum_{k>=t} gamma^(k-t) * rbar_k (rbar = volume-mean
reward) and the advantage is A_t = G_t - V(s_t). The policy loss feeds
the advantage in as a constant (no gradient through the critic), and the
value loss is sum_t A_t^2, whose gradient flows only through V. Both
losses are built on the episode's forward tapes and backpropagated in
one pass per episode.

Training runs two phases: a click-free pretraining phase (hint channels
are noise, so the policy learns image-driven refinement) and a
fine-tuning phase under the configured interaction mode. The learning
rate halves every quarter of the total epoch budget.

Synchronous mode is bit-reproducible under a fixed seed. Asynchronous
mode runs worker threads that roll episodes on parameter snapshots and
apply whole gradients under a lock; it keeps episode throughput up on
multi-core hosts at the cost of replay determinism.
"""

from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .env import EnvConfig, EpisodeTrace, RefineEnv, run_episode
from .metrics import dice
from .network import ActorCriticNet, NetConfig, PolicyOutput, save_checkpoint
from .volumes import LabelMask, ProbabilityMap, Volume3D, binarize

ROTATION_LIMIT = math.pi / 8


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 40
    epochs_finetune: int = 20
    lr: float = 1e-4
    gamma: float = 0.95
    entropy_bonus: float = 0.0
    log_prob_agg: str = "mean"
    augment: bool = True
    sync_mode: str = "sync"
    workers: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.epochs_pretrain + self.epochs_finetune < 1:
            raise ValueError("need at least one epoch")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.entropy_bonus < 0:
            raise ValueError("entropy_bonus must be >= 0")
        if self.log_prob_agg not in ("mean", "sum"):
            raise ValueError("log_prob_agg must be 'mean' or 'sum'")
        if self.sync_mode not in ("sync", "async"):
            raise ValueError("sync_mode must be 'sync' or 'async'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs_pretrain + self.epochs_finetune


@dataclass(frozen=True)
class AdvantageRecord:
    return_to_go: float
    value: float

    @property
    def advantage(self) -> float:
        return self.return_to_go - self.value


def compute_advantages(trace: EpisodeTrace, gamma: float) -> list[AdvantageRecord]:
    """Discounted returns-to-go of the mean rewards, paired with the critic."""
    out: list[AdvantageRecord] = []
    running = 0.0
    for rec in reversed(trace.steps):
        running = rec.mean_reward + gamma * running
        out.append(AdvantageRecord(return_to_go=running, value=rec.value))
    out.reverse()
    return out


def episode_losses(outputs: list[PolicyOutput], trace: EpisodeTrace,
                   advantages: list[AdvantageRecord], cfg: TrainConfig
                   ) -> tuple[Tensor, Tensor]:
    """(policy_loss, value_loss) tensors for one episode's tapes."""
    if not (len(outputs) == len(trace.steps) == len(advantages)):
        raise ValueError("trace, outputs, and advantages must align")
    agg = ad.mean_all if cfg.log_prob_agg == "mean" else ad.sum_all
    policy_terms: list[Tensor] = []
    value_terms: list[Tensor] = []
    for out, step, adv in zip(outputs, trace.steps, advantages):
        chosen = ad.select_channel(out.log_probs, step.actions)
        policy_terms.append(ad.scale(agg(chosen), -adv.advantage))
        if cfg.entropy_bonus > 0:
            n_vox = step.actions.size
            ent = ad.scale(ad.sum_all(ad.mul(ad.exp(out.log_probs), out.log_probs)),
                           1.0 / n_vox)
            policy_terms.append(ad.scale(ent, cfg.entropy_bonus))
        err = ad.sub(ad.const(np.float64(adv.return_to_go)), out.value_mean)
        value_terms.append(ad.square(err))
    return ad.add_n(policy_terms), ad.add_n(value_terms)


class Adam:
    """Standard Adam with bias correction; one state slot per parameter."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data = p.data - lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def lr_at_epoch(base: float, epoch: int, total: int) -> float:
    """Step decay: halve at every quarter of the run."""
    quarter = max(1, total // 4)
    return base * 0.5 ** min(3, epoch // quarter)


def augment_case(image: Volume3D, truth: LabelMask, prob: ProbabilityMap,
                 rng: np.random.Generator
                 ) -> tuple[Volume3D, LabelMask, ProbabilityMap]:
    """Random flips along each axis plus small rotations in each plane.

    Intensities and probabilities resample trilinearly, labels nearest;
    all three volumes share one draw of transform parameters.
    """
    img, lab, prb = image.data, truth.data, prob.data
    for axis in range(3):
        if rng.random() < 0.5:
            img = np.flip(img, axis)
            lab = np.flip(lab, axis)
            prb = np.flip(prb, axis)
    angles = rng.uniform(-ROTATION_LIMIT, ROTATION_LIMIT, size=3)
    for angle, axes in zip(angles, ((0, 1), (0, 2), (1, 2))):
        deg = math.degrees(angle)
        img = ndimage.rotate(img, deg, axes=axes, reshape=False, order=1,
                             mode="constant", cval=0.0)
        lab = ndimage.rotate(lab, deg, axes=axes, reshape=False, order=0,
                             mode="constant", cval=0.0)
        prb = ndimage.rotate(prb, deg, axes=axes, reshape=False, order=1,
                             mode="constant", cval=0.0)
    return (Volume3D(np.ascontiguousarray(img)),
            LabelMask(np.ascontiguousarray(lab)),
            ProbabilityMap(np.clip(np.ascontiguousarray(prb), 0.0, 1.0)))


@dataclass
class EpochStats:
    epoch: int
    phase: str
    mean_reward: float
    mean_dice: float
    policy_loss: float
    value_loss: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class TrainResult:
    net: ActorCriticNet
    log: list[EpochStats] = field(default_factory=list)
    checkpoint_path: Path | None = None


Dataset = list[tuple[Volume3D, ProbabilityMap, LabelMask]]


def _episode_seed(base: int, epoch: int, case: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((base, epoch, case)))


def _phase_and_mode(cfg: TrainConfig, env_cfg: EnvConfig, epoch: int) -> tuple[str, EnvConfig]:
    if epoch < cfg.epochs_pretrain:
        return "pretrain", env_cfg.with_mode("without")
    return "finetune", env_cfg


def _run_case(net: ActorCriticNet, image: Volume3D, prob: ProbabilityMap,
              truth: LabelMask, env_cfg: EnvConfig, cfg: TrainConfig,
              rng: np.random.Generator) -> tuple[EpisodeTrace, float, float]:
    """Roll one episode, build the losses, and backpropagate into net.grad."""
    if cfg.augment:
        image, truth, prob = augment_case(image, truth, prob, rng)
    env = RefineEnv(image, truth, env_cfg)
    trace, outputs = run_episode(env, net, prob, rng=rng, action_mode="sample")
    advantages = compute_advantages(trace, cfg.gamma)
    policy_loss, value_loss = episode_losses(outputs, trace, advantages, cfg)
    total = ad.add(policy_loss, value_loss)
    if not np.isfinite(total.data):
        raise TrainingDiverged("episode loss is not finite")
    ad.backward(total)
    return trace, float(policy_loss.data), float(value_loss.data)


def _stats_from(trace: EpisodeTrace) -> tuple[float, float]:
    mean_r = float(np.mean(trace.mean_rewards)) if trace.steps else 0.0
    final = dice(binarize(trace.final_state.prob), trace.truth)
    return mean_r, final


def train(dataset: Dataset, cfg: TrainConfig = TrainConfig(),
          env_cfg: EnvConfig = EnvConfig(), net_cfg: NetConfig = NetConfig(),
          out_dir: str | Path | None = None) -> TrainResult:
    """Full two-phase training run over a dataset of (image, prob, truth)."""
    if not dataset:
        raise ValueError("dataset is empty")
    net = ActorCriticNet(net_cfg, np.random.default_rng(cfg.seed), zero_heads=True)
    adam = Adam(net.parameters())
    result = TrainResult(net=net)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "train_log.ndjson").open("w")
    try:
        for epoch in range(cfg.total_epochs):
            phase, epoch_env = _phase_and_mode(cfg, env_cfg, epoch)
            lr = lr_at_epoch(cfg.lr, epoch, cfg.total_epochs)
            order = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, epoch))).permutation(len(dataset))
            if cfg.sync_mode == "sync":
                stats = _sync_epoch(net, adam, dataset, order, epoch, epoch_env, cfg, lr)
            else:
                stats = _async_epoch(net, adam, dataset, order, epoch, epoch_env, cfg, lr)
            entry = EpochStats(epoch=epoch, phase=phase, **stats)
            result.log.append(entry)
            if log_file is not None:
                log_file.write(entry.to_json() + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoint.vxrc"
        save_checkpoint(ckpt, net, metadata={
            "actions": list(env_cfg.actions.deltas),
            "gamma": cfg.gamma,
            "horizon": env_cfg.horizon,
            "epochs": cfg.total_epochs,
        })
        result.checkpoint_path = ckpt
    return result


def _sync_epoch(net, adam, dataset, order, epoch, env_cfg, cfg, lr) -> dict:
    rewards, dices, p_losses, v_losses = [], [], [], []
    for case_idx in order:
        image, prob, truth = dataset[case_idx]
        rng = _episode_seed(cfg.seed, epoch, int(case_idx))
        ad.zero_grads(net.parameters().values())
        trace, p_loss, v_loss = _run_case(net, image, prob, truth, env_cfg, cfg, rng)
        adam.step(lr)
        r, d = _stats_from(trace)
        rewards.append(r)
        dices.append(d)
        p_losses.append(p_loss)
        v_losses.append(v_loss)
    ad.zero_grads(net.parameters().values())
    return dict(mean_reward=float(np.mean(rewards)), mean_dice=float(np.mean(dices)),
                policy_loss=float(np.mean(p_losses)), value_loss=float(np.mean(v_losses)))


def _async_epoch(net, adam, dataset, order, epoch, env_cfg, cfg, lr) -> dict:
    """Hogwild-with-a-lock: workers roll episodes on snapshots, apply whole
    gradients serially."""
    lock = threading.Lock()
    tasks: queue.Queue = queue.Queue()
    for case_idx in order:
        tasks.put(int(case_idx))
    results: list[tuple[float, float, float, float]] = []
    errors: list[BaseException] = []

    def worker() -> None:
        local = ActorCriticNet(net.config, zero_heads=False)
        while True:
            try:
                case_idx = tasks.get_nowait()
            except queue.Empty:
                return
            try:
                with lock:
                    snapshot = {k: p.data.copy() for k, p in net.parameters().items()}
                local.load_arrays(snapshot)
                ad.zero_grads(local.parameters().values())
                image, prob, truth = dataset[case_idx]
                rng = _episode_seed(cfg.seed, epoch, case_idx)
                trace, p_loss, v_loss = _run_case(local, image, prob, truth,
                                                  env_cfg, cfg, rng)
                with lock:
                    for name, p in net.parameters().items():
                        p.grad = local.parameters()[name].grad
                    adam.step(lr)
                    for p in net.parameters().values():
                        p.grad = None
                r, d = _stats_from(trace)
                with lock:
                    results.append((r, d, p_loss, v_loss))
            except BaseException as exc:  # surface worker failures to the caller
                errors.append(exc)
                return

    threads = [threading.Thread(target=worker, name=f"trainer-{i}")
               for i in range(cfg.workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    arr = np.asarray(results)
    return dict(mean_reward=float(arr[:, 0].mean()), mean_dice=float(arr[:, 1].mean()),
                policy_loss=float(arr[:, 2].mean()), value_loss=float(arr[:, 3].mean()))
