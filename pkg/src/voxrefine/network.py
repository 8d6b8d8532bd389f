"""Shared-trunk actor-critic network over voxel state channels.

Input is a (4, nx, ny, nz) stack: intensity, current probability, object
hint map, background hint map. A trunk of conv+relu blocks feeds two
heads: the policy head ends in a linear conv with one output channel per
action, the value head in a linear conv with a single channel whose
spatial mean is the state value. Every voxel shares the same weights, so
one forward pass evaluates the policy of every per-voxel agent at once.

Checkpoints are a single file: one JSON header line (config, tensor
index, caller metadata) followed by the raw little-endian float32 tensor
payloads in index order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = "VXRC1"
STATE_CHANNELS = 4


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = STATE_CHANNELS
    channels: int = 16
    trunk_blocks: int = 3
    head_blocks: int = 3
    kernel: int = 3
    dilation: int = 1
    n_actions: int = 6
    # starting state-value estimate; a value near the typical early episode
    # return keeps the first advantages centred instead of uniformly signed,
    # which otherwise pushes the whole policy away from every sampled action
    value_bias_init: float = 0.0

    def __post_init__(self) -> None:
        if min(self.in_channels, self.channels, self.n_actions) < 1:
            raise ValueError("channel and action counts must be positive")
        if min(self.trunk_blocks, self.head_blocks) < 1:
            raise ValueError("block counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")


@dataclass(eq=False)
class PolicyOutput:
    """One forward pass; tensors stay attached to the tape for training."""

    logits: Tensor        # (n_actions, nx, ny, nz)
    log_probs: Tensor     # log-softmax of logits over the action axis
    action_probs: np.ndarray
    value_map: Tensor     # (1, nx, ny, nz)
    value_mean: Tensor    # scalar

    @property
    def value_scalar(self) -> float:
        return self.value_mean.item()


def _xavier_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    fan_in = c_in * k ** 3
    fan_out = c_out * k ** 3
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k))


class ActorCriticNet:
    """Parameter container plus the forward pass."""

    def __init__(self, config: NetConfig = NetConfig(),
                 rng: np.random.Generator | None = None,
                 zero_heads: bool = True) -> None:
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        k = config.kernel
        c = config.channels
        self.params: dict[str, Tensor] = {}

        def conv_block(name: str, c_in: int, c_out: int, zero: bool = False) -> None:
            w = np.zeros((c_out, c_in, k, k, k)) if zero \
                else _xavier_conv(rng, c_out, c_in, k)
            self.params[f"{name}.weight"] = ad.param(w)
            self.params[f"{name}.bias"] = ad.param(np.zeros(c_out))

        conv_block("trunk.0", config.in_channels, c)
        for i in range(1, config.trunk_blocks):
            conv_block(f"trunk.{i}", c, c)
        last = config.head_blocks - 1
        for i in range(config.head_blocks):
            conv_block(f"policy.{i}", c, config.n_actions if i == last else c,
                       zero=zero_heads and i == last)
        for i in range(config.head_blocks):
            conv_block(f"value.{i}", c, 1 if i == last else c,
                       zero=zero_heads and i == last)
        if config.value_bias_init != 0.0:
            final = self.params[f"value.{last}.bias"]
            final.data[...] = config.value_bias_init

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("parameter name sets differ")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = np.asarray(arr, dtype=np.float64)

    def _head(self, name: str, x: Tensor) -> Tensor:
        last = self.config.head_blocks - 1
        for i in range(self.config.head_blocks):
            x = ad.conv3d(x, self.params[f"{name}.{i}.weight"],
                          self.params[f"{name}.{i}.bias"],
                          dilation=self.config.dilation)
            if i != last:
                x = ad.relu(x)
        return x

    def forward_channels(self, channels: np.ndarray) -> PolicyOutput:
        """Run the network on a raw (in_channels, nx, ny, nz) state stack."""
        if channels.ndim != 4 or channels.shape[0] != self.config.in_channels:
            raise ValueError(
                f"expected ({self.config.in_channels}, nx, ny, nz) input, "
                f"got {channels.shape}")
        x = ad.const(channels)
        for i in range(self.config.trunk_blocks):
            x = ad.relu(ad.conv3d(x, self.params[f"trunk.{i}.weight"],
                                  self.params[f"trunk.{i}.bias"],
                                  dilation=self.config.dilation))
        logits = self._head("policy", x)
        log_probs = ad.log_softmax(logits)
        value_map = self._head("value", x)
        return PolicyOutput(
            logits=logits,
            log_probs=log_probs,
            action_probs=np.exp(log_probs.data),
            value_map=value_map,
            value_mean=ad.mean_all(value_map),
        )

    def forward_state(self, state) -> PolicyOutput:
        """Forward pass on anything exposing ``channels()`` (an agent state)."""
        return self.forward_channels(state.channels())


def sample_actions(policy: PolicyOutput, mode: str = "sample",
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-voxel action indices, sampled from or maximizing the policy."""
    probs = policy.action_probs
    if mode == "argmax":
        return probs.argmax(axis=0)
    if mode != "sample":
        raise ValueError(f"mode must be 'sample' or 'argmax', got {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    cdf = probs.cumsum(axis=0)
    u = rng.random(probs.shape[1:])
    idx = (u[None] >= cdf).sum(axis=0)
    return np.minimum(idx, probs.shape[0] - 1)


def save_checkpoint(path: str | Path, net: ActorCriticNet,
                    metadata: dict | None = None) -> None:
    names = sorted(net.params)
    index = []
    offset = 0
    blobs = []
    for name in names:
        blob = net.params[name].data.astype("<f4").tobytes()
        index.append({"name": name, "shape": list(net.params[name].data.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "magic": CHECKPOINT_MAGIC,
        "config": asdict(net.config),
        "tensors": index,
        "metadata": metadata or {},
    }
    payload = json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    Path(path).write_bytes(payload)


def load_checkpoint(path: str | Path) -> tuple[ActorCriticNet, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("malformed checkpoint: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed checkpoint header: {exc}") from exc
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    net = ActorCriticNet(NetConfig(**header["config"]), zero_heads=False)
    body = raw[nl + 1:]
    arrays = {}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(body):
            raise ValueError("truncated checkpoint payload")
        arr = np.frombuffer(body[start:stop], dtype="<f4").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    net.load_arrays(arrays)
    return net, header["metadata"]
