"""DLRM-style ranking network with co-trained projection heads.

Pathways (all ending in ``d_int`` dims):

* dense features -> dense MLP
* padded sparse category ids -> mean-pooled embedding rows
* each active content channel -> its own projection MLP (384 -> 32 by default)

Every pair of pathway vectors is dotted, and the top MLP sees the dense
vector concatenated with those dots.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import CHANNEL_SIDE, EncodedData

MASKS: dict[str, tuple[str, ...]] = {
    "text": ("user-summary", "item-summary"),
    "image": ("item-image",),
    "text+image": ("user-summary", "item-summary", "item-image"),
}
MASK_LABELS = {"text": "Text Only", "image": "Image Only", "text+image": "Text + Image"}


class CheckpointError(ValueError):
    pass


@dataclass
class ChannelConfig:
    name: str
    d_raw: int = 384
    hidden: list[int] = field(default_factory=lambda: [64])
    side: str = ""

    def __post_init__(self):
        if not self.side:
            self.side = CHANNEL_SIDE.get(self.name, "item")


@dataclass
class ModelConfig:
    dense_dim: int = 4
    vocab: int = 180
    sparse_len: int = 11
    d_int: int = 32
    dense_hidden: list[int] = field(default_factory=lambda: [64])
    top_hidden: list[int] = field(default_factory=lambda: [64, 32])
    channels: list[ChannelConfig] = field(
        default_factory=lambda: [ChannelConfig("user-summary"), ChannelConfig("item-summary"), ChannelConfig("item-image")]
    )
    mask: str = "text+image"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.channels = [c if isinstance(c, ChannelConfig) else ChannelConfig(**c) for c in self.channels]
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mask not in MASKS and not self.mask.startswith("custom:"):
            raise ValueError(f"unknown channel mask {self.mask!r}; choose from {sorted(MASKS)}")
        missing = set(self.active_channels) - {c.name for c in self.channels}
        if missing:
            raise ValueError(f"mask {self.mask!r} names channels without config: {sorted(missing)}")

    @property
    def pad_id(self) -> int:
        return self.vocab - 1

    @property
    def active_channels(self) -> tuple[str, ...]:
        # "custom:a,b" selects an explicit channel list
        if self.mask.startswith("custom:"):
            return tuple(x for x in self.mask[len("custom:"):].split(",") if x)
        return MASKS[self.mask]

    def channel(self, name: str) -> ChannelConfig:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def n_vectors(self) -> int:
        return 2 + len(self.active_channels)

    @property
    def top_input_dim(self) -> int:
        n = self.n_vectors
        return self.d_int + n * (n - 1) // 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _mlp_shapes(prefix: str, sizes: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append((f"{prefix}.{k}.weight", (fan_in, fan_out)))
        out.append((f"{prefix}.{k}.bias", (fan_out,)))
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"sparse.embedding": (cfg.vocab, cfg.d_int)}
    shapes.update(_mlp_shapes("dense", [cfg.dense_dim, *cfg.dense_hidden, cfg.d_int]))
    for ch in cfg.channels:
        shapes.update(_mlp_shapes(f"proj.{ch.name}", [ch.d_raw, *ch.hidden, cfg.d_int]))
    shapes.update(_mlp_shapes("top", [cfg.top_input_dim, *cfg.top_hidden, 1]))
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, embedding rows in +-1/sqrt(d_int)."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "sparse.embedding":
            lim = 1.0 / np.sqrt(cfg.d_int)
            params[name] = rng.uniform(-lim, lim, size=shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
    return params


@dataclass
class ForwardOutput:
    logits: Tensor
    reduced: dict[str, Tensor]

    @property
    def probabilities(self) -> np.ndarray:
        return ad._sigmoid(self.logits.value)


class DLRM:
    """Parameter container plus forward pass.

    ``params`` holds plain arrays; each forward wraps them in fresh leaf
    tensors (``self.leaves``) so the graph is rebuilt per call.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise CheckpointError(f"parameter names differ from config: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != config {shape}")
        self.leaves: dict[str, Tensor] = {}

    def new_leaves(self) -> dict[str, Tensor]:
        self.leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        return self.leaves

    def _leaf(self, name: str) -> Tensor:
        if name not in self.leaves:
            self.new_leaves()
        return self.leaves[name]

    def _mlp(self, prefix: str, x: Tensor, n_layers: int, relu_last: bool = False,
             rate: float = 0.0, train: bool = False, rng=None) -> Tensor:
        for k in range(n_layers):
            x = ad.add(ad.matmul(x, self._leaf(f"{prefix}.{k}.weight")), self._leaf(f"{prefix}.{k}.bias"))
            if k < n_layers - 1 or relu_last:
                x = ad.relu(x)
                if rate:
                    x = ad.dropout(x, rate, train, rng)
        return x

    def project(self, channel: str, raw: np.ndarray | Tensor, train: bool = False, rng=None) -> Tensor:
        """Reduce a batch of raw content vectors ``[n, d_raw]`` to ``[n, d_int]``."""
        ch = self.cfg.channel(channel)
        raw = ad.as_tensor(raw)
        if raw.value.ndim == 1:
            raw = ad.reshape(raw, (1, -1))
        if raw.shape[1] != ch.d_raw:
            raise ad.ShapeError(f"channel {channel!r} expects d_raw {ch.d_raw}, got {raw.shape[1]}")
        return self._mlp(f"proj.{channel}", raw, len(ch.hidden) + 1, rate=self.cfg.dropout, train=train, rng=rng)

    def pool_sparse(self, ids: np.ndarray) -> Tensor:
        """Mean of embedding rows over non-pad ids; an all-pad row pools to zero."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        n, length = ids.shape
        d = self.cfg.d_int
        if np.any((ids < 0) | (ids >= self.cfg.vocab)):
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab)][0]
            raise IndexError(f"sparse id {int(bad)} out of range for vocab {self.cfg.vocab}")
        keep = (ids != self.cfg.pad_id).astype(np.float64)
        counts = keep.sum(axis=1)
        inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
        rows = ad.gather_rows(self._leaf("sparse.embedding"), ids.reshape(-1))
        rows = ad.mul(rows, np.repeat(keep.reshape(-1, 1), d, axis=1))
        summed = ad.matmul(ad.reshape(rows, (n, length * d)), np.tile(np.eye(d), (length, 1)))
        return ad.mul(summed, np.repeat(inv[:, None], d, axis=1))

    def forward(self, batch: EncodedData, tables: dict[str, np.ndarray], train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        self.new_leaves()
        cfg = self.cfg
        z_dense = self._mlp("dense", ad.Tensor(batch.dense), len(cfg.dense_hidden) + 1)
        vectors = [z_dense, self.pool_sparse(batch.sparse)]
        reduced = {}
        for name in cfg.active_channels:
            idx = batch.users if cfg.channel(name).side == "user" else batch.items
            if name not in tables:
                raise KeyError(f"no embedding table for active channel {name!r}")
            z = self.project(name, tables[name][idx], train=train, rng=rng)
            reduced[name] = z
            vectors.append(z)
        dots = [ad.sum(ad.mul(vectors[a], vectors[b]), axis=1)
                for a in range(len(vectors)) for b in range(a + 1, len(vectors))]
        n = len(batch)
        inter = ad.concat([ad.reshape(d, (n, 1)) for d in dots])
        top_in = ad.concat([z_dense, inter])
        logits = self._mlp("top", top_in, len(cfg.top_hidden) + 1)
        return ForwardOutput(ad.reshape(logits, (n,)), reduced)

    def predict_proba(self, batch: EncodedData, tables: dict[str, np.ndarray], chunk: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(batch), chunk):
            part = batch.subset(slice(start, start + chunk))
            out.append(self.forward(part, tables).probabilities)
        return np.concatenate(out) if out else np.zeros(0)

    def grads_by_name(self, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: grads[leaf] for name, leaf in self.leaves.items() if leaf in grads}


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    obj = {name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for name, v in sorted(params.items())}
    Path(path).write_text(json.dumps(obj) + "\n")


def load_checkpoint(path, cfg: ModelConfig | None = None) -> dict[str, np.ndarray]:
    try:
        obj = json.loads(Path(path).read_text())
        params = {name: np.array(e["values"], dtype=np.float64).reshape(e["shape"]) for name, e in obj.items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if cfg is not None:
        DLRM(cfg, params)  # validates names and shapes
    return params
