"""Record schemas, file formats, splits, batching and synthetic data."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DLRE"
FORMAT_VERSION = 1
CHANNELS = ("user-summary", "item-summary", "item-image")
CHANNEL_SIDE = {"user-summary": "user", "item-summary": "item", "item-image": "item"}


class DataFormatError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: int
    label: int
    dense: tuple[float, ...] = ()
    sparse: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "rating": self.rating,
            "label": self.label,
            "dense": list(self.dense),
            "sparse": list(self.sparse),
        }


def label_for(rating: int) -> int:
    return int(rating >= 4)


def record_from_json(obj: dict) -> InteractionRecord:
    rating = obj["rating"]
    if isinstance(rating, bool) or not isinstance(rating, int):
        raise ValidationError(f"rating must be an integer, got {rating!r}")
    if not 1 <= rating <= 5:
        raise ValidationError(f"rating {rating} outside 1-5")
    label = label_for(rating)
    if obj.get("label") is not None and int(obj["label"]) != label:
        raise ValidationError(f"label {obj['label']} disagrees with rating {rating}")
    return InteractionRecord(
        user_id=str(obj["user_id"]),
        item_id=str(obj["item_id"]),
        rating=rating,
        label=label,
        dense=tuple(float(x) for x in obj.get("dense", ())),
        sparse=tuple(int(x) for x in obj.get("sparse", ())),
    )


def load_interactions(path) -> list[InteractionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise TypeError("not an object")
                rec = record_from_json(obj)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            records.append(rec)
    return records


def write_interactions(path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


@dataclass
class ContentEmbeddingStore:
    """Raw content vectors for one channel, stored as float32 rows."""

    channel: str
    ids: list[str]
    vectors: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{self.channel}: {len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        self.index = {}
        for i, key in enumerate(self.ids):
            if key in self.index:
                raise DataFormatError(f"{self.channel}: duplicate id {key!r}")
            self.index[key] = i

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.vectors[self.index[key]]


def write_embeddings(path, store: ContentEmbeddingStore) -> None:
    parts = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, len(store), store.dim)]
    for key in store.ids:
        raw = key.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(store.vectors.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read_binary(data: bytes, channel: str) -> ContentEmbeddingStore:
    if data[:4] != MAGIC:
        raise EmbeddingFormatError(f"bad magic {data[:4]!r}", 0)
    header = struct.calcsize("<IQI")
    if len(data) < 4 + header:
        raise EmbeddingFormatError("truncated header", len(data))
    version, count, dim = struct.unpack_from("<IQI", data, 4)
    if version != FORMAT_VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}", 4)
    pos = 4 + header
    ids = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise EmbeddingFormatError("truncated id table", pos)
        (n,) = struct.unpack_from("<H", data, pos)
        if pos + 2 + n > len(data):
            raise EmbeddingFormatError("truncated id table", pos)
        ids.append(data[pos + 2 : pos + 2 + n].decode("utf-8"))
        pos += 2 + n
    need = count * dim * 4
    if len(data) - pos < need:
        raise EmbeddingFormatError(
            f"truncated payload: expected {count}x{dim} float32 ({need} bytes), found {len(data) - pos}", pos
        )
    if len(data) - pos > need:
        raise EmbeddingFormatError("trailing bytes after payload", pos + need)
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return ContentEmbeddingStore(channel, ids, vectors.astype(np.float32))


def _read_jsonl(text: str, channel: str) -> ContentEmbeddingStore:
    ids, rows, dim = [], [], None
    offset = 0
    for line in text.splitlines(keepends=True):
        if line.strip():
            obj = json.loads(line)
            vec = [float(x) for x in obj["vector"]]
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingFormatError(f"vector for {obj['id']!r} has dim {len(vec)}, expected {dim}", offset)
            ids.append(str(obj["id"]))
            rows.append(vec)
        offset += len(line.encode("utf-8"))
    return ContentEmbeddingStore(channel, ids, np.array(rows, dtype=np.float32).reshape(len(ids), dim or 0))


def load_embeddings(path, channel: str) -> ContentEmbeddingStore:
    """Read a binary ``DLRE`` file, or the JSONL fallback (``{"id", "vector"}`` per line)."""
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        return _read_binary(data, channel)
    if data[:1] in (b"{", b"\n", b" ", b""):
        return _read_jsonl(data.decode("utf-8"), channel)
    raise EmbeddingFormatError(f"bad magic {data[:4]!r}", 0)


@dataclass
class ChannelSchema:
    name: str
    side: str
    d_raw: int
    file: str = ""


@dataclass
class Schema:
    dense_dim: int
    vocab: int
    sparse_len: int = 11
    channels: list[ChannelSchema] = field(default_factory=list)

    @property
    def pad_id(self) -> int:
        return self.vocab - 1

    def to_json(self) -> dict:
        out = asdict(self)
        out["pad_id"] = self.pad_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Schema":
        channels = [ChannelSchema(**c) for c in obj.get("channels", [])]
        return cls(obj["dense_dim"], obj["vocab"], obj.get("sparse_len", 11), channels)

    def validate(self, records: Sequence[InteractionRecord]) -> None:
        for rec in records:
            if len(rec.dense) != self.dense_dim:
                raise ValidationError(f"record {rec.user_id}/{rec.item_id}: dense length {len(rec.dense)} != {self.dense_dim}")
            if len(rec.sparse) != self.sparse_len:
                raise ValidationError(f"record {rec.user_id}/{rec.item_id}: sparse length {len(rec.sparse)} != {self.sparse_len}")
            if any(not 0 <= s < self.vocab for s in rec.sparse):
                raise ValidationError(f"record {rec.user_id}/{rec.item_id}: sparse id outside vocab {self.vocab}")


@dataclass
class DatasetSplit:
    train: list[InteractionRecord]
    test: list[InteractionRecord]
    schema: Schema | None = None


def split(records: Sequence[InteractionRecord], test_fraction: float = 0.2, seed: int = 0,
          schema: Schema | None = None) -> DatasetSplit:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return DatasetSplit([records[i] for i in train_idx], [records[i] for i in test_idx], schema)


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches, reshuffled per ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class SynthConfig:
    user_clusters: int = 4
    item_clusters: int = 4
    users: int = 200
    items: int = 200
    affinity: list[list[float]] | None = None
    noise: float = 0.3
    d_raw: int = 384
    interactions_per_user: int = 40
    seed: int = 0
    dense_dim: int = 4
    vocab: int = 180
    sparse_len: int = 11
    categories_per_item: int = 3
    # chance that an item category is drawn from its cluster's pool instead of uniformly
    category_purity: float = 0.5
    # chance that an interaction is drawn from the user's home item cluster instead of uniformly
    home_exposure: float = 0.5

    def __post_init__(self):
        if self.affinity is None:
            self.affinity = default_affinity(self.user_clusters, self.item_clusters)

    def validate(self) -> None:
        counts = (self.user_clusters, self.item_clusters, self.users, self.items,
                  self.d_raw, self.interactions_per_user, self.dense_dim, self.vocab, self.sparse_len)
        if any(c < 1 for c in counts):
            raise ConfigError("cluster counts, entity counts and dimensions must be positive")
        aff = np.asarray(self.affinity, dtype=float)
        if aff.shape != (self.user_clusters, self.item_clusters):
            raise ConfigError(f"affinity shape {aff.shape} != ({self.user_clusters}, {self.item_clusters})")
        if np.any(aff < 0) or np.any(aff > 1) or not np.all(np.isfinite(aff)):
            raise ConfigError("affinity entries must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.interactions_per_user > self.items:
            raise ConfigError("interactions per user exceeds item count")
        if not 1 <= self.categories_per_item <= self.sparse_len:
            raise ConfigError("categories per item must be in [1, sparse_len]")
        if not 0.0 <= self.home_exposure <= 1.0:
            raise ConfigError("home exposure must be in [0, 1]")
        if self.vocab < 2:
            raise ConfigError("vocab needs at least one real id plus the pad id")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


def default_affinity(n_user: int, n_item: int, like: float = 0.99, dislike: float = 0.3) -> list[list[float]]:
    """Each user cluster mostly dislikes the item cluster after its home cluster and likes the rest.

    With four clusters on each side and half of the traffic sent home, the
    positive rate lands near 7/8.
    """
    return [[dislike if (u + 1) % n_item == i and n_item > 1 else like for i in range(n_item)]
            for u in range(n_user)]


@dataclass
class SynthResult:
    records: list[InteractionRecord]
    stores: dict[str, ContentEmbeddingStore]
    clusters: dict[str, dict[str, int]]
    schema: Schema


def _centroids(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    c = rng.standard_normal((k, d))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def _draw_items(rng: np.random.Generator, cfg: SynthConfig, home: np.ndarray) -> np.ndarray:
    n = cfg.interactions_per_user
    if cfg.home_exposure == 0.0:
        return rng.choice(cfg.items, size=n, replace=False)
    n_home = min(int(rng.binomial(n, cfg.home_exposure)), len(home))
    picked = rng.choice(home, size=n_home, replace=False)
    rest = np.setdiff1d(np.arange(cfg.items), picked)
    return np.concatenate([picked, rng.choice(rest, size=n - n_home, replace=False)])


def synthesize(cfg: SynthConfig) -> SynthResult:
    """Planted-cluster interactions plus noisy per-channel content vectors."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    aff = np.asarray(cfg.affinity, dtype=float)
    user_ids = [f"u{i:04d}" for i in range(cfg.users)]
    item_ids = [f"i{i:04d}" for i in range(cfg.items)]
    cu = rng.integers(cfg.user_clusters, size=cfg.users)
    ci = rng.integers(cfg.item_clusters, size=cfg.items)

    stores = {}
    for name in CHANNELS:
        side_clusters, ids, k = (cu, user_ids, cfg.user_clusters) if CHANNEL_SIDE[name] == "user" \
            else (ci, item_ids, cfg.item_clusters)
        cent = _centroids(rng, k, cfg.d_raw)
        vecs = cent[side_clusters] + cfg.noise * rng.standard_normal((len(ids), cfg.d_raw))
        stores[name] = ContentEmbeddingStore(name, ids, vecs)

    pad = cfg.vocab - 1
    pools = [rng.choice(pad, size=min(pad, 8), replace=False) for _ in range(cfg.item_clusters)]
    price = np.where(rng.random(cfg.items) < 0.5, ci % cfg.dense_dim, rng.integers(cfg.dense_dim, size=cfg.items))
    item_sparse = []
    for i in range(cfg.items):
        n = int(rng.integers(1, cfg.categories_per_item + 1))
        cats = []
        for _ in range(n):
            if rng.random() < cfg.category_purity:
                cats.append(int(rng.choice(pools[ci[i]])))
            else:
                cats.append(int(rng.integers(pad)))
        cats = sorted(set(cats))
        item_sparse.append(tuple(cats + [pad] * (cfg.sparse_len - len(cats))))
    item_dense = [tuple(float(j == price[i]) for j in range(cfg.dense_dim)) for i in range(cfg.items)]

    records = []
    by_cluster = [np.flatnonzero(ci == c) for c in range(cfg.item_clusters)]
    for u in range(cfg.users):
        chosen = _draw_items(rng, cfg, by_cluster[cu[u] % cfg.item_clusters])
        liked = rng.random(cfg.interactions_per_user) < aff[cu[u], ci[chosen]]
        for i, ok in zip(chosen, liked):
            rating = 5 if ok else 2
            records.append(InteractionRecord(user_ids[u], item_ids[i], rating, label_for(rating),
                                             item_dense[i], item_sparse[i]))

    schema = Schema(cfg.dense_dim, cfg.vocab, cfg.sparse_len,
                    [ChannelSchema(n, CHANNEL_SIDE[n], cfg.d_raw, f"{n}.dlre") for n in CHANNELS])
    clusters = {"users": {k: int(c) for k, c in zip(user_ids, cu)},
                "items": {k: int(c) for k, c in zip(item_ids, ci)}}
    return SynthResult(records, stores, clusters, schema)


def write_dataset(out_dir, result: SynthResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / "interactions.jsonl", result.records)
    for ch in result.schema.channels:
        write_embeddings(out / ch.file, result.stores[ch.name])
    (out / "clusters.json").write_text(json.dumps(result.clusters, indent=1, sort_keys=True) + "\n")
    (out / "schema.json").write_text(json.dumps(result.schema.to_json(), indent=1) + "\n")


@dataclass
class DataDir:
    records: list[InteractionRecord]
    stores: dict[str, ContentEmbeddingStore]
    schema: Schema


def load_dataset(data_dir) -> DataDir:
    root = Path(data_dir)
    schema = Schema.from_json(json.loads((root / "schema.json").read_text()))
    records = load_interactions(root / "interactions.jsonl")
    schema.validate(records)
    stores = {}
    for ch in schema.channels:
        store = load_embeddings(root / (ch.file or f"{ch.name}.dlre"), ch.name)
        if len(store) and store.dim != ch.d_raw:
            raise DataFormatError(f"{ch.name}: file dim {store.dim} != schema d_raw {ch.d_raw}")
        stores[ch.name] = store
    return DataDir(records, stores, schema)


class MissingEmbeddingError(LookupError):
    pass


@dataclass
class EncodedData:
    """Integer-indexed view of a record list, ready for batched forward passes.

    Users and items are indexed by sorted id over the whole dataset, so the
    same index space serves train and test parts.
    """

    user_ids: list[str]
    item_ids: list[str]
    users: np.ndarray
    items: np.ndarray
    dense: np.ndarray
    sparse: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "EncodedData":
        return EncodedData(self.user_ids, self.item_ids, self.users[idx], self.items[idx],
                           self.dense[idx], self.sparse[idx], self.labels[idx])


def encode(records: Sequence[InteractionRecord], schema: Schema,
           user_ids: list[str] | None = None, item_ids: list[str] | None = None) -> EncodedData:
    user_ids = user_ids if user_ids is not None else sorted({r.user_id for r in records})
    item_ids = item_ids if item_ids is not None else sorted({r.item_id for r in records})
    u_index = {k: i for i, k in enumerate(user_ids)}
    i_index = {k: i for i, k in enumerate(item_ids)}
    n = len(records)
    dense = np.array([r.dense for r in records], dtype=np.float64).reshape(n, schema.dense_dim)
    sparse = np.array([r.sparse for r in records], dtype=np.int64).reshape(n, schema.sparse_len)
    return EncodedData(
        user_ids, item_ids,
        np.array([u_index[r.user_id] for r in records], dtype=np.int64),
        np.array([i_index[r.item_id] for r in records], dtype=np.int64),
        dense, sparse,
        np.array([r.label for r in records], dtype=np.int64),
    )


def channel_tables(stores: dict[str, ContentEmbeddingStore], schema: Schema,
                   user_ids: list[str], item_ids: list[str], channels: Iterable[str]) -> dict[str, np.ndarray]:
    """Raw vectors per channel, re-ordered to the encoded user/item index."""
    tables = {}
    by_name = {c.name: c for c in schema.channels}
    for name in channels:
        ids = user_ids if by_name[name].side == "user" else item_ids
        store = stores[name]
        missing = [k for k in ids if k not in store.index]
        if missing:
            raise MissingEmbeddingError(f"channel {name!r} has no embedding for id {missing[0]!r}")
        tables[name] = store.vectors[[store.index[k] for k in ids]].astype(np.float64)
    return tables
