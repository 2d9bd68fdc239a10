"""Co-training loop, evaluation, early stopping and report tables."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataio import DataDir, EncodedData, channel_tables, encode, make_batches, split
from .model import DLRM, MASK_LABELS, ModelConfig, save_checkpoint
from .objectives import (ContrastiveBatch, LossBreakdown, LossConfig, NeighborIndex, composite_loss,
                         infonce, sample_contrastive, weighted_bce)
from .swing import SimilarityGraph

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 1000
    min_epochs: int = 300
    patience: int = 50
    repeats: int = 5
    seed: int = 0
    split_seed: int = 0
    test_fraction: float = 0.2
    threshold: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_json(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.patience < 1 or self.min_epochs < 0 or not self.learning_rate > 0 or self.max_epochs < 1:
            raise ValueError("need patience >= 1, min_epochs >= 0, learning_rate > 0, max_epochs >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, t: int,
              lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return out


@dataclass
class EvalResult:
    accuracy: float
    fp_rate: float
    confusion: dict[str, int]
    # True when the set had no actual negatives and fp_rate was defined as 0
    no_negatives: bool = False

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "fp_rate": self.fp_rate, "confusion": self.confusion,
                "no_negatives": self.no_negatives}


def confusion_metrics(labels: np.ndarray, predicted: np.ndarray) -> EvalResult:
    labels = np.asarray(labels).astype(bool)
    predicted = np.asarray(predicted).astype(bool)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty record set")
    tp = int(np.sum(labels & predicted))
    tn = int(np.sum(~labels & ~predicted))
    fp = int(np.sum(~labels & predicted))
    fn = int(np.sum(labels & ~predicted))
    negatives = fp + tn
    fp_rate = fp / negatives if negatives else 0.0
    return EvalResult((tp + tn) / labels.size, fp_rate, {"tp": tp, "fp": fp, "tn": tn, "fn": fn}, negatives == 0)


def evaluate(model: DLRM, data: EncodedData, tables: dict[str, np.ndarray], threshold: float = 0.5) -> EvalResult:
    probs = model.predict_proba(data, tables)
    return confusion_metrics(data.labels, probs >= threshold)


@dataclass
class EarlyStopping:
    """Track the best (lowest) value; stop once ``patience`` epochs pass without a
    strict improvement, counting no earlier than ``min_epochs``."""

    min_epochs: int = 300
    patience: int = 50
    best: float = math.inf
    best_epoch: int = -1

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch = value, epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch >= max(self.best_epoch, self.min_epochs) + self.patience


@dataclass
class TrainingData:
    schema: object
    train: EncodedData
    test: EncodedData
    tables: dict[str, np.ndarray]
    user_index: NeighborIndex | None
    item_index: NeighborIndex | None


def prepare(data: DataDir, cfg: TrainConfig, user_sims: SimilarityGraph | None,
            item_sims: SimilarityGraph | None) -> TrainingData:
    parts = split(data.records, cfg.test_fraction, cfg.split_seed, data.schema)
    user_ids = sorted({r.user_id for r in data.records})
    item_ids = sorted({r.item_id for r in data.records})
    tables = channel_tables(data.stores, data.schema, user_ids, item_ids, cfg.model.active_channels)
    return TrainingData(
        data.schema,
        encode(parts.train, data.schema, user_ids, item_ids),
        encode(parts.test, data.schema, user_ids, item_ids),
        tables,
        NeighborIndex.from_graph(user_sims, user_ids) if user_sims is not None else None,
        NeighborIndex.from_graph(item_sims, item_ids) if item_sims is not None else None,
    )


def contrastive_channel(cfg: ModelConfig, side: str) -> str | None:
    """First active content channel on ``side``; its projection output is the contrastive embedding."""
    for name in cfg.active_channels:
        if cfg.channel(name).side == side:
            return name
    return None


def contrastive_term(model: DLRM, cb: ContrastiveBatch, table: np.ndarray, channel: str,
                     loss_cfg: LossConfig) -> ad.Tensor | None:
    """InfoNCE for one sampled batch, using dropout-free projections."""
    if len(cb) == 0:
        return None
    needed, inverse = np.unique(
        np.concatenate([cb.anchors, np.column_stack([cb.positives, cb.negatives]).reshape(-1)]),
        return_inverse=True)
    z = model.project(channel, table[needed], train=False)
    n = len(cb)
    anchors = ad.gather_rows(z, inverse[:n])
    candidates = ad.gather_rows(z, inverse[n:])
    return infonce(anchors, candidates, loss_cfg.tau, loss_cfg.normalize)


def batch_objective(model: DLRM, batch: EncodedData, tables: dict[str, np.ndarray], loss_cfg: LossConfig,
                    neg_weight: float, samples: dict[str, ContrastiveBatch] | None,
                    train: bool = True, rng: np.random.Generator | None = None) -> tuple[ad.Tensor, LossBreakdown]:
    """Forward a batch and assemble the composite loss from pre-drawn contrastive samples."""
    out = model.forward(batch, tables, train=train, rng=rng)
    l_rec = weighted_bce(out.logits, batch.labels, loss_cfg.pos_class_weight, neg_weight)
    terms = {"user": None, "item": None}
    for side, cb in (samples or {}).items():
        channel = contrastive_channel(model.cfg, side)
        if channel is not None:
            terms[side] = contrastive_term(model, cb, tables[channel], channel, loss_cfg)
    total, br = composite_loss(l_rec, terms["item"], terms["user"], loss_cfg)
    if samples:
        br.n_item_anchors = len(samples["item"]) if "item" in samples and terms["item"] is not None else 0
        br.n_user_anchors = len(samples["user"]) if "user" in samples and terms["user"] is not None else 0
    return total, br


def draw_samples(batch: EncodedData, data: TrainingData, cfg: TrainConfig, epoch: int, b: int) -> dict[str, ContrastiveBatch]:
    samples = {}
    for code, (side, index, entities) in enumerate(
            (("user", data.user_index, batch.users), ("item", data.item_index, batch.items)), start=1):
        if index is None or contrastive_channel(cfg.model, side) is None:
            continue
        rng = np.random.default_rng([cfg.seed, epoch, b, code])
        samples[side] = sample_contrastive(side, entities, index, cfg.loss.K, rng)
    return samples


@dataclass
class EpochMetrics:
    epoch: int
    loss: dict[str, float]
    train_accuracy: float
    test_accuracy: float
    test_fp_rate: float
    wall_time: float = 0.0

    def to_json(self) -> dict:
        # wall time stays out of result files so reports are reproducible byte-for-byte
        out = asdict(self)
        del out["wall_time"]
        return out


@dataclass
class RunReport:
    config: dict
    epochs: list[EpochMetrics]
    best_epoch: int
    best_fp_rate: float
    best_accuracy: float
    checkpoint: str | None
    stop_reason: str
    best_params: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "epochs": [e.to_json() for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_fp_rate": self.best_fp_rate,
            "best_accuracy": self.best_accuracy,
            "checkpoint": self.checkpoint,
            "stop_reason": self.stop_reason,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


BatchHook = Callable[[int, int, LossBreakdown], None]


def train(cfg: TrainConfig, data: TrainingData, out_dir=None, on_batch: BatchHook | None = None) -> RunReport:
    """Train until early stopping or ``max_epochs``; the best model is the one
    with the lowest test false-positive rate."""
    model = DLRM(cfg.model)
    n_pos = int(data.train.labels.sum())
    n_neg = len(data.train) - n_pos
    neg_weight = cfg.loss.neg_class_weight
    if neg_weight is None:
        neg_weight = n_pos / n_neg if n_neg else 1.0
    state = AdamState()
    stopper = EarlyStopping(cfg.min_epochs, cfg.patience)
    history: list[EpochMetrics] = []
    best_params = None
    best_acc = float("nan")
    stop_reason = "max_epochs"
    t = 0
    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        sums = np.zeros(4)
        batches = make_batches(len(data.train), cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            batch = data.train.subset(idx)
            samples = draw_samples(batch, data, cfg, epoch, b) if cfg.loss.contrastive else None
            rng = np.random.default_rng([cfg.seed, epoch, b, 0])
            total, br = batch_objective(model, batch, data.tables, cfg.loss, neg_weight, samples, True, rng)
            for term in ("L_rec", "L_ii", "L_uu", "L_total"):
                if not math.isfinite(getattr(br, term)):
                    raise NonFiniteLossError(f"epoch {epoch} batch {b}: {term} = {getattr(br, term)}")
            if on_batch is not None:
                on_batch(epoch, b, br)
            sums += (br.L_rec, br.L_ii, br.L_uu, br.L_total)
            grads = model.grads_by_name(ad.backward(total))
            t += 1
            model.params = adam_step(model.params, grads, state, t, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

        train_eval = evaluate(model, data.train, data.tables, cfg.threshold)
        test_eval = evaluate(model, data.test, data.tables, cfg.threshold)
        mean = sums / len(batches)
        metrics = EpochMetrics(epoch, dict(zip(("L_rec", "L_ii", "L_uu", "L_total"), mean.tolist())),
                               train_eval.accuracy, test_eval.accuracy, test_eval.fp_rate,
                               time.perf_counter() - start)
        history.append(metrics)
        if stopper.update(epoch, test_eval.fp_rate):
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_acc = test_eval.accuracy
        log.info("epoch %d loss %.5f train acc %.4f test acc %.4f test fp %.4f (%.2fs)", epoch,
                 mean[3], train_eval.accuracy, test_eval.accuracy, test_eval.fp_rate, metrics.wall_time)
        if stopper.should_stop(epoch):
            stop_reason = "early_stopping"
            break

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best_params, out / "best.ckpt")
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1) + "\n")
        ckpt = "best.ckpt"
    report = RunReport(cfg.to_json(), history, stopper.best_epoch, stopper.best, best_acc, ckpt,
                       stop_reason, best_params)
    if out_dir is not None:
        report.save(Path(out_dir) / "report.json")
    return report


def with_seed(cfg: TrainConfig, offset: int) -> TrainConfig:
    cfg = copy.deepcopy(cfg)
    return replace(cfg, seed=cfg.seed + offset, model=replace(cfg.model, seed=cfg.model.seed + offset))


def aggregate(reports: Sequence[RunReport]) -> dict:
    acc = np.array([r.best_accuracy for r in reports])
    fp = np.array([r.best_fp_rate for r in reports])
    return {
        "runs": len(reports),
        "accuracy": {"mean": float(acc.mean()), "min": float(acc.min()), "max": float(acc.max())},
        "fp_rate": {"mean": float(fp.mean()), "min": float(fp.min()), "max": float(fp.max())},
    }


def repeat_runs(cfg: TrainConfig, data: TrainingData, n: int | None = None, out_dir=None) -> tuple[list[RunReport], dict]:
    """``n`` runs seeded ``seed + 0 .. seed + n - 1`` and their aggregate."""
    n = cfg.repeats if n is None else n
    if n < 1:
        raise ValueError("need at least one run")
    reports = []
    for i in range(n):
        run_dir = Path(out_dir) / f"run-{i}" if out_dir is not None else None
        reports.append(train(with_seed(cfg, i), data, run_dir))
    agg = aggregate(reports)
    if out_dir is not None:
        (Path(out_dir) / "aggregate.json").write_text(json.dumps(agg, indent=1) + "\n")
    return reports, agg


LOSS_LABELS = {"bce+contrastive": "BCE + Contr.", "bce": "BCE"}
# row order of the published comparison table
TABLE_ORDER = [("text", "bce+contrastive"), ("text", "bce"), ("image", "bce+contrastive"), ("image", "bce"),
               ("text+image", "bce+contrastive"), ("text+image", "bce")]


def loss_mode(cfg: LossConfig) -> str:
    return "bce+contrastive" if cfg.contrastive and (cfg.w1 > 0 or cfg.w2 > 0) else "bce"


def format_row(accuracy: float, fp_rate: float) -> str:
    return f"{100 * accuracy:.2f} | {100 * fp_rate:.2f}"


@dataclass
class Table:
    rows: list[dict]

    def to_markdown(self) -> str:
        lines = ["| Model | Loss | Acc. | FP | Runs |", "|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r['model']} | {r['loss']} | {format_row(r['accuracy'], r['fp_rate'])} | {r['runs']} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"rows": self.rows}


def emit_table(groups: Sequence[tuple[str, str, Sequence[RunReport]]]) -> Table:
    """One row per ``(mask, loss mode, reports)`` group, in the given order.

    Accuracy and FP rate are means of each run's best-epoch values.
    """
    rows = []
    for mask, mode, reports in groups:
        if not reports:
            log.warning("no runs for arm %s / %s; row omitted", mask, mode)
            continue
        agg = aggregate(reports)
        rows.append({
            "mask": mask,
            "loss_mode": mode,
            "model": MASK_LABELS.get(mask, mask),
            "loss": LOSS_LABELS.get(mode, mode),
            "accuracy": agg["accuracy"]["mean"],
            "fp_rate": agg["fp_rate"]["mean"],
            "runs": agg["runs"],
        })
    return Table(rows)
