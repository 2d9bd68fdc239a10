"""Central finite-difference checks for every autodiff op and the full training loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import OPS, Tensor

STEP = 1e-5
OP_TOL = 1e-6
LOSS_TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return float(diff / scale) if scale > 1e-12 else float(diff)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_function(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> float:
    """Worst relative error over the inputs of a scalar-valued ``fn``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(fn(*leaves))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = grads.get(leaf, np.zeros_like(arr))
        numeric = numeric_grad(lambda: fn(*[Tensor(a) for a in arrays]).item(), arr)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random projection to a scalar so every output element is checked
    return ad.sum(ad.mul(out, rng.uniform(-1, 1, size=out.shape)))


def op_case(name: str, rng: np.random.Generator) -> tuple[Callable[..., Tensor], list[np.ndarray]]:
    """A random scalar-valued function exercising op ``name`` and its inputs in [-2, 2]."""
    u = lambda *shape: rng.uniform(-2, 2, size=shape)  # noqa: E731
    w = np.random.default_rng(rng.integers(2**32))

    def reduce_(out):
        return _weighted(out, np.random.default_rng(7))

    if name == "matmul":
        return (lambda a, b: reduce_(ad.matmul(a, b))), [u(3, 4), u(4, 2)]
    if name == "add":
        return (lambda a, b, c: reduce_(ad.add(ad.add(a, b), c))), [u(3, 4), u(3, 4), u(4)]
    if name == "mul":
        return (lambda a, b: reduce_(ad.mul(a, b))), [u(3, 4), u(3, 4)]
    if name == "scale":
        f = float(u(1)[0])
        return (lambda a: reduce_(ad.scale(a, f))), [u(5)]
    if name == "neg":
        return (lambda a: reduce_(ad.neg(a))), [u(2, 3)]
    if name == "relu":
        return (lambda a: reduce_(ad.relu(a))), [_away_from_zero(u(4, 3))]
    if name == "sigmoid":
        return (lambda a: reduce_(ad.sigmoid(a))), [u(6)]
    if name == "exp":
        return (lambda a: reduce_(ad.exp(a))), [u(6)]
    if name == "log":
        return (lambda a: reduce_(ad.log(a))), [np.abs(u(6)) + 0.1]
    if name == "softplus":
        return (lambda a: reduce_(ad.softplus(a))), [u(6)]
    if name == "sum":
        return (lambda a: ad.add(reduce_(ad.sum(a, axis=0)), ad.add(reduce_(ad.sum(a, axis=1)), ad.sum(a)))), [u(3, 4)]
    if name == "mean":
        return (lambda a: ad.add(reduce_(ad.mean(a, axis=1)), ad.mean(a))), [u(3, 4)]
    if name == "logsumexp":
        return (lambda a: ad.add(reduce_(ad.logsumexp(a, axis=1)),
                                 ad.add(reduce_(ad.logsumexp(a, axis=0)), ad.logsumexp(a)))), [u(3, 5)]
    if name == "gather_rows":
        idx = w.integers(0, 4, size=7)
        return (lambda t: reduce_(ad.gather_rows(t, idx))), [u(4, 3)]
    if name == "concat":
        return (lambda a, b: reduce_(ad.concat([a, b]))), [u(3, 2), u(3, 4)]
    if name == "reshape":
        return (lambda a: reduce_(ad.reshape(a, (4, 3)))), [u(2, 6)]
    if name == "normalize_rows":
        return (lambda a: reduce_(ad.normalize_rows(a))), [u(3, 4)]
    if name == "dropout":
        keep = (w.random((4, 5)) >= 0.3).astype(float)
        return (lambda a: reduce_(ad.Dropout.apply(a, keep=keep, rate=0.3))), [u(4, 5)]
    raise KeyError(f"no gradient-check case for op {name!r}")


@dataclass
class GradcheckReport:
    worst: dict[str, float] = field(default_factory=dict)
    tolerance: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.worst.items() if not v < self.tolerance[k]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [f"{'PASS' if self.worst[k] < self.tolerance[k] else 'FAIL'}  {k:<16} worst rel err {self.worst[k]:.3e}"
                f"  (tol {self.tolerance[k]:.0e})" for k in self.worst]


def check_ops(seeds: range) -> dict[str, float]:
    worst = {}
    for name in OPS:
        errs = []
        for s in seeds:
            fn, arrays = op_case(name, np.random.default_rng([s, len(name)]))
            errs.append(check_function(fn, arrays))
        worst[name] = max(errs)
    return worst


def toy_problem(seed: int):
    """Six users, six items, tiny dimensions, all three channels and both contrastive sides."""
    from .dataio import SynthConfig, DataDir, synthesize
    from .model import ChannelConfig, ModelConfig
    from .objectives import LossConfig
    from .swing import build_graph, top_k_neighbors
    from .trainer import TrainConfig, prepare

    aff = [[1.0, 0.0], [0.0, 1.0]]
    synth = synthesize(SynthConfig(user_clusters=2, item_clusters=2, users=6, items=6, affinity=aff,
                                   noise=0.3, d_raw=6, interactions_per_user=4, seed=seed,
                                   vocab=10, sparse_len=3, home_exposure=0.5))
    g = build_graph(synth.records)
    channels = [ChannelConfig(c.name, c.d_raw, [5]) for c in synth.schema.channels]
    mcfg = ModelConfig(dense_dim=4, vocab=10, sparse_len=3, d_int=4, dense_hidden=[5], top_hidden=[6],
                       channels=channels, seed=seed)
    cfg = TrainConfig(model=mcfg, loss=LossConfig(K=1, tau=0.5, w1=0.3, w2=0.7), test_fraction=0.25, split_seed=seed)
    data = prepare(DataDir(synth.records, synth.stores, synth.schema), cfg,
                   top_k_neighbors(g, "user", 2), top_k_neighbors(g, "item", 2))
    return cfg, data


def check_composite(seed: int) -> dict[str, float]:
    """Finite differences of the composite loss against backward, one entry per parameter tensor."""
    from .model import DLRM
    from .trainer import batch_objective, draw_samples

    cfg, data = toy_problem(seed)
    model = DLRM(cfg.model)
    batch = data.train
    samples = draw_samples(batch, data, cfg, 0, 0)

    def loss() -> ad.Tensor:
        return batch_objective(model, batch, data.tables, cfg.loss, 2.0, samples, train=False)[0]

    grads = model.grads_by_name(ad.backward(loss()))
    out = {}
    for name, arr in model.params.items():
        numeric = numeric_grad(lambda: loss().item(), arr)
        out[name] = rel_error(grads.get(name, np.zeros_like(arr)), numeric)
    return out


def run_gradcheck(seed: int = 0, n_seeds: int = 20, composite_seeds: int | None = None) -> GradcheckReport:
    seeds = range(seed, seed + n_seeds)
    report = GradcheckReport()
    for name, err in check_ops(seeds).items():
        report.worst[name] = err
        report.tolerance[name] = OP_TOL
    worst = 0.0
    for s in range(seed, seed + (composite_seeds if composite_seeds is not None else n_seeds)):
        worst = max(worst, max(check_composite(s).values()))
    report.worst["composite_loss"] = worst
    report.tolerance["composite_loss"] = LOSS_TOL
    return report
