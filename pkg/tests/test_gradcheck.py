import numpy as np
import pytest

from dlrrec import autodiff as ad
from dlrrec import gradcheck
from dlrrec.autodiff import OPS, Tensor

from conftest import fd_grad, rel_err


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_100_seeds(name):
    worst = 0.0
    for seed in range(100):
        fn, arrays = gradcheck.op_case(name, np.random.default_rng([seed, 99]))
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        grads = ad.backward(fn(*leaves))
        for lf, arr in zip(leaves, arrays):
            num = fd_grad(lambda: fn(*[Tensor(a) for a in arrays]).item(), arr)
            worst = max(worst, rel_err(grads.get(lf, np.zeros_like(arr)), num))
    assert worst < 1e-6


def test_every_op_has_a_case():
    rng = np.random.default_rng(0)
    for name in OPS:
        gradcheck.op_case(name, rng)


def test_composite_loss_gradient_one_seed():
    errs = gradcheck.check_composite(0)
    assert max(errs.values()) < 1e-4
    # every parameter tensor is checked, including all three projection heads
    assert any(k.startswith("proj.item-image") for k in errs)


def test_corrupted_backward_is_caught(monkeypatch):
    monkeypatch.setattr(ad.Sigmoid, "backward", staticmethod(lambda ctx, grad: (grad * 0.25,)))
    report = gradcheck.run_gradcheck(0, n_seeds=2, composite_seeds=0)
    assert not report.ok
    assert report.failures == ["sigmoid"]
