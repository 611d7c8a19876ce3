import numpy as np
import pytest

from mind_eeg import autodiff as ad
from mind_eeg.config import ModelConfig


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def grad_check(fn, inputs, seed=0, eps=1e-5):
    """Largest relative error between tape and central-difference gradients.

    ``fn(*inputs)`` may return any shape; it is contracted with a fixed random
    projection so every output entry contributes.
    """
    inputs = [x if isinstance(x, ad.Tensor) else ad.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*inputs)
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar():
        return float(np.sum(fn(*inputs).data * proj))

    ad.get_tape().clear()
    for x in inputs:
        x.grad = None
    loss = (fn(*inputs) * proj).sum()
    ad.backward(loss)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        worst = max(worst, rel_err(analytic, ad.numerical_grad(scalar, x, eps=eps)))
    return worst


def small_config(**kw) -> ModelConfig:
    base = dict(n=12, d=3, classes=3, k_global=4, k_intra=5, k_inter=6, embed_dim=8,
                global_out=6, intra_out=6, inter_out=7, inter_bands=3, head_hidden=(8, 6), epochs=2,
                batch_size=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, title, detail); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {title}  [{detail}]")
