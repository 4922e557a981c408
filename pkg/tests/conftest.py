import numpy as np
import pytest

from mention_nmt import tensor as T


@pytest.fixture(autouse=True)
def finite_checks():
    """Run the whole suite with NaN/Inf detection on every op."""
    T.set_finite_checks(True)
    yield
    T.set_finite_checks(False)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(build_loss, param, eps=1e-5):
    """Central finite differences of ``build_loss()`` w.r.t. every entry
    of ``param.data``.  The loss must be rebuilt from scratch on each
    call and must be a deterministic function of the parameter values.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = build_loss().item()
        flat[i] = keep - eps
        lo = build_loss().item()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_op_grads(fn, arrays, tol=1e-6, eps=1e-5, seed=0):
    """Finite-difference check of an op built by ``fn(*tensors)``.

    The op output is contracted to a scalar against a fixed random
    projection so arbitrary output shapes are covered.
    """
    rng = np.random.default_rng(seed)
    params = [T.Tensor(np.array(a, dtype=np.float64)) for a in arrays]
    proj = None

    def build():
        nonlocal proj
        out = fn(*params)
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return T.tsum(T.mul(out, proj))

    loss = build()
    loss.backward()
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(build, p, eps=eps)
        err = rel_err(analytic, numeric).max()
        assert err < tol, f"gradient mismatch: max rel err {err:.3g}"
        p.zero_grad()
