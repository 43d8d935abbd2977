import numpy as np

from dfq.tensor import Tape, Tensor


def fd_grad(fn, x0, step=1e-5):
    """Central finite-difference gradient of scalar fn at x0 (ndarray in, float out)."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x0)
        flat[i] = orig - step
        fm = fn(x0)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def analytic_grad(fn, x0):
    """Tape gradient of scalar ``fn(Tensor)`` at x0."""
    t = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = fn(t)
        tape.backward(loss)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def check_grad(fn, x0, step=1e-5, rtol=1e-4):
    """Compare tape gradient against central differences; returns max rel error."""
    num = fd_grad(lambda x: float(fn(Tensor(np.array(x))).data), np.array(x0, dtype=np.float64), step)
    ana = analytic_grad(fn, x0)
    denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-6)
    err = float(np.max(np.abs(num - ana) / denom))
    assert err < rtol, f"gradient mismatch: max rel err {err:.3g} >= {rtol}"
    return err
