import numpy as np


def fd_grad(f, x, idx, eps=1e-6):
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad(f, x, grad, rng, n=20, eps=1e-6, tol=1e-4):
    """Central differences at ``n`` random entries; returns the worst relative error."""
    worst = 0.0
    for flat in rng.choice(x.size, size=min(n, x.size), replace=False):
        idx = np.unravel_index(int(flat), x.shape)
        worst = max(worst, rel_err(float(grad[idx]), fd_grad(f, x, idx, eps)))
    assert worst <= tol, worst
    return worst


def random_segmentation(rng, h, w, n):
    """Arbitrary (possibly disconnected) labelling with every label used."""
    from spcaps.slic import Segmentation

    n = min(n, h * w)
    labels = rng.integers(0, n, (h, w))
    labels.ravel()[:n] = np.arange(n)
    return Segmentation(labels, n)
