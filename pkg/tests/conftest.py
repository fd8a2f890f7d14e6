"""Shared helpers: central finite differences and gradient comparison."""

import numpy as np
import pytest

from cetc.autodiff import GradTape


def fd_gradient(fn, arr: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``arr``.

    Perturbs ``arr`` in place; ``coords`` limits the check to a subset of
    entries (full gradient by default).  Returns an array shaped like the
    coordinate list.
    """
    if coords is None:
        coords = list(np.ndindex(*arr.shape))
    out = np.empty(len(coords))
    for n, c in enumerate(coords):
        old = arr[c]
        arr[c] = old + h
        fp = fn()
        arr[c] = old - h
        fm = fn()
        arr[c] = old
        out[n] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(make_loss, tensors, tol: float = 1e-4, h: float = 1e-5,
                    atol: float = 1e-9, max_coords=None, rng=None) -> None:
    """Compare taped gradients of ``make_loss()`` against finite differences.

    ``tensors`` maps a name to a Tensor whose gradient is checked; with
    ``max_coords`` set, large tensors are checked at a random coordinate
    subsample instead of exhaustively.  Each coordinate must satisfy
    ``|analytic - numeric| <= atol + tol * max(|analytic|, |numeric|)``:
    the relative bound is the real criterion, the absolute floor only
    covers finite-difference roundoff on near-zero entries (the FD noise
    floor at h=1e-5 in 64-bit sits around 1e-11).
    """
    for t in tensors.values():
        t.zero_grad()
    with GradTape() as tape:
        loss = make_loss()
        tape.backward(loss)
    fn = lambda: float(make_loss().data)
    for name, t in tensors.items():
        assert t.grad is not None, f"{name}: no gradient accumulated"
        coords = list(np.ndindex(*t.data.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        numeric = fd_gradient(fn, t.data, h=h, coords=coords)
        analytic = np.array([t.grad[c] for c in coords])
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        bad = diff > atol + tol * scale
        if bad.any():
            i = int(np.argmax(diff - tol * scale))
            raise AssertionError(
                f"{name}: gradient mismatch at {coords[i]}: analytic "
                f"{analytic[i]:.6e} vs numeric {numeric[i]:.6e} "
                f"(diff {diff[i]:.3e}, tol {tol}, atol {atol})"
            )


def perturb_parameters(tensors, rng, scale: float = 0.05) -> None:
    """Move parameters off degenerate init points before finite differences.

    Freshly built networks put many pre-activations exactly on the ReLU
    kink (zero biases + zero-padded, ReLU-sparse inputs), where central
    differences are one-sided and meaningless.  A small random offset
    makes the evaluation point generic.
    """
    values = tensors.values() if hasattr(tensors, "values") else tensors
    for t in values:
        t.data += scale * rng.standard_normal(t.data.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
