"""Central finite-difference verification of analytic gradients."""

import numpy as np

from .autograd import Tensor, no_grad
from .rng import make_rng


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _named(params):
    return params.named_tensors() if hasattr(params, "named_tensors") else dict(params)


def _cast(params, dtype):
    if hasattr(params, "astype"):
        return params.astype(dtype)
    return {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, dtype=dtype) for k, t in params.items()}


def finite_difference_check(fn, params, h=1e-5, max_coords=None, seed=0, numeric_dtype=None, return_details=False):
    """Largest relative error between backprop and central differences.

    ``fn(params)`` returns a scalar loss tensor; ``params`` is either a
    mapping of name -> leaf tensor or an object exposing ``named_tensors()``.
    Each probed coordinate is set to ``theta + h`` and ``theta - h`` and then
    restored exactly; the numeric slope is ``(f+ - f-) / 2h`` and the error
    per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``max_coords`` set, at most that many coordinates per tensor are
    probed, chosen by a seeded draw; by default all are.

    ``numeric_dtype`` (e.g. ``np.longdouble``) evaluates the difference
    quotients on a cast copy of ``params``.  Gradients that vanish
    identically, such as a key bias under softmax shift invariance, otherwise
    surface as float64 roundoff of order 1e-10 against the 1e-8 floor.
    """
    named = _named(params)
    for t in named.values():
        t.zero_grad()
    fn(params).backward()
    analytic = {k: t.grad.copy() for k, t in named.items()}

    probe = params if numeric_dtype is None else _cast(params, numeric_dtype)
    probe_named = _named(probe)
    rng = make_rng(seed, 99)
    worst = 0.0
    details = {}
    with no_grad():
        for name, t in probe_named.items():
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            num = np.empty(coords.size, dtype=np.float64)
            for n, idx in enumerate(coords):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = fn(probe).data
                flat[idx] = orig - h
                fm = fn(probe).data
                flat[idx] = orig
                num[n] = (fp - fm) / (2 * flat.dtype.type(h))
            a = analytic[name].reshape(-1)[coords]
            err = float(relative_error(a, num).max()) if coords.size else 0.0
            details[name] = err
            worst = max(worst, err)
    return (worst, details) if return_details else worst
