"""Central-difference gradient verification.

Used by tests and by the acceptance gate: run the caller's forward+backward
once to collect analytic gradients, then probe parameters one coordinate at a
time with (f(p+h) - f(p-h)) / 2h and compare. The relative error metric is

    |analytic - numeric| / (|analytic| + 1e-8)
"""

import numpy as np

from ..errors import NumericError
from ..rng import NoiseStream
from .store import ParamStore


def finite_diff_check(store: ParamStore, forward_backward, forward_only,
                      h: float = 1e-4,
                      max_coords_per_param: int | None = None,
                      stream: NoiseStream | None = None) -> dict:
    """Compare analytic gradients to central differences.

    forward_backward(): computes the loss with current params, accumulates
    gradients into the store, returns the scalar loss.
    forward_only(): computes the same loss without touching gradients.

    When a parameter has more coordinates than ``max_coords_per_param``, a
    seeded random subset is probed (pass ``stream``).

    Returns {"max_rel_err": float, "per_param": {name: rel_err}, "coords": n}.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step size {h} outside [1e-6, 1e-3]")
    store.zero_grads()
    base = forward_backward()
    if not np.isfinite(base):
        raise NumericError(f"non-finite loss {base!r} in gradient check")
    analytic = {k: v.copy() for k, v in store.grads.items()}

    per_param: dict[str, float] = {}
    probed = 0
    worst = 0.0
    for name in store.names():
        flat = store.params[name].reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if stream is None:
                raise ValueError("sampling coordinates needs a stream")
            idx = np.unique(stream.split("fd", name).integers(0, n, size=max_coords_per_param))
        else:
            idx = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            f_plus = forward_only()
            flat[i] = keep - h
            f_minus = forward_only()
            flat[i] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("non-finite loss while probing "
                                   f"{name!r}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + 1e-8)
            worst_here = max(worst_here, err)
            probed += 1
        per_param[name] = worst_here
        worst = max(worst, worst_here)
    return {"max_rel_err": worst, "per_param": per_param, "coords": probed}
