"""Parameter store, gradient accumulation, Adam, and gradient clipping.

Parameters are named float64 arrays. Gradients accumulate into a parallel
dict (callers zero them per step). Iteration everywhere is in sorted-name
order so that optimizer math and checkpoint bytes never depend on insertion
order.
"""

import numpy as np

from ..errors import NumericError, ShapeError, StateError


class ParamStore:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise StateError(f"parameter {name!r} registered twice")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def get(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise StateError(f"unknown parameter {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        g = self.grads.get(name)
        if g is None:
            raise StateError(f"gradient for unknown parameter {name!r}")
        if g.shape != grad.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape "
                             f"{g.shape} for {name!r}")
        g += grad

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        if set(params) != set(self.params):
            missing = set(self.params) - set(params)
            extra = set(params) - set(self.params)
            raise StateError(f"parameter set mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, value in params.items():
            if value.shape != self.params[name].shape:
                raise ShapeError(f"shape mismatch for {name!r}: "
                                 f"{value.shape} != {self.params[name].shape}")
            self.params[name][...] = value


def grad_norm(store: ParamStore) -> float:
    total_sq = 0.0
    for name in store.names():
        g = store.grads[name]
        total_sq += float(np.sum(g * g))
    norm = float(np.sqrt(total_sq))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    return norm


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    norm = grad_norm(store)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in store.grads.values():
        g *= scale
    return scale


class AdamState:
    """Adam moments plus the hyperparameters they belong to."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One Adam update with bias correction, in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in store.names():
        g = store.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        store.params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
