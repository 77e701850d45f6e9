"""Name-bound layers over the functional ops.

Protocol: a layer is constructed with a unique name, registers its parameters
into a ParamStore once, and then

    y = layer.forward(store, x, cache)
    dx = layer.backward(store, cache, dy)

``cache`` is a plain dict owned by the caller; passing ``cache=None`` runs a
pure inference forward that stores nothing. backward pops its cache entry, so
calling it twice for one forward fails loudly instead of reusing stale state.
Parameter gradients accumulate into ``store.grads``.
"""

import numpy as np

from ..errors import StateError
from . import functional as F


def fan_in_uniform(stream, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init from a NoiseStream."""
    bound = 1.0 / np.sqrt(fan_in)
    return np.asarray(stream.uniform(shape, -bound, bound), dtype=np.float64)


class _Layer:
    def __init__(self, name: str):
        self.name = name

    def _stash(self, cache, value):
        if cache is None:
            return
        if self.name in cache:
            raise StateError(f"layer {self.name!r} used twice in one forward")
        cache[self.name] = value

    def _fetch(self, cache):
        if cache is None or self.name not in cache:
            raise StateError(f"backward before forward for layer {self.name!r}")
        return cache.pop(self.name)


class Conv2d(_Layer):
    def __init__(self, name: str, cin: int, cout: int, ksize: int = 3,
                 zero_init: bool = False):
        super().__init__(name)
        self.cin, self.cout, self.ksize = cin, cout, ksize
        self.zero_init = zero_init

    def register(self, store, rng) -> None:
        shape = (self.cout, self.cin, self.ksize, self.ksize)
        if self.zero_init:
            w = np.zeros(shape)
        else:
            w = fan_in_uniform(rng, shape, self.cin * self.ksize * self.ksize)
        store.add(self.name + ".w", w)
        store.add(self.name + ".b", np.zeros(self.cout))

    def forward(self, store, x, cache=None):
        self._stash(cache, x)
        return F.conv2d(x, store.get(self.name + ".w"), store.get(self.name + ".b"))

    def backward(self, store, cache, dy, need_dx: bool = True):
        x = self._fetch(cache)
        dx, dw, db = F.conv2d_backward(x, store.get(self.name + ".w"), dy,
                                       need_dx=need_dx)
        store.accumulate(self.name + ".w", dw)
        store.accumulate(self.name + ".b", db)
        return dx


class GroupNorm(_Layer):
    def __init__(self, name: str, channels: int, groups: int):
        super().__init__(name)
        self.channels, self.groups = channels, groups

    def register(self, store, rng) -> None:
        store.add(self.name + ".g", np.ones(self.channels))
        store.add(self.name + ".b", np.zeros(self.channels))

    def forward(self, store, x, cache=None):
        y, xhat, inv_std = F.group_norm(x, store.get(self.name + ".g"),
                                        store.get(self.name + ".b"), self.groups)
        self._stash(cache, (xhat, inv_std))
        return y

    def backward(self, store, cache, dy):
        xhat, inv_std = self._fetch(cache)
        dx, dg, db = F.group_norm_backward(dy, xhat, inv_std,
                                           store.get(self.name + ".g"), self.groups)
        store.accumulate(self.name + ".g", dg)
        store.accumulate(self.name + ".b", db)
        return dx


class SiLU(_Layer):
    def register(self, store, rng) -> None:
        pass

    def forward(self, store, x, cache=None):
        self._stash(cache, x)
        return F.silu(x)

    def backward(self, store, cache, dy):
        return F.silu_backward(self._fetch(cache), dy)


class Dense(_Layer):
    def __init__(self, name: str, fin: int, fout: int, zero_init: bool = False):
        super().__init__(name)
        self.fin, self.fout = fin, fout
        self.zero_init = zero_init

    def register(self, store, rng) -> None:
        if self.zero_init:
            w = np.zeros((self.fout, self.fin))
        else:
            w = fan_in_uniform(rng, (self.fout, self.fin), self.fin)
        store.add(self.name + ".w", w)
        store.add(self.name + ".b", np.zeros(self.fout))

    def forward(self, store, x, cache=None):
        self._stash(cache, x)
        return F.dense(x, store.get(self.name + ".w"), store.get(self.name + ".b"))

    def backward(self, store, cache, dy):
        x = self._fetch(cache)
        dx, dw, db = F.dense_backward(x, store.get(self.name + ".w"), dy)
        store.accumulate(self.name + ".w", dw)
        store.accumulate(self.name + ".b", db)
        return dx


class AvgPool2(_Layer):
    def register(self, store, rng) -> None:
        pass

    def forward(self, store, x, cache=None):
        return F.avgpool2(x)

    def backward(self, store, cache, dy):
        return F.avgpool2_backward(dy)


class UpsampleNearest2(_Layer):
    def register(self, store, rng) -> None:
        pass

    def forward(self, store, x, cache=None):
        return F.upsample_nearest2(x)

    def backward(self, store, cache, dy):
        return F.upsample_nearest2_backward(dy)
