"""Miniature conditional denoising network.

A 2-level encoder/decoder over (N, C, R, R) tensors: residual blocks with
group norm and SiLU, average-pool down, nearest up, skip concatenation, and a
zero-initialized output head so an untrained model predicts exactly zero.
Timestep conditioning enters as a per-channel bias in every residual block,
projected from a sinusoidal embedding of the normalized step index.
Conditioning images and (optionally) an inpainting mask with its known pixels
are concatenated onto the input as extra channels.

The forward/backward pair is hand-written; the layers module supplies the
per-layer gradients and this file only has to mirror the wiring in reverse.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import layers as L
from .numerics.store import ParamStore
from .rng import NoiseStream


@dataclass(frozen=True)
class ScoreNetConfig:
    resolution: int
    width: int = 16
    channels: int = 3
    cond_images: int = 0
    mask_channels: bool = False
    groups: int = 4
    temb_dim: int = 32

    def __post_init__(self):
        if self.resolution < 8 or self.resolution % 4:
            raise ConfigError(f"resolution {self.resolution} must be a multiple "
                              "of 4 and at least 8")
        if self.width % self.groups:
            raise ConfigError(f"width {self.width} not divisible by "
                              f"{self.groups} groups")
        if self.cond_images not in (0, 1, 2):
            raise ConfigError(f"cond_images must be 0, 1 or 2, got {self.cond_images}")
        if self.temb_dim % 2:
            raise ConfigError("temb_dim must be even")

    @property
    def in_channels(self) -> int:
        extra = self.channels * self.cond_images
        if self.mask_channels:
            extra += 1 + self.channels
        return self.channels + extra

    def to_meta(self) -> dict:
        return {
            "resolution": self.resolution, "width": self.width,
            "channels": self.channels, "cond_images": self.cond_images,
            "mask_channels": int(self.mask_channels), "groups": self.groups,
            "temb_dim": self.temb_dim,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ScoreNetConfig":
        def geti(key):
            return int(np.asarray(meta[key]).reshape(-1)[0])
        return cls(resolution=geti("resolution"), width=geti("width"),
                   channels=geti("channels"), cond_images=geti("cond_images"),
                   mask_channels=bool(geti("mask_channels")),
                   groups=geti("groups"), temb_dim=geti("temb_dim"))


def sinusoidal_embedding(c: np.ndarray, dim: int) -> np.ndarray:
    """(N,) normalized steps in [0, 1] -> (N, dim) sin/cos features."""
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    angles = c[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class ResBlock:
    """x + conv(act(norm(conv(act(norm(x))) + temb_bias)))-style residual."""

    def __init__(self, name: str, ch: int, groups: int, temb_dim: int):
        self.name = name
        self.norm_a = L.GroupNorm(name + ".na", ch, groups)
        self.act_a = L.SiLU(name + ".aa")
        self.conv_a = L.Conv2d(name + ".ca", ch, ch, 3)
        self.temb = L.Dense(name + ".t", temb_dim, ch)
        self.norm_b = L.GroupNorm(name + ".nb", ch, groups)
        self.act_b = L.SiLU(name + ".ab")
        self.conv_b = L.Conv2d(name + ".cb", ch, ch, 3)

    def register(self, store, stream):
        for layer in (self.norm_a, self.conv_a, self.temb, self.norm_b, self.conv_b):
            layer.register(store, stream.split(layer.name))
        self.act_a.register(store, stream)
        self.act_b.register(store, stream)

    def forward(self, store, x, temb, cache=None):
        u = self.norm_a.forward(store, x, cache)
        u = self.act_a.forward(store, u, cache)
        u = self.conv_a.forward(store, u, cache)
        u = u + self.temb.forward(store, temb, cache)[:, :, None, None]
        u = self.norm_b.forward(store, u, cache)
        u = self.act_b.forward(store, u, cache)
        u = self.conv_b.forward(store, u, cache)
        return x + u

    def backward(self, store, cache, dy):
        du = self.conv_b.backward(store, cache, dy)
        du = self.act_b.backward(store, cache, du)
        du = self.norm_b.backward(store, cache, du)
        self.temb.backward(store, cache, du.sum(axis=(2, 3)))
        du = self.conv_a.backward(store, cache, du)
        du = self.act_a.backward(store, cache, du)
        du = self.norm_a.backward(store, cache, du)
        return dy + du


class ScoreNet:
    def __init__(self, config: ScoreNetConfig):
        self.config = config
        w = config.width
        g = config.groups
        td = config.temb_dim
        cin = config.in_channels
        self.stem = L.Conv2d("stem", cin, w, 3)
        self.rb_e0 = ResBlock("e0", w, g, td)
        self.down0 = L.Conv2d("down0", w, 2 * w, 3)
        self.pool0 = L.AvgPool2("pool0")
        self.rb_e1 = ResBlock("e1", 2 * w, g, td)
        self.pool1 = L.AvgPool2("pool1")
        self.rb_mid = ResBlock("mid", 2 * w, g, td)
        self.up1 = L.UpsampleNearest2("up1")
        self.fuse1 = L.Conv2d("fuse1", 4 * w, 2 * w, 3)
        self.rb_d1 = ResBlock("d1", 2 * w, g, td)
        self.up0 = L.UpsampleNearest2("up0")
        self.fuse0 = L.Conv2d("fuse0", 3 * w, w, 3)
        self.rb_d0 = ResBlock("d0", w, g, td)
        self.head_norm = L.GroupNorm("head.n", w, g)
        self.head_act = L.SiLU("head.a")
        self.head = L.Conv2d("head.c", w, config.channels, 3, zero_init=True)

    def _blocks(self):
        return [self.stem, self.rb_e0, self.down0, self.pool0, self.rb_e1,
                self.pool1, self.rb_mid, self.up1, self.fuse1, self.rb_d1,
                self.up0, self.fuse0, self.rb_d0, self.head_norm,
                self.head_act, self.head]

    def register(self, store: ParamStore, stream: NoiseStream):
        for block in self._blocks():
            name = getattr(block, "name", block.__class__.__name__)
            block.register(store, stream.split(name))

    def forward(self, store, x_in, temb, cache=None):
        cfg = self.config
        if x_in.ndim != 4 or x_in.shape[1] != cfg.in_channels or \
                x_in.shape[2] != cfg.resolution or x_in.shape[3] != cfg.resolution:
            raise ShapeError(f"score net input {x_in.shape}, wanted "
                             f"(N, {cfg.in_channels}, {cfg.resolution}, "
                             f"{cfg.resolution})")
        h0 = self.stem.forward(store, x_in, cache)
        e0 = self.rb_e0.forward(store, h0, temb, cache)
        d0 = self.down0.forward(store, self.pool0.forward(store, e0, cache), cache)
        e1 = self.rb_e1.forward(store, d0, temb, cache)
        d1 = self.pool1.forward(store, e1, cache)
        m = self.rb_mid.forward(store, d1, temb, cache)
        u1 = self.up1.forward(store, m, cache)
        f1 = self.fuse1.forward(store, np.concatenate([u1, e1], axis=1), cache)
        r1 = self.rb_d1.forward(store, f1, temb, cache)
        u0 = self.up0.forward(store, r1, cache)
        f0 = self.fuse0.forward(store, np.concatenate([u0, e0], axis=1), cache)
        r0 = self.rb_d0.forward(store, f0, temb, cache)
        out = self.head_norm.forward(store, r0, cache)
        out = self.head_act.forward(store, out, cache)
        return self.head.forward(store, out, cache)

    def backward(self, store, cache, dout):
        w = self.config.width
        dr0 = self.head.backward(store, cache, dout)
        dr0 = self.head_act.backward(store, cache, dr0)
        dr0 = self.head_norm.backward(store, cache, dr0)
        df0 = self.rb_d0.backward(store, cache, dr0)
        dc0 = self.fuse0.backward(store, cache, df0)
        du0, de0_skip = dc0[:, :2 * w], dc0[:, 2 * w:]
        dr1 = self.up0.backward(store, cache, du0)
        df1 = self.rb_d1.backward(store, cache, dr1)
        dc1 = self.fuse1.backward(store, cache, df1)
        du1, de1_skip = dc1[:, :2 * w], dc1[:, 2 * w:]
        dm = self.up1.backward(store, cache, du1)
        dd1 = self.rb_mid.backward(store, cache, dm)
        de1 = self.pool1.backward(store, cache, dd1) + de1_skip
        dd0 = self.rb_e1.backward(store, cache, de1)
        dp0 = self.down0.backward(store, cache, dd0)
        de0 = self.pool0.backward(store, cache, dp0) + de0_skip
        dh0 = self.rb_e0.backward(store, cache, de0)
        self.stem.backward(store, cache, dh0, need_dx=False)


@dataclass
class Conditioning:
    """Per-sample conditioning bundle, everything in image space [0, 1].

    images: list of (C, R, R) arrays already at model resolution.
    mask/known: inpainting constraint channels ((R, R) bool, (C, R, R)).
    """
    images: list = field(default_factory=list)
    mask: np.ndarray | None = None
    known: np.ndarray | None = None


class ScoreModel:
    """A score network bound to its parameters, schedule and target."""

    def __init__(self, config: ScoreNetConfig, schedule, target, seed: int = 0,
                 store: ParamStore | None = None):
        from .diffusion import PredictionTarget  # local to dodge a cycle
        self.config = config
        self.schedule = schedule
        self.target = PredictionTarget(target) if isinstance(target, str) else target
        self.net = ScoreNet(config)
        self.store = store or ParamStore()
        if store is None:
            self.net.register(self.store, NoiseStream(seed))

    # ---- input assembly ------------------------------------------------

    def assemble_batch(self, x_t: np.ndarray, images: list,
                       mask: np.ndarray | None,
                       known: np.ndarray | None) -> np.ndarray:
        """Stack the model-space state with conditioning channels.

        x_t: (N, C, R, R) model space; images: list of (N, C, R, R) in [0,1];
        mask: (N, 1, R, R) in {0,1}; known: (N, C, R, R) in [0,1]. Images and
        known values are mapped to model space; known is zeroed outside the
        mask; the mask channel stays {0,1}.
        """
        cfg = self.config
        if len(images) != cfg.cond_images:
            raise ShapeError(f"model wants {cfg.cond_images} conditioning "
                             f"images, got {len(images)}")
        if cfg.mask_channels != (mask is not None):
            raise ShapeError("conditioning mask presence does not match config")
        parts = [x_t]
        want = (x_t.shape[0], cfg.channels, cfg.resolution, cfg.resolution)
        for img in images:
            if img.shape != want:
                raise ShapeError(f"conditioning image batch shape {img.shape}, "
                                 f"wanted {want}")
            parts.append(img * 2.0 - 1.0)
        if cfg.mask_channels:
            parts.append(mask)
            parts.append((known * 2.0 - 1.0) * mask)
        return np.ascontiguousarray(np.concatenate(parts, axis=1))

    def assemble(self, x_t: np.ndarray, cond: Conditioning | None) -> np.ndarray:
        """Single-conditioning variant of assemble_batch (broadcast over N)."""
        cond = cond or Conditioning()
        n = x_t.shape[0]

        def rep(arr):
            return np.broadcast_to(arr, (n,) + arr.shape).copy()

        images = [rep(img) for img in cond.images]
        mask = rep(cond.mask.astype(np.float64)[None]) if cond.mask is not None else None
        known = rep(cond.known) if cond.known is not None else None
        return self.assemble_batch(x_t, images, mask, known)

    def _temb(self, t, n: int) -> np.ndarray:
        """Embedding for raw step indices t (scalar or (N,))."""
        t_arr = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        return sinusoidal_embedding(self.schedule.c_noise(t_arr), self.config.temb_dim)

    # ---- inference -----------------------------------------------------

    def predict(self, x_t: np.ndarray, t, cond: Conditioning | None = None):
        """Network output for a single sample (C, R, R) at scalar step t."""
        squeeze = x_t.ndim == 3
        batch = x_t[None] if squeeze else x_t
        temb = self._temb(t, batch.shape[0])
        out = self.net.forward(self.store, self.assemble(batch, cond), temb, None)
        return out[0] if squeeze else out

    # ---- training ------------------------------------------------------

    def loss_and_grads(self, x_in: np.ndarray, t_array: np.ndarray,
                       target_out: np.ndarray) -> float:
        """MSE loss over the batch; accumulates parameter gradients."""
        cache = {}
        temb = self._temb(t_array, x_in.shape[0])
        pred = self.net.forward(self.store, x_in, temb, cache)
        diff = pred - target_out
        loss = float(np.mean(diff * diff))
        self.net.backward(self.store, cache, (2.0 / diff.size) * diff)
        return loss

    def loss_only(self, x_in: np.ndarray, t_array: np.ndarray,
                  target_out: np.ndarray) -> float:
        temb = self._temb(t_array, x_in.shape[0])
        pred = self.net.forward(self.store, x_in, temb, None)
        return float(np.mean((pred - target_out) ** 2))

    # ---- persistence ---------------------------------------------------

    def save(self, path) -> None:
        from .numerics.checkpoint import save_checkpoint
        meta = dict(self.config.to_meta())
        meta["target"] = 0 if self.target.value == "epsilon" else 1
        meta["t_steps"] = self.schedule.t_steps
        meta["schedule_kind"] = self.schedule.kind
        save_checkpoint(path, self.store.params, meta=meta)

    @classmethod
    def load(cls, path) -> "ScoreModel":
        from .diffusion import NoiseSchedule, PredictionTarget
        from .numerics.checkpoint import load_checkpoint
        from .errors import CheckpointError
        params, meta = load_checkpoint(path)
        needed = {"target", "t_steps", "schedule_kind", "resolution"}
        missing = needed - set(meta)
        if missing:
            raise CheckpointError(f"model checkpoint missing metadata {sorted(missing)}")
        config = ScoreNetConfig.from_meta(meta)
        kind = int(meta["schedule_kind"][0])
        if kind != NoiseSchedule.KIND_COSINE:
            raise CheckpointError(f"unknown schedule kind {kind}")
        schedule = NoiseSchedule.cosine(int(meta["t_steps"][0]))
        target = PredictionTarget.EPSILON if int(meta["target"][0]) == 0 \
            else PredictionTarget.V
        model = cls(config, schedule, target)
        model.store.load_params(params)
        return model
