"""Denoising training loop.

One step: draw a batch, draw per-sample steps t and noise, form x_t and the
configured target, MSE, clip the global gradient norm to 1, Adam. Models with
mask channels additionally get synthetic known-region strips cut from the
clean target, so they learn the inpainting interface they will be sampled
with.

The loss log is line-oriented CSV ("step,loss,grad_norm") and parses back
with parse_loss_log for the round-trip contract.
"""

from dataclasses import dataclass, field

import numpy as np

from .diffusion import to_model_space
from .errors import NumericError, ValidationError
from .numerics import AdamState, adam_step, clip_global_norm, grad_norm
from .rng import NoiseStream

CLIP_NORM = 1.0
STRIP_FRACTION = 0.125


@dataclass
class SlotData:
    """Training arrays for one model slot, everything in image space [0,1].

    x0: (M, C, R, R) clean targets; images: conditioning stacks, each
    (M, C, R, R) aligned with x0 (already at model resolution).
    """
    x0: np.ndarray
    images: list = field(default_factory=list)

    def __post_init__(self):
        if self.x0.ndim != 4:
            raise ValidationError(f"SlotData.x0 must be (M, C, R, R), got "
                                  f"{self.x0.shape}")
        for img in self.images:
            if img.shape != self.x0.shape:
                raise ValidationError("conditioning stack shape "
                                      f"{img.shape} != x0 shape {self.x0.shape}")

    def __len__(self):
        return self.x0.shape[0]


def synth_strip_masks(n: int, resolution: int, stream: NoiseStream) -> np.ndarray:
    """(N, 1, R, R) masks with top/left strips, each present with prob 1/2."""
    width = max(1, round(resolution * STRIP_FRACTION))
    masks = np.zeros((n, 1, resolution, resolution))
    coins = stream.uniform((n, 2))
    masks[coins[:, 0] < 0.5, :, :width, :] = 1.0
    masks[coins[:, 1] < 0.5, :, :, :width] = 1.0
    return masks


def prepare_batch(model, data: SlotData, idx: np.ndarray, stream: NoiseStream):
    """Assemble one training batch: returns (x_in, t, target_out)."""
    schedule = model.schedule
    x0_img = data.x0[idx]
    x0 = to_model_space(x0_img)
    n = x0.shape[0]
    t = stream.integers(1, schedule.t_steps + 1, size=n)
    noise = stream.normal(x0.shape)
    x_t = schedule.forward_diffuse(x0, t, noise)
    target_out = schedule.training_target(x0, noise, t, model.target)
    images = [stack[idx] for stack in data.images]
    if model.config.mask_channels:
        mask = synth_strip_masks(n, model.config.resolution, stream)
        known = x0_img * mask
    else:
        mask = known = None
    x_in = model.assemble_batch(x_t, images, mask, known)
    return x_in, t, target_out


def train_epoch(model, batches, adam: AdamState) -> float:
    """Run prepared (x_in, t, target) batches; returns the mean loss."""
    losses = []
    for x_in, t, target_out in batches:
        model.store.zero_grads()
        loss = model.loss_and_grads(x_in, t, target_out)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss {loss!r}")
        clip_global_norm(model.store, CLIP_NORM)
        adam_step(model.store, adam)
        losses.append(loss)
    if not losses:
        raise ValidationError("train_epoch got an empty batch list")
    return float(np.mean(losses))


def train_model(model, data: SlotData, steps: int, batch_size: int,
                stream: NoiseStream, adam: AdamState | None = None,
                checkpoint_path=None, progress=None) -> list[dict]:
    """SGD for `steps` sampled batches; returns the loss history.

    On a non-finite loss or gradient the last good parameters are saved to
    checkpoint_path (when given) before the numeric error propagates.
    """
    if len(data) == 0:
        raise ValidationError("empty training set")
    if batch_size < 1 or steps < 0:
        raise ValidationError(f"bad steps/batch_size: {steps}/{batch_size}")
    adam = adam or AdamState(model.store)
    history: list[dict] = []
    try:
        for step in range(1, steps + 1):
            idx = stream.integers(0, len(data), size=batch_size)
            x_in, t, target_out = prepare_batch(model, data, idx, stream)
            model.store.zero_grads()
            loss = model.loss_and_grads(x_in, t, target_out)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at step {step}")
            norm = grad_norm(model.store)
            clip_global_norm(model.store, CLIP_NORM)
            adam_step(model.store, adam)
            history.append({"step": step, "loss": loss, "grad_norm": norm})
            if progress is not None:
                progress(history[-1])
    except NumericError:
        if checkpoint_path is not None:
            model.save(checkpoint_path)
        raise
    return history


def format_loss_log(history: list[dict]) -> str:
    lines = ["step,loss,grad_norm"]
    for row in history:
        lines.append(f"{row['step']},{row['loss']:.10e},{row['grad_norm']:.10e}")
    return "\n".join(lines) + "\n"


def parse_loss_log(text: str) -> list[dict]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "step,loss,grad_norm":
        raise ValidationError("loss log missing its header line")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValidationError(f"bad loss log line: {ln!r}")
        out.append({"step": int(parts[0]), "loss": float(parts[1]),
                    "grad_norm": float(parts[2])})
    return out


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average used for loss-trend assertions and plots."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    out = np.empty_like(arr)
    csum = np.cumsum(arr)
    for i in range(arr.size):
        lo = max(0, i - window + 1)
        out[i] = (csum[i] - (csum[lo - 1] if lo else 0.0)) / (i - lo + 1)
    return out
