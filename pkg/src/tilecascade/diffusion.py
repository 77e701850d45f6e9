"""Discretized variance-preserving diffusion.

The chain runs over integer steps t = 1..T with the convention that index 0
is the clean-data limit (alpha_bar[0] == 1 exactly). All tensors here live in
model space (roughly [-1, 1]); mapping to and from [0, 1] images is the
caller's business.

Noise bookkeeping: a sampling chain consumes its NoiseStream in a fixed
order (initial state, then per step: step noise z, then constraint noise if a
known-region constraint is installed), which is what makes whole-chain
determinism a statement about seeds alone.
"""

import enum

import numpy as np

from .errors import NumericError, ShapeError, ValidationError
from .rng import NoiseStream


class PredictionTarget(enum.Enum):
    EPSILON = "epsilon"
    V = "v"


class NoiseSchedule:
    """Cosine alpha-bar schedule, discretized to T ancestral steps.

    Arrays are indexed by step: betas[t] and posterior_var[t] are valid for
    t in [1, T] (index 0 unused, set to 0); alpha_bar[t] for t in [0, T].
    sigma2[t] is stored as exactly 1 - alpha_bar[t] so the variance-preserving
    identity holds with no rounding.
    """

    KIND_COSINE = 0

    def __init__(self, t_steps: int, betas: np.ndarray, kind: int):
        if t_steps < 1 or betas.shape != (t_steps + 1,):
            raise ValidationError(f"schedule wants T+1 betas, got {betas.shape}")
        if np.any(betas[1:] <= 0.0) or np.any(betas[1:] >= 1.0):
            raise ValidationError("every beta_t must lie in (0, 1)")
        self.t_steps = t_steps
        self.kind = kind
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alphas[0] = 1.0
        self.alpha_bar = np.cumprod(self.alphas)
        self.sigma2 = 1.0 - self.alpha_bar
        self.sigma = np.sqrt(self.sigma2)
        self.sqrt_alpha_bar = np.sqrt(self.alpha_bar)
        # posterior variance of x_{t-1} | x_t, x_0, with the degenerate t=1
        # entry clipped to beta_1
        post = np.zeros_like(betas)
        post[2:] = betas[2:] * (1.0 - self.alpha_bar[1:-1]) / (1.0 - self.alpha_bar[2:])
        post[1] = betas[1]
        self.posterior_var = post

    @classmethod
    def cosine(cls, t_steps: int = 250, offset: float = 0.008,
               max_beta: float = 0.999) -> "NoiseSchedule":
        steps = np.arange(t_steps + 1, dtype=np.float64)
        f = np.cos((steps / t_steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        bar = f / f[0]
        betas = np.zeros(t_steps + 1)
        betas[1:] = np.clip(1.0 - bar[1:] / bar[:-1], 1e-8, max_beta)
        return cls(t_steps, betas, cls.KIND_COSINE)

    def check_step(self, t, lowest: int = 1) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < lowest) or np.any(t_arr > self.t_steps):
            raise ValidationError(f"step index {t} outside [{lowest}, {self.t_steps}]")

    def c_noise(self, t):
        """Normalized step index fed to the network's embedding."""
        return np.asarray(t, dtype=np.float64) / self.t_steps

    def _gather(self, arr, t):
        """arr[t] shaped to broadcast over (N, C, H, W) when t is per-sample."""
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            return arr[int(t_arr)]
        return arr[t_arr][:, None, None, None]

    def forward_diffuse(self, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
        """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.

        Accepts t = 0 (returns x0 exactly) so constraint plumbing can ask for
        the clean-data limit.
        """
        if noise.shape != x0.shape:
            raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
        self.check_step(t, lowest=0)
        return self._gather(self.sqrt_alpha_bar, t) * x0 + \
            self._gather(self.sigma, t) * noise

    def training_target(self, x0, noise, t, target: PredictionTarget) -> np.ndarray:
        self.check_step(t)
        if target is PredictionTarget.EPSILON:
            return noise
        return self._gather(self.sqrt_alpha_bar, t) * noise - \
            self._gather(self.sigma, t) * x0

    def predict_x0(self, x_t, prediction, t, target: PredictionTarget) -> np.ndarray:
        self.check_step(t)
        root_bar = self._gather(self.sqrt_alpha_bar, t)
        sig = self._gather(self.sigma, t)
        if target is PredictionTarget.EPSILON:
            if np.any(self._gather(self.alpha_bar, t) < 1e-8):
                raise NumericError(f"alpha_bar at t={t} too small to invert an "
                                   "epsilon prediction")
            return (x_t - sig * prediction) / root_bar
        return root_bar * x_t - sig * prediction

    def epsilon_from(self, x_t, prediction, t, target: PredictionTarget) -> np.ndarray:
        """The epsilon-space view of a prediction under either target."""
        self.check_step(t)
        if target is PredictionTarget.EPSILON:
            return prediction
        return self._gather(self.sigma, t) * x_t + \
            self._gather(self.sqrt_alpha_bar, t) * prediction

    def epsilon_from_x0(self, x_t, x0, t) -> np.ndarray:
        return (x_t - self._gather(self.sqrt_alpha_bar, t) * x0) / \
            self._gather(self.sigma, t)

    def reverse_step(self, x_t, prediction, t: int, stream: NoiseStream,
                     target: PredictionTarget, clip_x0=None) -> np.ndarray:
        """One ancestral step x_t -> x_{t-1}; z is suppressed at t = 1.

        clip_x0, when given as (lo, hi), clamps the implied clean image before
        the step mean is formed (the epsilon used is recomputed from the
        clamped x0-hat, which equals the unclamped update when nothing clips).
        """
        self.check_step(t)
        t = int(t)
        eps_hat = self.epsilon_from(x_t, prediction, t, target)
        if clip_x0 is not None:
            x0_hat = self.predict_x0(x_t, prediction, t, target)
            np.clip(x0_hat, clip_x0[0], clip_x0[1], out=x0_hat)
            eps_hat = self.epsilon_from_x0(x_t, x0_hat, t)
        mean = (x_t - self.betas[t] / self.sigma[t] * eps_hat) / np.sqrt(self.alphas[t])
        if t == 1:
            return mean
        return mean + np.sqrt(self.posterior_var[t]) * stream.normal(x_t.shape)


def analytic_gaussian_score(schedule: NoiseSchedule, x_t, t, mu, s: float):
    """Exact score of the diffused marginal when data ~ N(mu, s^2 I)."""
    schedule.check_step(t)
    bar = schedule.alpha_bar[int(t)]
    var = bar * s * s + (1.0 - bar)
    return -(x_t - schedule.sqrt_alpha_bar[int(t)] * mu) / var


class GaussianOracleModel:
    """Drop-in "network" with the exact score for N(mu, s^2 I) data.

    predict returns the epsilon-view of the analytic score, so sampling with
    this model is a ground-truth test of the reverse chain itself.
    """

    def __init__(self, schedule: NoiseSchedule, shape, mu, s: float):
        self.schedule = schedule
        self.shape = tuple(shape)
        self.mu = mu
        self.s = float(s)
        self.target = PredictionTarget.EPSILON

    def predict(self, x_t, t, cond=None):
        score = analytic_gaussian_score(self.schedule, x_t, t, self.mu, self.s)
        return -self.schedule.sigma[int(t)] * score


class KnownRegionConstraint:
    """Pins a masked region of the sample to known values during the chain.

    mask: (H, W) bool; values: (C, H, W) in model space. After every reverse
    step the known pixels are replaced with a fresh forward-diffusion of the
    known values at the step's noise level, and at the end they are written
    in exactly, so constrained output pixels equal the known values bit for
    bit.
    """

    def __init__(self, mask: np.ndarray, values: np.ndarray):
        if mask.ndim != 2 or values.ndim != 3 or mask.shape != values.shape[1:]:
            raise ShapeError(f"constraint mask {mask.shape} vs values {values.shape}")
        self.mask = mask.astype(bool)
        self.values = values

    def apply(self, x, t: int, schedule: NoiseSchedule, stream: NoiseStream):
        noise = stream.normal(self.values.shape)
        known_t = schedule.forward_diffuse(self.values, t, noise)
        out = x.copy()
        out[:, self.mask] = known_t[:, self.mask]
        return out

    def finalize(self, x):
        out = x.copy()
        out[:, self.mask] = self.values[:, self.mask]
        return out


def sample_chain(model, shape, stream: NoiseStream, cond=None,
                 constraint: KnownRegionConstraint | None = None,
                 clip_x0=(-1.0, 1.0)) -> np.ndarray:
    """Run the full reverse chain from pure noise; returns a model-space image.

    The model provides .schedule, .target and .predict(x_t, t, cond).
    """
    schedule: NoiseSchedule = model.schedule
    x = stream.normal(shape)
    if constraint is not None and constraint.values.shape != shape:
        raise ShapeError(f"constraint values {constraint.values.shape} != "
                         f"sample shape {shape}")
    for t in range(schedule.t_steps, 0, -1):
        prediction = model.predict(x, t, cond)
        x = schedule.reverse_step(x, prediction, t, stream, model.target,
                                  clip_x0=clip_x0)
        if constraint is not None:
            x = constraint.apply(x, t - 1, schedule, stream)
    if constraint is not None:
        x = constraint.finalize(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("sampling chain produced non-finite values")
    return x


def to_model_space(img01: np.ndarray) -> np.ndarray:
    return img01 * 2.0 - 1.0


def to_image_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)
