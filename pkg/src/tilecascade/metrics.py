"""Distribution metrics: Fréchet distance (FID / patch-FID) and Improved
Precision/Recall over a deterministic handcrafted feature extractor.

The extractor is a stand-in for a pretrained embedding: patches are resized
to a fixed input and mapped to per-channel histograms, seeded filter-bank
response magnitudes, and two-level Haar detail energies. It is pluggable —
anything with .dim and .extract(img) works in its place.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import imageops
from .errors import NumericError, ShapeError, ValidationError
from .numerics import functional
from .rng import NoiseStream, stable_hash

PFID_SCALES = (1.0, 0.5, 0.25)
ALLOWED_SCALES = (1.0, 0.5, 0.25, 0.125)


class FeatureExtractor:
    """Deterministic image-patch embedding of fixed dimension.

    resize to input_size, then concatenate per-channel histograms (8 bins),
    mean absolute responses of a seeded 5x5 filter bank per channel, and
    two-level Haar detail energies per channel. D = 24 + 48 + 6 = 78 at the
    defaults.
    """

    def __init__(self, seed: int = 0, input_size: int = 32, channels: int = 3,
                 hist_bins: int = 8, n_filters: int = 16, ksize: int = 5):
        self.input_size = input_size
        self.channels = channels
        self.hist_bins = hist_bins
        stream = NoiseStream(stable_hash(seed, "feature-filters"))
        self.filters = stream.normal((n_filters, 1, ksize, ksize))
        self.extractor_id = (f"handcrafted-v1-s{seed}-i{input_size}"
                             f"-h{hist_bins}-f{n_filters}k{ksize}")

    @property
    def dim(self) -> int:
        return self.channels * (self.hist_bins + self.filters.shape[0] + 2)

    def extract(self, img: np.ndarray) -> np.ndarray:
        imageops.require_chw(img)
        if img.shape[0] != self.channels:
            raise ShapeError(f"extractor wants {self.channels} channels, "
                             f"got {img.shape[0]}")
        size = self.input_size
        if img.shape[1:] != (size, size):
            img = imageops.resize_bilinear(img, size, size)
        parts = [self._histograms(img), self._filter_responses(img),
                 self._haar_energies(img)]
        return np.concatenate(parts)

    def extract_many(self, imgs) -> np.ndarray:
        feats = np.stack([self.extract(im) for im in imgs])
        if not np.all(np.isfinite(feats)):
            raise NumericError("non-finite feature values")
        return feats

    def _histograms(self, img):
        out = []
        for ch in img:
            counts, _ = np.histogram(ch, bins=self.hist_bins, range=(0.0, 1.0))
            out.append(counts / ch.size)
        return np.concatenate(out)

    def _filter_responses(self, img):
        x = img[:, None]  # each channel as its own single-channel sample
        resp = functional.conv2d(x, self.filters, None, padding=0)
        return np.abs(resp).mean(axis=(2, 3)).reshape(-1)

    def _haar_energies(self, img):
        out = []
        x = img
        for _level in range(2):
            a = x[:, 0::2, 0::2]
            b = x[:, 0::2, 1::2]
            c = x[:, 1::2, 0::2]
            d = x[:, 1::2, 1::2]
            lh = (a - b + c - d) / 2.0
            hl = (a + b - c - d) / 2.0
            hh = (a - b - c + d) / 2.0
            out.append((lh ** 2 + hl ** 2 + hh ** 2).mean(axis=(1, 2)))
            x = (a + b + c + d) / 2.0
        # interleave as (ch0 L1, ch1 L1, ..., ch0 L2, ...)
        return np.concatenate(out)


@dataclass
class FeatureMoments:
    mean: np.ndarray        # (D,)
    cov: np.ndarray         # (D, D) symmetric
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureMoments":
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValidationError(f"need a (N>=2, D) feature matrix, got "
                                  f"{feats.shape}")
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = (cov + cov.T) / 2.0
        return cls(mean=mean, cov=cov, count=feats.shape[0])

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def full_rank_fit(self) -> bool:
        return self.count >= self.dim + 1


def frechet_distance(a: FeatureMoments, b: FeatureMoments) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}).

    The square root is taken on the symmetric product Sa^{1/2} Sb Sa^{1/2}
    via eigendecomposition with negative eigenvalues clipped to zero.
    """
    if a.dim != b.dim:
        raise ValidationError(f"moment dimensions differ: {a.dim} vs {b.dim}")
    for m in (a, b):
        if not (np.all(np.isfinite(m.mean)) and np.all(np.isfinite(m.cov))):
            raise NumericError("non-finite feature moments")
    diff = a.mean - b.mean

    va, ua = np.linalg.eigh(a.cov)
    sqrt_a = (ua * np.sqrt(np.clip(va, 0.0, None))) @ ua.T
    middle = sqrt_a @ b.cov @ sqrt_a
    vm = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vm, 0.0, None)).sum()
    traces = float(np.trace(a.cov) + np.trace(b.cov))
    value = float(diff @ diff + traces - 2.0 * tr_sqrt)
    if value < 0.0:
        # rank-deficient moments (fewer samples than feature dims) leave
        # sqrt(eps)-sized noise on the null eigenvalues of the symmetric
        # product, so identical populations land slightly negative; anything
        # beyond that noise band means the numerics actually broke
        if value < -1e-6 * max(1.0, traces):
            raise NumericError(f"Frechet distance collapsed to {value}")
        value = 0.0
    return value


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    return frechet_distance(FeatureMoments.from_features(real_feats),
                            FeatureMoments.from_features(gen_feats))


# ---- manifold precision / recall -------------------------------------------

def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d2 = np.clip(aa + bb - 2.0 * (a @ b.T), 0.0, None)
    return np.sqrt(d2)


def knn_radii(feats: np.ndarray, k: int = 3) -> np.ndarray:
    """Distance to the k-th nearest neighbor, excluding the point itself."""
    if feats.shape[0] < k + 1:
        raise ValidationError(f"need at least {k + 1} points for k={k}, "
                              f"got {feats.shape[0]}")
    dist = _pairwise(feats, feats)
    np.fill_diagonal(dist, np.inf)
    return np.sort(dist, axis=1)[:, k - 1]


def improved_precision(real: np.ndarray, gen: np.ndarray, k: int = 3) -> float:
    """Fraction of generated points within some real point's k-NN radius."""
    if real.shape[0] < k + 1 or gen.shape[0] < k + 1:
        raise ValidationError(f"both sets need at least {k + 1} points")
    radii = knn_radii(real, k)
    dist = _pairwise(gen, real)
    covered = (dist <= radii[None, :]).any(axis=1)
    return float(covered.mean())


def improved_recall(real: np.ndarray, gen: np.ndarray, k: int = 3) -> float:
    return improved_precision(gen, real, k)


# ---- patch-FID ---------------------------------------------------------------

@dataclass
class CropSpec:
    scale: float
    u_pyr: float   # maps to a set index via floor(u_pyr * len(set))
    y: int
    x: int
    side: int


def plan_crops(crop_count: int, canvas: int, scales=PFID_SCALES,
               seed: int = 0) -> list[CropSpec]:
    """Seeded crop plan shared by both populations of a pFID run."""
    for s in scales:
        if s not in ALLOWED_SCALES:
            raise ValidationError(f"scale {s} outside the allowed set "
                                  f"{ALLOWED_SCALES}")
    if crop_count < 2:
        raise ValidationError("need at least two crops")
    stream = NoiseStream(stable_hash(seed, "pfid-crops"))
    specs = []
    for _ in range(crop_count):
        scale = scales[int(stream.integers(0, len(scales)))]
        side = max(1, int(round(scale * canvas)))
        u_pyr = float(stream.uniform(()))
        y = int(np.floor(stream.uniform(()) * (canvas - side + 1)))
        x = int(np.floor(stream.uniform(()) * (canvas - side + 1)))
        specs.append(CropSpec(scale=scale, u_pyr=u_pyr, y=y, x=x, side=side))
    return specs


def _crop_features(images: list, specs: list, extractor) -> np.ndarray:
    n = len(images)
    feats = []
    for spec in specs:
        img = images[min(int(np.floor(spec.u_pyr * n)), n - 1)]
        crop = img[:, spec.y:spec.y + spec.side, spec.x:spec.x + spec.side]
        feats.append(extractor.extract(crop))
    return np.stack(feats)


def pfid(real_images: list, gen_images: list, crop_count: int = 200,
         scales=PFID_SCALES, seed: int = 0, extractor=None) -> float:
    """Patch-FID: the same seeded (scale, position) crop list is applied to
    a random member of each population, matching scales and positions."""
    if not real_images or not gen_images:
        raise ValidationError("both image sets must be non-empty")
    canvas = real_images[0].shape[1]
    for img in list(real_images) + list(gen_images):
        imageops.require_chw(img)
        if img.shape[1] != canvas or img.shape[2] != canvas:
            raise ValidationError(f"pFID images must share the canvas size "
                                  f"{canvas}, got {img.shape}")
    extractor = extractor or FeatureExtractor()
    specs = plan_crops(crop_count, canvas, scales=scales, seed=seed)
    real_feats = _crop_features(real_images, specs, extractor)
    gen_feats = _crop_features(gen_images, specs, extractor)
    return fid(real_feats, gen_feats)


def pfid_pyramids(real_pyramids: list, gen_pyramids: list, level: int = 2,
                  **kwargs) -> float:
    return pfid([p.levels[level] for p in real_pyramids],
                [p.levels[level] for p in gen_pyramids], **kwargs)


# ---- reporting -----------------------------------------------------------------

def write_report(path_base: str, values: dict, meta: dict) -> tuple:
    """Text key-value report plus a JSON twin; returns both paths."""
    txt_path = path_base + ".txt"
    json_path = path_base + ".json"
    lines = [f"{key}: {values[key]}" for key in sorted(values)]
    lines += [f"{key}: {meta[key]}" for key in sorted(meta)]
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"values": values, "meta": meta}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return txt_path, json_path


def read_report(path_base: str) -> tuple:
    """Parse the JSON twin of a report back into (values, meta)."""
    with open(path_base + ".json", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or set(data) != {"values", "meta"}:
        raise ValidationError(f"{path_base}.json is not a metrics report")
    return data["values"], data["meta"]
