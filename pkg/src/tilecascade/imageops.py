"""Image array utilities.

Images are float64 arrays of shape (C, H, W). Pixel i spans the half-open
interval [i, i+1) along its axis, so a rect (y, x, h, w) is measured in these
pixel-edge coordinates and may be fractional. Two resamplers cover every need
in the package:

* ``bilinear_rect`` point-samples output pixel centers with bilinear
  interpolation (used for upscaling and for conditioning images), and
* ``box_rect`` computes the exact area average of each output cell via an
  integral image (used for downscaling, footprints, and anything where
  "the mean over the covered region" is the contract).

``box_rect`` is exact, not an approximation: the integral of a
piecewise-constant image is piecewise-bilinear, so evaluating the integral
image at fractional corners by bilinear interpolation gives the true integral.
"""

import numpy as np

from .errors import GeometryError, ShapeError

_EDGE_TOL = 1e-6


def require_chw(img: np.ndarray, name: str = "image") -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise ShapeError(f"{name} must be a (C, H, W) array, got "
                         f"{getattr(img, 'shape', type(img))}")
    return img


def bilinear_rect(img: np.ndarray, rect, out_h: int, out_w: int) -> np.ndarray:
    """Sample a fractional rect of ``img`` onto an (out_h, out_w) grid.

    Output pixel (k, l) is the bilinear sample at the center of its cell
    within the rect. Samples outside the image clamp to the edge pixels.
    """
    require_chw(img)
    y, x, h, w = (float(v) for v in rect)
    if h <= 0 or w <= 0 or out_h <= 0 or out_w <= 0:
        raise GeometryError(f"degenerate rect or output size: {rect} -> ({out_h}, {out_w})")
    py = y + (np.arange(out_h) + 0.5) * (h / out_h)
    px = x + (np.arange(out_w) + 0.5) * (w / out_w)
    return _bilinear_at(img, py, px)


def _bilinear_at(img: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Bilinear samples on the grid py × px (pixel-edge coordinates)."""
    _, height, width = img.shape
    uy = py - 0.5
    ux = px - 0.5
    iy0 = np.clip(np.floor(uy).astype(np.int64), 0, max(height - 2, 0))
    ix0 = np.clip(np.floor(ux).astype(np.int64), 0, max(width - 2, 0))
    ty = np.clip(uy - iy0, 0.0, 1.0)
    tx = np.clip(ux - ix0, 0.0, 1.0)
    if height == 1:
        iy1, ty = iy0, np.zeros_like(ty)
    else:
        iy1 = iy0 + 1
    if width == 1:
        ix1, tx = ix0, np.zeros_like(tx)
    else:
        ix1 = ix0 + 1
    # gather the four corners for the full output grid at once
    r0 = img[:, iy0, :][:, :, ix0] * (1 - tx) + img[:, iy0, :][:, :, ix1] * tx
    r1 = img[:, iy1, :][:, :, ix0] * (1 - tx) + img[:, iy1, :][:, :, ix1] * tx
    return r0 * (1 - ty)[None, :, None] + r1 * ty[None, :, None]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    require_chw(img)
    _, height, width = img.shape
    return bilinear_rect(img, (0.0, 0.0, float(height), float(width)), out_h, out_w)


def bilinear_window(img: np.ndarray, y0: int, x0: int, size: int,
                    canvas: int) -> np.ndarray:
    """Bilinear upscale of ``img`` restricted to the window
    [y0, y0+size) x [x0, x0+size) of a virtual canvas of side ``canvas``.

    Sample positions are computed from global canvas pixel indices, so two
    overlapping windows produce bit-identical values on their shared pixels
    (unlike ``bilinear_rect`` on per-window fractional rects, whose position
    arithmetic differs between windows by rounding).
    """
    require_chw(img)
    if size <= 0 or canvas <= 0:
        raise GeometryError(f"degenerate window: size {size}, canvas {canvas}")
    ratio = img.shape[1] / float(canvas)
    py = (y0 + np.arange(size) + 0.5) * ratio
    ratio_x = img.shape[2] / float(canvas)
    px = (x0 + np.arange(size) + 0.5) * ratio_x
    return _bilinear_at(img, py, px)


def integral_image(img: np.ndarray) -> np.ndarray:
    """(C, H+1, W+1) with entry [c, i, j] = sum of img[c, :i, :j]."""
    require_chw(img)
    channels, height, width = img.shape
    out = np.zeros((channels, height + 1, width + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=1), axis=2, out=out[:, 1:, 1:])
    return out


def _integral_at(ii: np.ndarray, ey: np.ndarray, ex: np.ndarray) -> np.ndarray:
    """Evaluate an integral image at fractional edge coordinates (exact)."""
    _, h1, w1 = ii.shape
    height, width = h1 - 1, w1 - 1
    iy0 = np.clip(np.floor(ey).astype(np.int64), 0, height - 1)
    ix0 = np.clip(np.floor(ex).astype(np.int64), 0, width - 1)
    ty = ey - iy0
    tx = ex - ix0
    a = ii[:, iy0, :] * (1 - ty)[None, :, None] + ii[:, iy0 + 1, :] * ty[None, :, None]
    return a[:, :, ix0] * (1 - tx)[None, None, :] + a[:, :, ix0 + 1] * tx[None, None, :]


def box_rect(img: np.ndarray, rect, out_h: int, out_w: int,
             ii: np.ndarray | None = None) -> np.ndarray:
    """Exact box average of a fractional rect onto an (out_h, out_w) grid.

    The rect must lie within the image (up to a small numerical tolerance).
    Pass a precomputed ``integral_image`` when averaging many rects of the
    same source.
    """
    require_chw(img)
    _, height, width = img.shape
    y, x, h, w = (float(v) for v in rect)
    if h <= 0 or w <= 0 or out_h <= 0 or out_w <= 0:
        raise GeometryError(f"degenerate rect or output size: {rect} -> ({out_h}, {out_w})")
    if y < -_EDGE_TOL or x < -_EDGE_TOL or y + h > height + _EDGE_TOL or x + w > width + _EDGE_TOL:
        raise GeometryError(f"rect {rect} overflows image of size ({height}, {width})")
    if ii is None:
        ii = integral_image(img)
    ey = np.clip(y + np.arange(out_h + 1) * (h / out_h), 0.0, float(height))
    ex = np.clip(x + np.arange(out_w + 1) * (w / out_w), 0.0, float(width))
    grid = _integral_at(ii, ey, ex)
    sums = grid[:, 1:, 1:] - grid[:, :-1, 1:] - grid[:, 1:, :-1] + grid[:, :-1, :-1]
    area = (h / out_h) * (w / out_w)
    return sums / area


def resize_box(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    require_chw(img)
    _, height, width = img.shape
    return box_rect(img, (0.0, 0.0, float(height), float(width)), out_h, out_w)


def crop_padded(img: np.ndarray, y0: int, x0: int, h: int, w: int,
                fill: float = 1.0) -> np.ndarray:
    """Integer crop that may overflow the image; overflow is filled."""
    require_chw(img)
    channels, height, width = img.shape
    out = np.full((channels, h, w), float(fill), dtype=np.float64)
    ys, ye = max(y0, 0), min(y0 + h, height)
    xs, xe = max(x0, 0), min(x0 + w, width)
    if ys < ye and xs < xe:
        out[:, ys - y0:ye - y0, xs - x0:xe - x0] = img[:, ys:ye, xs:xe]
    return out


def crop_or_pad(img: np.ndarray, out_h: int, out_w: int, fill: float = 1.0) -> np.ndarray:
    """Center-crop or center-pad (with ``fill``) to the requested size.

    Odd differences put the extra pixel on the bottom/right.
    """
    require_chw(img)
    _, height, width = img.shape

    def start(have, want):
        return (have - want) // 2 if have >= want else -((want - have) // 2)

    return crop_padded(img, start(height, out_h), start(width, out_w),
                       out_h, out_w, fill=fill)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float (C,H,W) -> uint8 (H,W,C), round-half-up at the grid."""
    require_chw(img)
    arr = np.clip(img, 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """uint8 (H,W,C) -> float64 (C,H,W) in [0,1]."""
    if arr.ndim != 3:
        raise ShapeError(f"expected (H, W, C) uint8 array, got {arr.shape}")
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0
