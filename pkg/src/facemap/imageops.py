"""Small image kernels: bilinear resize with an exact adjoint, PNG export.

The resize uses pixel-center sampling (source coordinate of output pixel i
is ``(i + 0.5) * in/out - 0.5``) with edge clamping, so resampling is pinned
bit-for-bit and the adjoint is its exact matrix transpose. The adjoint is
what pulls network input gradients back onto the attribute-map grid.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def _axis_taps(n_out: int, n_in: int):
    """Source indices (i0, i1) and fraction t for one resize axis."""
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x0 = np.floor(x).astype(np.intp)
    t = x - x0
    i0 = np.clip(x0, 0, n_in - 1)
    i1 = np.clip(x0 + 1, 0, n_in - 1)
    return i0, i1, t


def _as_3d(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None], True
    if img.ndim == 3:
        return img, False
    raise ValueError(f"expected 2-D or 3-D image, got ndim {img.ndim}")


def resize_bilinear(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) image."""
    x, squeeze = _as_3d(img)
    in_h, in_w = x.shape[:2]
    r0, r1, ty = _axis_taps(out_h, in_h)
    c0, c1, tx = _axis_taps(out_w, in_w)
    ty = ty[:, None, None]
    tx = tx[None, :, None]
    rows = x[r0] * (1.0 - ty) + x[r1] * ty
    out = rows[:, c0] * (1.0 - tx) + rows[:, c1] * tx
    return out[:, :, 0] if squeeze else out


def resize_bilinear_adjoint(grad, in_h: int, in_w: int) -> np.ndarray:
    """Exact transpose of :func:`resize_bilinear` back to (in_h, in_w)."""
    g, squeeze = _as_3d(grad)
    out_h, out_w = g.shape[:2]
    r0, r1, ty = _axis_taps(out_h, in_h)
    c0, c1, tx = _axis_taps(out_w, in_w)
    ty = ty[:, None, None]
    tx = tx[None, :, None]
    cols = np.zeros((out_h, in_w, g.shape[2]), dtype=np.float64)
    np.add.at(cols, (slice(None), c0), g * (1.0 - tx))
    np.add.at(cols, (slice(None), c1), g * tx)
    out = np.zeros((in_h, in_w, g.shape[2]), dtype=np.float64)
    np.add.at(out, r0, cols * (1.0 - ty))
    np.add.at(out, r1, cols * ty)
    return out[:, :, 0] if squeeze else out


def luma(rgb) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) image."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def to_uint8(img01) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img01) * 255.0), 0, 255).astype(np.uint8)


def save_png_gray(path, img01) -> None:
    """Quantize a [0, 1] map to 8-bit grayscale PNG."""
    Image.fromarray(to_uint8(img01), mode="L").save(path, format="PNG")


def save_png_rgb(path, img01) -> None:
    """Quantize a [0, 1] RGB image to 8-bit PNG."""
    Image.fromarray(to_uint8(img01), mode="RGB").save(path, format="PNG")
