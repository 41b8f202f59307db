"""Geometric attribute maps from a range image: normals and shape index.

Normals come from a per-pixel plane fit over a 5x5 window of the geometry
map (regressing z on x, y), oriented toward the viewer (n_z >= 0). The
shape index comes from a cubic Monge-patch fit in a per-pixel tangent frame
using three equations per neighbor (height plus the two slopes implied by
the neighbor's normal). Principal curvatures use the convex-toward-viewer-
positive sign convention, so a ridge facing the camera scores 0.25, a
saddle 0.5, a dome 0 and a cup 1.

All window fits run as one batched QR solve per map; masked-out window
entries become zero rows, which leave a least-squares solution unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imageops import luma
from .tensor import eigen_sym2

MAP_KINDS = ("geom", "tex", "si", "nx", "ny", "nz")

DEFAULT_WINDOW = 5
MIN_PLANE_NEIGHBORS = 3
MIN_CUBIC_NEIGHBORS = 4
MIN_ROTATED_NZ = 0.1

_UMBILIC_RTOL = 1e-8
_SINGULAR_RTOL = 1e-10


@dataclass
class AttributeMapSet:
    """The six registered maps of one scan plus the shared validity mask."""

    geom: np.ndarray          # (m, n, 3)
    tex: np.ndarray           # (m, n, 3)
    si: np.ndarray            # (m, n)
    nx: np.ndarray            # (m, n)
    ny: np.ndarray            # (m, n)
    nz: np.ndarray            # (m, n)
    mask: np.ndarray          # (m, n), 1 where every map is valid


def _window_stacks(geom, valid, window):
    """Per-pixel window neighborhoods as (m, n, K, 3) and (m, n, K) stacks."""
    r = window // 2
    gp = np.pad(geom, ((r, r), (r, r), (0, 0)))
    vp = np.pad(valid, ((r, r), (r, r)))
    pts = sliding_window_view(gp, (window, window), axis=(0, 1))
    # (m, n, 3, w, w) -> (m, n, w*w, 3) in row-major window order
    pts = pts.transpose(0, 1, 3, 4, 2).reshape(*valid.shape, window * window, 3)
    vld = sliding_window_view(vp, (window, window)).reshape(
        *valid.shape, window * window
    )
    return pts, vld


def _masked_batch_solve(aug):
    """Least squares for a stack of systems whose dead rows are zeroed.

    ``aug`` is the augmented stack [A | b] of shape (P, rows, p + 1); the
    solution comes from the R factor of its QR decomposition alone, which
    avoids forming Q. Returns (solutions, ok) where ok flags systems with a
    usable numerical rank; solutions of flagged-out systems are zero.
    """
    p = aug.shape[-1] - 1
    r = np.linalg.qr(aug, mode="r")
    r1 = r[:, :p, :p]
    qtb = r[:, :p, p]
    diag = np.abs(np.diagonal(r1, axis1=-2, axis2=-1))
    ok = diag.min(axis=-1) > _SINGULAR_RTOL * np.maximum(diag.max(axis=-1), 1e-300)
    r_safe = np.where(ok[:, None, None], r1, np.eye(p))
    x = np.linalg.solve(r_safe, qtb[:, :, None])[:, :, 0]
    x[~ok] = 0.0
    return x, ok


def estimate_normals(geom, mask, window: int = DEFAULT_WINDOW,
                     min_neighbors: int = MIN_PLANE_NEIGHBORS):
    """Unit normals of a geometry map by windowed plane fitting.

    Returns ``(nx, ny, nz, valid)``. Pixels that are masked out, have fewer
    than ``min_neighbors`` valid window neighbors, or hit a degenerate fit
    get normal (0, 0, 0) and are cleared in ``valid``.
    """
    geom = np.asarray(geom, dtype=np.float64)
    valid_in = np.asarray(mask, dtype=np.float64) > 0.5
    m, n = valid_in.shape
    pts, vld = _window_stacks(geom, valid_in, window)
    center = (window * window) // 2

    neighbor_count = vld.sum(axis=-1) - vld[..., center]
    candidates = valid_in & (neighbor_count >= min_neighbors)
    flat_idx = np.flatnonzero(candidates)
    nx = np.zeros((m, n))
    ny = np.zeros((m, n))
    nz = np.zeros((m, n))
    valid = np.zeros((m, n), dtype=bool)
    if flat_idx.size == 0:
        return nx, ny, nz, valid

    p = pts.reshape(m * n, -1, 3)[flat_idx]
    v = vld.reshape(m * n, -1)[flat_idx].astype(np.float64)
    counts = v.sum(axis=1)
    mu = np.einsum("pk,pkc->pc", v, p) / counts[:, None]
    rel = (p - mu[:, None, :]) * v[:, :, None]

    # column-major assembly: LAPACK consumes the stack without a copy
    aug = np.empty((len(flat_idx), 4, v.shape[1]))
    aug[:, 0] = rel[:, :, 0]
    aug[:, 1] = rel[:, :, 1]
    aug[:, 2] = v
    aug[:, 3] = rel[:, :, 2]
    coef, ok = _masked_batch_solve(aug.transpose(0, 2, 1))

    normal = np.concatenate(
        [-coef[:, :2], np.ones((len(coef), 1))], axis=1
    )
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normal[~ok] = 0.0

    rows, cols = np.unravel_index(flat_idx, (m, n))
    nx[rows, cols] = normal[:, 0]
    ny[rows, cols] = normal[:, 1]
    nz[rows, cols] = normal[:, 2]
    valid[rows, cols] = ok
    return nx, ny, nz, valid


def _rotation_to_z(normals):
    """Batch of minimal rotations taking each unit normal to (0, 0, 1)."""
    nxv, nyv, nzv = normals[:, 0], normals[:, 1], normals[:, 2]
    # axis = n x z = (ny, -nx, 0); R = I + [v]x + [v]x^2 / (1 + n_z)
    c = 1.0 / (1.0 + np.maximum(nzv, -0.99))
    rot = np.empty((len(normals), 3, 3))
    rot[:, 0, 0] = 1.0 - nxv * nxv * c
    rot[:, 0, 1] = -nxv * nyv * c
    rot[:, 0, 2] = -nxv
    rot[:, 1, 0] = -nxv * nyv * c
    rot[:, 1, 1] = 1.0 - nyv * nyv * c
    rot[:, 1, 2] = -nyv
    rot[:, 2, 0] = nxv
    rot[:, 2, 1] = nyv
    rot[:, 2, 2] = nzv
    return rot


def shape_index_from_curvatures(k1, k2):
    """Normalized curvature in [0, 1] from principal curvatures k1 >= k2.

    Flat and umbilic points take the limit values: 0.5 when the mean
    curvature also vanishes, else 0 (convex toward viewer) or 1 (concave).
    """
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    ksum = k1 + k2
    kdiff = k1 - k2
    scale = np.maximum(1.0, np.abs(k1) + np.abs(k2))
    umbilic = np.abs(kdiff) < _UMBILIC_RTOL * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        si = 0.5 - np.arctan(ksum / kdiff) / np.pi
    limit = np.where(np.abs(ksum) < _UMBILIC_RTOL, 0.5,
                     np.where(ksum > 0.0, 0.0, 1.0))
    si = np.where(umbilic, limit, si)
    return np.clip(si, 0.0, 1.0)


def estimate_shape_index(geom, nx, ny, nz, mask,
                         window: int = DEFAULT_WINDOW,
                         min_neighbors: int = MIN_CUBIC_NEIGHBORS):
    """Shape-index map from a geometry map and its estimated normals.

    Per pixel: rotate the window into the tangent frame of the pixel
    normal, fit the cubic height patch
    ``z = (a/2)x^2 + bxy + (c/2)y^2 + dx^3 + ex^2y + fxy^2 + gy^3``
    with height and slope equations for every neighbor, take the principal
    curvatures from the quadratic part, and map them through
    :func:`shape_index_from_curvatures`. Neighbors whose rotated normal has
    n_z below 0.1 are dropped (their slopes are unreliable).

    Returns ``(si, valid)``; invalid pixels carry 0.
    """
    geom = np.asarray(geom, dtype=np.float64)
    valid_in = np.asarray(mask, dtype=np.float64) > 0.5
    m, n = valid_in.shape
    K = window * window
    center = K // 2

    normals = np.stack([nx, ny, nz], axis=-1)
    pts, vld = _window_stacks(geom, valid_in, window)
    r = window // 2
    nrm_p = np.pad(normals, ((r, r), (r, r), (0, 0)))
    nbr_nrm = sliding_window_view(nrm_p, (window, window), axis=(0, 1))
    nbr_nrm = nbr_nrm.transpose(0, 1, 3, 4, 2).reshape(m, n, K, 3)

    flat_idx = np.flatnonzero(valid_in)
    si = np.zeros((m, n))
    valid = np.zeros((m, n), dtype=bool)
    if flat_idx.size == 0:
        return si, valid

    p = pts.reshape(m * n, K, 3)[flat_idx]
    v = vld.reshape(m * n, K)[flat_idx].copy()
    v[:, center] = False
    nn = nbr_nrm.reshape(m * n, K, 3)[flat_idx]
    cn = normals.reshape(m * n, 3)[flat_idx]

    rot = _rotation_to_z(cn)
    rel = p - p[:, center, None, :]
    rel = np.einsum("pij,pkj->pki", rot, rel)
    nn = np.einsum("pij,pkj->pki", rot, nn)

    usable = v & (nn[:, :, 2] >= MIN_ROTATED_NZ)
    enough = usable.sum(axis=1) >= min_neighbors

    u = usable.astype(np.float64)
    x = rel[:, :, 0] * u
    y = rel[:, :, 1] * u
    z = rel[:, :, 2] * u
    # normalize each window by its planar extent: heights and slopes then
    # carry equal weight at every geometric scale, making the fit (and the
    # shape index) exactly scale-equivariant
    counts = np.maximum(u.sum(axis=1), 1.0)
    win_scale = np.sqrt(np.maximum((x * x + y * y).sum(axis=1) / counts, 1e-300))
    x = x / win_scale[:, None]
    y = y / win_scale[:, None]
    z = z / win_scale[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(usable, -nn[:, :, 0] / nn[:, :, 2], 0.0)
        sy = np.where(usable, -nn[:, :, 1] / nn[:, :, 2], 0.0)

    xx = x * x
    yy = y * y
    xy = x * y
    # unknowns (a, b, c, d, e, f, g); K height rows, then K of each slope.
    # Masked entries are zero because x, y and the targets already are.
    # Column-major assembly so LAPACK consumes the stack without a copy.
    P = len(flat_idx)
    aug = np.zeros((P, 8, 3 * K))
    aug[:, 0, :K] = 0.5 * xx
    aug[:, 1, :K] = xy
    aug[:, 2, :K] = 0.5 * yy
    aug[:, 3, :K] = xx * x
    aug[:, 4, :K] = xx * y
    aug[:, 5, :K] = x * yy
    aug[:, 6, :K] = yy * y
    aug[:, 7, :K] = z
    aug[:, 0, K:2 * K] = x
    aug[:, 1, K:2 * K] = y
    aug[:, 3, K:2 * K] = 3.0 * xx
    aug[:, 4, K:2 * K] = 2.0 * xy
    aug[:, 5, K:2 * K] = yy
    aug[:, 7, K:2 * K] = sx
    aug[:, 1, 2 * K:] = x
    aug[:, 2, 2 * K:] = y
    aug[:, 4, 2 * K:] = xx
    aug[:, 5, 2 * K:] = 2.0 * xy
    aug[:, 6, 2 * K:] = 3.0 * yy
    aug[:, 7, 2 * K:] = sy

    coef, ok = _masked_batch_solve(aug.transpose(0, 2, 1))
    ok &= enough

    l1, l2 = eigen_sym2(coef[:, 0], coef[:, 1], coef[:, 2])
    k1, k2 = -l2 / win_scale, -l1 / win_scale
    vals = shape_index_from_curvatures(k1, k2)
    vals[~ok] = 0.0

    rows_i, cols_i = np.unravel_index(flat_idx, (m, n))
    si[rows_i, cols_i] = vals
    valid[rows_i, cols_i] = ok
    return si, valid


def normalize_map(values, mask) -> np.ndarray:
    """Min-max rescale over valid pixels to [0, 1]; invalid pixels become 0.

    A constant map maps to 0.5 at every valid pixel.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(mask, dtype=np.float64) > 0.5
    if not np.any(valid):
        raise ValueError("normalize_map needs at least one valid pixel")
    lo = values[valid].min()
    hi = values[valid].max()
    out = np.zeros_like(values)
    if hi - lo < 1e-300:
        out[valid] = 0.5
    else:
        out[valid] = (values[valid] - lo) / (hi - lo)
    return out


def compute_attribute_maps(geom, tex, mask,
                           window: int = DEFAULT_WINDOW) -> AttributeMapSet:
    """Full attribute-map set from projection outputs.

    The returned mask marks pixels where projection, normal estimation and
    curvature estimation all succeeded; every map is zeroed elsewhere.
    """
    nx, ny, nz, nvalid = estimate_normals(geom, mask, window=window)
    si, svalid = estimate_shape_index(geom, nx, ny, nz, nvalid, window=window)
    final = svalid
    keep = final.astype(np.float64)
    return AttributeMapSet(
        geom=np.asarray(geom) * keep[:, :, None],
        tex=np.asarray(tex) * keep[:, :, None],
        si=si * keep,
        nx=nx * keep,
        ny=ny * keep,
        nz=nz * keep,
        mask=keep,
    )


def single_channel(maps: AttributeMapSet, kind: str) -> np.ndarray:
    """One scalar map per attribute kind, the network-input reduction.

    Geometry reduces to its depth (z) channel and texture to Rec.601 luma;
    the other four are already scalar.
    """
    if kind == "geom":
        return maps.geom[:, :, 2]
    if kind == "tex":
        return luma(maps.tex) * maps.mask
    if kind == "si":
        return maps.si
    if kind == "nx":
        return maps.nx
    if kind == "ny":
        return maps.ny
    if kind == "nz":
        return maps.nz
    raise ValueError(f"unknown attribute map kind {kind!r}")
