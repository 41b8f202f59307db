"""Textured 3D scan ingest: file parsing, pose normalization, raster projection.

A scan is an unordered textured point cloud in millimeters. Preprocessing
crops around the nose tip and rotates the cloud into a canonical pose
(up = +y, outward viewing direction = +z). Projection rasterizes the
preprocessed cloud onto a uniform (x, y) grid, producing a geometry map
whose pixels store interpolated 3D coordinates, a matching texture map, and
a coverage mask.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import (
    DataError,
    EmptyProjection,
    NoNoseTip,
    ParseError,
    RejectedScan,
)

EXPRESSIONS = ("AN", "DI", "FE", "HA", "SA", "SU")

MIN_SCAN_POINTS = 1000
DEFAULT_CROP_RADIUS_MM = 90.0

# interpolation: inverse-distance (Shepard, power 2) over the nearest points
IDW_NEIGHBORS = 8
IDW_RADIUS_PITCHES = 2.0
_SKEW_TIE_RTOL = 1e-9


@dataclass
class FaceScan:
    """Raw textured point cloud plus optional landmark and labels."""

    points: np.ndarray                 # (N, 3) mm
    texture: np.ndarray                # (N, 3) in [0, 1]
    nose_tip: np.ndarray | None = None
    subject_id: str = ""
    expression: str | None = None
    intensity: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.texture = np.asarray(self.texture, dtype=np.float64).reshape(-1, 3)
        if self.nose_tip is not None:
            self.nose_tip = np.asarray(self.nose_tip, dtype=np.float64).reshape(3)
        if len(self.texture) != len(self.points):
            raise RejectedScan(
                f"{len(self.texture)} texture entries for {len(self.points)} points"
            )


@dataclass(frozen=True)
class ManifestRow:
    scan_id: str
    subject_id: str
    expression: str
    intensity: int
    path: str


MANIFEST_FIELDS = ("scan_id", "subject_id", "expression", "intensity", "path")


def validate_scan(scan: FaceScan) -> FaceScan:
    """Reject scans too small to process; returns the scan unchanged."""
    if len(scan.points) < MIN_SCAN_POINTS:
        raise RejectedScan(
            f"{len(scan.points)} points, need at least {MIN_SCAN_POINTS}"
        )
    if scan.expression is not None and scan.expression not in EXPRESSIONS:
        raise RejectedScan(f"unknown expression label {scan.expression!r}")
    return scan


def load_scan(path) -> FaceScan:
    """Parse the ASCII point-cloud format: ``x y z r g b`` per line.

    ``#`` starts a comment; an optional ``nose_tip x y z`` line carries the
    landmark. Texture components are clamped to [0, 1].
    """
    points, texture = [], []
    nose_tip = None
    with open(path, "r", encoding="ascii") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] == "nose_tip":
                if len(tokens) != 4:
                    raise ParseError("nose_tip needs 3 coordinates", lineno)
                try:
                    nose_tip = [float(t) for t in tokens[1:]]
                except ValueError as e:
                    raise ParseError(str(e), lineno) from None
                continue
            if len(tokens) != 6:
                raise ParseError(
                    f"expected 6 values per point, got {len(tokens)}", lineno
                )
            try:
                vals = [float(t) for t in tokens]
            except ValueError as e:
                raise ParseError(str(e), lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite coordinate", lineno)
            points.append(vals[:3])
            texture.append(vals[3:])
    if not points:
        raise ParseError(f"{path}: no points", None)
    tex = np.clip(np.asarray(texture, dtype=np.float64), 0.0, 1.0)
    return FaceScan(points=np.asarray(points), texture=tex, nose_tip=nose_tip)


def save_scan(path, scan: FaceScan) -> None:
    """Write the ASCII format with shortest round-trip float formatting."""
    with open(path, "w", encoding="ascii") as f:
        if scan.nose_tip is not None:
            f.write("nose_tip " + " ".join(repr(float(v)) for v in scan.nose_tip) + "\n")
        for p, t in zip(scan.points, scan.texture):
            f.write(" ".join(repr(float(v)) for v in (*p, *t)) + "\n")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    seen = set()
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise ParseError(
                f"manifest header must be {','.join(MANIFEST_FIELDS)}", 1
            )
        for lineno, rec in enumerate(reader, start=2):
            if rec["expression"] not in EXPRESSIONS:
                raise ParseError(f"unknown expression {rec['expression']!r}", lineno)
            try:
                intensity = int(rec["intensity"])
            except ValueError:
                raise ParseError(f"bad intensity {rec['intensity']!r}", lineno) from None
            if rec["scan_id"] in seen:
                raise ParseError(f"duplicate scan_id {rec['scan_id']!r}", lineno)
            seen.add(rec["scan_id"])
            rows.append(ManifestRow(rec["scan_id"], rec["subject_id"],
                                    rec["expression"], intensity, rec["path"]))
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.scan_id, r.subject_id, r.expression,
                             r.intensity, r.path])


def _pca_rotation(points: np.ndarray) -> np.ndarray:
    """Canonical rotation (rows = new axes) from the cloud's covariance.

    Largest-variance direction becomes +y, smallest becomes +z. The z sign
    is fixed so the majority of centroid-centered z coordinates is >= 0
    (grid-sampled outward-facing surfaces put more points above the mean).
    The y sign follows the third moment along y; on symmetric clouds the
    moment vanishes, so ties keep the orientation closest to the input +y.
    """
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / max(len(points), 1)
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    z = vecs[:, 0]
    y = vecs[:, 2]
    if np.count_nonzero(centered @ z >= 0.0) * 2 < len(points):
        z = -z
    ys = centered @ y
    skew = np.mean(ys ** 3)
    spread = np.sqrt(np.mean(ys ** 2))
    if abs(skew) > _SKEW_TIE_RTOL * max(spread, 1e-30) ** 3:
        if skew < 0.0:
            y = -y
    elif y[1] < 0.0:
        y = -y
    x = np.cross(y, z)
    return np.stack([x, y, z])


def _heuristic_nose_tip(points: np.ndarray) -> np.ndarray:
    """Fallback landmark: the point of maximal z after pose normalization."""
    if len(points) == 0:
        raise NoNoseTip("empty candidate set")
    rot = _pca_rotation(points)
    depth = (points - points.mean(axis=0)) @ rot[2]
    return points[int(np.argmax(depth))]


def preprocess(scan: FaceScan, crop_radius_mm: float = DEFAULT_CROP_RADIUS_MM) -> FaceScan:
    """Crop around the nose tip and rotate into the canonical pose.

    The output is centered at the nose tip; retained points lie within
    ``crop_radius_mm`` of it. Idempotent up to rounding.
    """
    tip = scan.nose_tip if scan.nose_tip is not None else _heuristic_nose_tip(scan.points)
    keep = np.linalg.norm(scan.points - tip, axis=1) <= crop_radius_mm
    if not np.any(keep):
        raise RejectedScan("no points within crop radius of the nose tip")
    pts = scan.points[keep]
    rot = _pca_rotation(pts)
    return replace(
        scan,
        points=(pts - tip) @ rot.T,
        texture=scan.texture[keep],
        nose_tip=np.zeros(3),
    )


def project(scan: FaceScan, m: int, n: int,
            k_neighbors: int = IDW_NEIGHBORS,
            radius_pitches: float = IDW_RADIUS_PITCHES):
    """Rasterize a preprocessed scan to an m x n grid over its (x, y) bbox.

    Returns ``(geom, tex, mask)`` where ``geom[i, j]`` holds interpolated
    (x, y, z), ``tex`` the interpolated (r, g, b), and ``mask`` is 1 where a
    point lies within the interpolation radius of the pixel center or the
    pixel sits inside the cloud's convex hull (interior holes are filled by
    the same inverse-distance interpolation). Row 0 is the +y edge.
    """
    if m < 16 or n < 16:
        raise DataError(f"map size must be at least 16, got {m}x{n}")
    pts = scan.points
    if len(pts) == 0:
        raise EmptyProjection("scan has no points")
    xy = pts[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    extent = hi - lo

    geom = np.zeros((m, n, 3), dtype=np.float64)
    tex = np.zeros((m, n, 3), dtype=np.float64)
    mask = np.zeros((m, n), dtype=np.float64)

    if extent[0] < 1e-9 and extent[1] < 1e-9:
        # all points project to one spot: one covered pixel at the center
        geom[m // 2, n // 2] = pts.mean(axis=0)
        tex[m // 2, n // 2] = scan.texture.mean(axis=0)
        mask[m // 2, n // 2] = 1.0
        return geom, tex, mask

    width = max(extent[0], 1e-9)
    height = max(extent[1], 1e-9)
    dx = width / n
    dy = height / m
    radius = radius_pitches * max(dx, dy)

    xc = lo[0] + (np.arange(n) + 0.5) * dx
    yc = hi[1] - (np.arange(m) + 0.5) * dy
    centers = np.stack(np.meshgrid(xc, yc, indexing="xy"), axis=-1).reshape(-1, 2)

    k = min(k_neighbors, len(pts))
    tree = cKDTree(xy)
    dist, idx = tree.query(centers, k=k)
    dist = dist.reshape(-1, k)
    idx = idx.reshape(-1, k)

    near = dist[:, 0] <= radius
    inside = np.zeros(len(centers), dtype=bool)
    if len(pts) >= 3:
        try:
            tri = Delaunay(xy)
            inside = tri.find_simplex(centers) >= 0
        except QhullError:
            pass  # collinear cloud: no interior to fill
    covered = near | inside

    # Shepard weights; for covered-but-not-near pixels (interior holes) the
    # radius cut is dropped so the nearest points still contribute.
    w = 1.0 / np.maximum(dist, 1e-12) ** 2
    w[near[:, None] & (dist > radius)] = 0.0
    w[~covered] = 0.0
    wsum = w.sum(axis=1)
    wsum[wsum == 0.0] = 1.0
    w = w / wsum[:, None]

    vals = np.concatenate([pts, scan.texture], axis=1)  # (N, 6)
    interp = np.einsum("pk,pkc->pc", w, vals[idx])
    interp[~covered] = 0.0

    geom = interp[:, :3].reshape(m, n, 3)
    tex = np.clip(interp[:, 3:].reshape(m, n, 3), 0.0, 1.0)
    tex[~covered.reshape(m, n)] = 0.0
    mask = covered.reshape(m, n).astype(np.float64)
    if not np.any(mask):
        raise EmptyProjection("no pixel covered by the scan")
    return geom, tex, mask
