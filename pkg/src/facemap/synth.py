"""Synthetic scans with closed-form differential-geometry ground truth.

Two roles: analytic test surfaces (plane, sphere, cylinder, saddle,
ellipsoid) whose true normals, principal curvatures and shape index are
known pointwise, and a separable six-class benchmark of ellipsoid "faces".
Each benchmark class deforms one of six disjoint disc regions arranged on
a ring; other regions receive small random per-scan nuisance deformations
so only the class's own region carries discriminative signal. Texture gets
a matching darkening mark so the photometric map is informative too.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .attrmaps import shape_index_from_curvatures
from .scan import EXPRESSIONS, FaceScan, ManifestRow, save_scan, write_manifest

SURFACES = ("plane", "tilted_plane", "sphere", "cylinder", "saddle", "ellipsoid")

# the umbilic value of a convex cap facing the viewer under this package's
# sign convention (positive curvature toward the viewer)
SPHERE_CAP_SHAPE_INDEX = 0.0

# benchmark geometry: six disjoint class regions on a ring around the apex
REGION_RING_MM = 48.0
REGION_RADIUS_MM = 12.0
REGION_CENTERS = tuple(
    (REGION_RING_MM * math.cos(k * math.pi / 3.0),
     REGION_RING_MM * math.sin(k * math.pi / 3.0))
    for k in range(6)
)
LEVEL_AMPLITUDE_MM = {3: 7.0, 4: 10.0}
NUISANCE_MAX_MM = 1.5
BASE_AXES_MM = (70.0, 90.0, 55.0)
BENCHMARK_PITCH_MM = 2.5

# fixed anchor features inside the class-free center zone. They pin the
# min-max range of the shape-index and texture maps for every scan, so
# per-scan normalization cannot leak class amplitude into distant pixels.
ANCHOR_DIMPLE = ((0.0, -20.0), -3.0, 8.0)   # (center, amplitude, radius)
ANCHOR_BUMP = ((0.0, 20.0), 3.0, 8.0)
ANCHOR_MARK = 0.4


@dataclass
class SyntheticSpec:
    surface: str
    radius: float = 50.0                      # sphere/cylinder/saddle
    axes: tuple = BASE_AXES_MM                # ellipsoid semi-axes
    axis: str = "y"                           # cylinder axis direction
    sample_pitch: float = 1.0
    extent: float = 30.0                      # half-width of sampled square
    noise_sigma: float = 0.0
    class_id: int | None = None
    deform_amplitude: float = 0.0


@dataclass
class SyntheticSurface:
    scan: FaceScan
    geom: np.ndarray          # (m, n, 3) grid-sampled coordinates
    mask: np.ndarray          # (m, n)
    normals: np.ndarray       # (m, n, 3) true outward unit normals
    k1: np.ndarray            # (m, n) true principal curvatures, k1 >= k2
    k2: np.ndarray
    si: np.ndarray            # (m, n) true shape index


def _height_and_partials(spec: SyntheticSpec, x, y):
    """h, hx, hy, hxx, hxy, hyy and a domain-validity mask for the surface."""
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    if spec.surface == "plane":
        return zero, zero, zero, zero, zero, zero, one > 0
    if spec.surface == "tilted_plane":
        return x.copy(), one, zero, zero, zero, zero, one > 0
    if spec.surface == "sphere":
        r = spec.radius
        rho2 = x * x + y * y
        ok = rho2 < (0.98 * r) ** 2
        h = np.sqrt(np.maximum(r * r - rho2, 1e-12))
        hx = -x / h
        hy = -y / h
        hxx = -(h * h + x * x) / h ** 3
        hxy = -(x * y) / h ** 3
        hyy = -(h * h + y * y) / h ** 3
        return h, hx, hy, hxx, hxy, hyy, ok
    if spec.surface == "cylinder":
        r = spec.radius
        u = x if spec.axis == "y" else y
        ok = np.abs(u) < 0.98 * r
        h = np.sqrt(np.maximum(r * r - u * u, 1e-12))
        hu = -u / h
        huu = -(r * r) / h ** 3
        if spec.axis == "y":
            return h, hu, zero, huu, zero, zero, ok
        return h, zero, hu, zero, zero, huu, ok
    if spec.surface == "saddle":
        r = spec.radius
        h = (x * x - y * y) / (2.0 * r)
        return h, x / r, -y / r, one / r, zero, -one / r, one > 0
    if spec.surface == "ellipsoid":
        a, b, c = spec.axes
        s = 1.0 - (x / a) ** 2 - (y / b) ** 2
        ok = s > 0.02
        s = np.maximum(s, 1e-12)
        h = c * np.sqrt(s)
        hx = -c * x / (a * a * np.sqrt(s))
        hy = -c * y / (b * b * np.sqrt(s))
        hxx = -c / (a * a * np.sqrt(s)) - c * x * x / (a ** 4 * s ** 1.5)
        hxy = -c * x * y / (a * a * b * b * s ** 1.5)
        hyy = -c / (b * b * np.sqrt(s)) - c * y * y / (b ** 4 * s ** 1.5)
        return h, hx, hy, hxx, hxy, hyy, ok
    raise ValueError(f"unknown surface {spec.surface!r}")


def graph_curvatures(hx, hy, hxx, hxy, hyy):
    """Principal curvatures of z = h(x, y), convex-toward-+z positive.

    Eigenvalues of the shape operator of the graph, negated so a dome seen
    from +z has positive curvature; returned with k1 >= k2.
    """
    g = 1.0 + hx * hx + hy * hy
    sg = np.sqrt(g)
    # shape operator S = (I + grad grad^T)^{-1} Hess / sqrt(g)
    tr = ((1.0 + hy * hy) * hxx - 2.0 * hx * hy * hxy
          + (1.0 + hx * hx) * hyy) / (g * sg)
    det = (hxx * hyy - hxy * hxy) / (g * g)
    # roots of k^2 - tr k + det via the symmetric 2x2 helper
    disc = np.sqrt(np.maximum(tr * tr / 4.0 - det, 0.0))
    lam1 = tr / 2.0 + disc
    lam2 = tr / 2.0 - disc
    return -lam2, -lam1


def _surface_normals(hx, hy):
    n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _grid(spec: SyntheticSpec):
    half = int(math.floor(spec.extent / spec.sample_pitch))
    coords = np.arange(-half, half + 1) * spec.sample_pitch
    # row 0 at +y to match the projection's image convention
    x, y = np.meshgrid(coords, coords[::-1], indexing="xy")
    return x, y


def _bump_profile(x, y, center, radius):
    """Compactly supported quartic bump, exactly zero outside its disc."""
    rho2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    t = np.maximum(1.0 - rho2 / (radius * radius), 0.0)
    return t * t


def _pattern_profile(x, y, center, radius):
    """Volume-neutral deformation: center bump ringed by a dent (moat).

    With u = (rho/radius)^2 the profile is (1-u)^2 (1-4u), whose area
    integral over the disc vanishes. Adding it anywhere changes no global
    statistic of the cloud to first order (no net volume, no first-moment
    shift), so class identity lives purely in the pattern's location.
    """
    rho2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
    u = rho2 / (radius * radius)
    inside = u < 1.0
    t = np.where(inside, 1.0 - u, 0.0)
    return t * t * np.where(inside, 1.0 - 4.0 * u, 0.0)


def _default_texture(x, y):
    r = 0.70 + 0.10 * np.sin(x / 17.0)
    g = 0.55 + 0.10 * np.cos(y / 23.0)
    b = 0.45 + 0.05 * np.sin((x + y) / 29.0)
    return np.stack([r, g, b], axis=-1)


def generate(spec: SyntheticSpec, seed: int = 0) -> SyntheticSurface:
    """Grid-sample a surface and attach its analytic oracle fields.

    Noise (if any) perturbs the scan's z coordinates only; oracle fields
    always describe the clean surface. A class deformation, when requested,
    adds the class's bump to the height field (oracle fields then describe
    the deformed surface only outside the bump's support).
    """
    x, y = _grid(spec)
    h, hx, hy, hxx, hxy, hyy, ok = _height_and_partials(spec, x, y)
    if spec.class_id is not None:
        h = h + spec.deform_amplitude * _pattern_profile(
            x, y, REGION_CENTERS[spec.class_id], REGION_RADIUS_MM)
    k1, k2 = graph_curvatures(hx, hy, hxx, hxy, hyy)
    si = shape_index_from_curvatures(k1, k2)
    normals = _surface_normals(hx, hy)

    rng = np.random.default_rng(seed)
    z = h.copy()
    if spec.noise_sigma > 0.0:
        z = z + rng.normal(0.0, spec.noise_sigma, size=z.shape)

    geom = np.stack([x, y, z], axis=-1)
    mask = ok.astype(np.float64)
    pts = geom[ok]
    tex = np.clip(_default_texture(x, y)[ok], 0.0, 1.0)
    scan = FaceScan(points=pts, texture=tex, nose_tip=None)
    zero = ~ok
    out = SyntheticSurface(scan=scan, geom=geom * mask[:, :, None], mask=mask,
                           normals=normals * mask[:, :, None],
                           k1=np.where(zero, 0.0, k1),
                           k2=np.where(zero, 0.0, k2),
                           si=np.where(zero, 0.0, si))
    return out


def _rotation_xyz(rx, ry, rz):
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _subject_params(seed, subject):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + subject]))
    a = BASE_AXES_MM[0] * (1.0 + rng.uniform(-0.08, 0.08))
    b = BASE_AXES_MM[1] * (1.0 + rng.uniform(-0.08, 0.08))
    c = BASE_AXES_MM[2] * (1.0 + rng.uniform(-0.08, 0.08))
    wave_amp = rng.uniform(0.5, 1.5)
    wave_phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    tint = rng.uniform(-0.05, 0.05, size=3)
    return (a, b, c), wave_amp, wave_phase, tint


def make_benchmark_scan(seed: int, subject: int, class_id: int,
                        level: int) -> FaceScan:
    """One benchmark scan: subject ellipsoid + class bump + nuisance bumps,
    under a small random rigid misalignment. Deterministic given arguments."""
    axes, wave_amp, wave_phase, tint = _subject_params(seed, subject)
    a, b, c = axes
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, subject, class_id, level]))

    pitch = BENCHMARK_PITCH_MM
    # the y range is asymmetric on purpose: the longer +y side gives the
    # pose normalization an unambiguous up direction
    xs = np.arange(-0.92 * a, 0.92 * a + pitch / 2, pitch)
    ys = np.arange(-0.86 * b, 0.95 * b + pitch / 2, pitch)
    x, y = np.meshgrid(xs, ys, indexing="xy")
    s = 1.0 - (x / a) ** 2 - (y / b) ** 2
    ok = s > 0.02
    x, y, s = x[ok], y[ok], s[ok]

    z = c * np.sqrt(s)
    z = z + wave_amp * np.sin(x / 25.0 + wave_phase[0]) * np.sin(
        y / 31.0 + wave_phase[1])

    # every class applies the same volume-neutral pattern, only its region
    # differs; global statistics therefore carry no class information
    amp = LEVEL_AMPLITUDE_MM[level]
    tex = np.clip(
        np.array([0.78, 0.62, 0.52]) + tint, 0.05, 0.95
    ) * np.ones((len(x), 3))
    for region in range(6):
        profile = _pattern_profile(x, y, REGION_CENTERS[region], REGION_RADIUS_MM)
        if region == class_id:
            strength = amp
        else:
            strength = rng.uniform(0.3, NUISANCE_MAX_MM)
        z = z + strength * profile
        mark = 0.03 * strength
        tex[:, 0] -= mark * np.abs(profile)
        tex[:, 1] -= mark * np.abs(profile)
    for center, strength, radius in (ANCHOR_DIMPLE, ANCHOR_BUMP):
        profile = _bump_profile(x, y, center, radius)
        z = z + strength * profile
        tex[:, 0] -= ANCHOR_MARK * profile
        tex[:, 1] -= ANCHOR_MARK * profile
    tex = np.clip(tex, 0.0, 1.0)

    apex = np.array([0.0, 0.0,
                     c + wave_amp * math.sin(wave_phase[0]) * math.sin(wave_phase[1])])
    pts = np.stack([x, y, z], axis=-1)

    rot = _rotation_xyz(rng.uniform(-0.017, 0.017), rng.uniform(-0.017, 0.017),
                        rng.uniform(-0.035, 0.035))
    shift = rng.uniform(-5.0, 5.0, size=3)
    pts = pts @ rot.T + shift
    tip = rot @ apex + shift
    return FaceScan(points=pts, texture=tex, nose_tip=tip,
                    subject_id=f"S{subject:03d}",
                    expression=EXPRESSIONS[class_id], intensity=level)


def generate_benchmark(n_subjects: int = 12, seed: int = 7):
    """All (subject, expression, level) scans with their manifest rows.

    Yields 12 scans per subject: six classes at the two strongest levels,
    mirroring the protocols' eligible-subset structure. Classes are
    geometrically separable by construction.
    """
    if n_subjects < 12:
        raise ValueError("benchmark needs at least 12 subjects")
    rows, scans = [], []
    for subject in range(n_subjects):
        for class_id in range(6):
            for level in sorted(LEVEL_AMPLITUDE_MM):
                scan = make_benchmark_scan(seed, subject, class_id, level)
                scan_id = f"S{subject:03d}_{scan.expression}_{level}"
                rows.append(ManifestRow(scan_id, scan.subject_id,
                                        scan.expression, level,
                                        f"{scan_id}.xyzrgb"))
                scans.append(scan)
    return rows, scans


def write_benchmark(out_dir, n_subjects: int = 12, seed: int = 7) -> str:
    """Write benchmark scan files plus manifest.csv; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows, scans = generate_benchmark(n_subjects=n_subjects, seed=seed)
    for row, scan in zip(rows, scans):
        save_scan(os.path.join(out_dir, row.path), scan)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, rows)
    return manifest_path


def region_mask(geom, mask, class_id: int, dilation_mm: float = 8.0) -> np.ndarray:
    """Pixels of a projected map lying in a class's (dilated) support disc.

    Uses the geometry map's own (x, y) channels, so no grid bookkeeping is
    needed. Intended for checks against the benchmark's known deformation
    regions.
    """
    cx, cy = REGION_CENTERS[class_id]
    d2 = (geom[:, :, 0] - cx) ** 2 + (geom[:, :, 1] - cy) ** 2
    return (d2 <= (REGION_RADIUS_MM + dilation_mm) ** 2) & (
        np.asarray(mask) > 0.5)
