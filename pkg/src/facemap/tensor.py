"""Dense float64 tensors, shared linear algebra, and the FTNSR1 container.

Tensors are plain C-contiguous float64 ``numpy.ndarray`` values. They are
treated as immutable once produced by a public operation; nothing in this
package mutates an array it did not allocate.

FTNSR1 container layout (all integers little-endian):

    bytes 0..5   ASCII magic ``FTNSR1``
    byte  6      dtype code (0x01 = float64)
    byte  7      ndim (0..8)
    next         ndim u64 extents
    payload      row-major float64 values
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    DimOverflow,
    RankDeficient,
    TruncatedPayload,
)

MAGIC = b"FTNSR1"
DTYPE_FLOAT64 = 0x01
MAX_NDIM = 8

# guards against corrupt headers asking for absurd allocations
_MAX_ELEMENTS = 1 << 40

_RANK_RTOL = 1e-12


def write_tensor(path, values) -> None:
    """Write a float64 tensor to ``path`` in the FTNSR1 container format.

    The payload is bit-exact: every finite double round-trips unchanged,
    including signed zeros and denormals. Non-finite values are rejected.
    """
    arr = np.asarray(values, dtype="<f8", order="C")
    if arr.ndim > MAX_NDIM:
        raise DimOverflow(f"ndim {arr.ndim} exceeds {MAX_NDIM}")
    if any(e <= 0 for e in arr.shape):
        raise DimOverflow(f"extents must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite values")
    header = MAGIC + bytes([DTYPE_FLOAT64, arr.ndim])
    header += b"".join(struct.pack("<Q", e) for e in arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an FTNSR1 container back into a float64 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise TruncatedPayload(f"{path}: file shorter than header")
    if blob[:6] != MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:6]!r}")
    if blob[6] != DTYPE_FLOAT64:
        raise BadMagic(f"{path}: unsupported dtype code 0x{blob[6]:02x}")
    ndim = blob[7]
    if ndim > MAX_NDIM:
        raise DimOverflow(f"{path}: ndim {ndim} exceeds {MAX_NDIM}")
    offset = 8 + 8 * ndim
    if len(blob) < offset:
        raise TruncatedPayload(f"{path}: header truncated")
    shape = tuple(
        struct.unpack_from("<Q", blob, 8 + 8 * i)[0] for i in range(ndim)
    )
    count = 1
    for e in shape:
        if e == 0:
            raise DimOverflow(f"{path}: zero extent in {shape}")
        count *= e
        if count > _MAX_ELEMENTS:
            raise DimOverflow(f"{path}: element count overflow in {shape}")
    expected = offset + 8 * count
    if len(blob) < expected:
        raise TruncatedPayload(
            f"{path}: payload has {len(blob) - offset} bytes, need {8 * count}"
        )
    if len(blob) > expected:
        raise TruncatedPayload(f"{path}: {len(blob) - expected} trailing bytes")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    arr = arr.reshape(shape).astype(np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise TruncatedPayload(f"{path}: payload contains non-finite values")
    return arr


def solve_least_squares(A, b) -> np.ndarray:
    """Minimize ||A x - b||_2 for a k x p system with k >= p.

    Uses an orthogonal factorization (SVD) rather than normal equations so
    ill-conditioned window fits stay accurate. Raises RankDeficient when the
    smallest singular value falls below 1e-12 times the largest.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2:
        raise DimMismatch(f"A must be 2-D, got ndim {A.ndim}")
    k, p = A.shape
    if b.shape != (k,):
        raise DimMismatch(f"b has shape {b.shape}, expected ({k},)")
    if k < p:
        raise DimMismatch(f"underdetermined system: {k} rows < {p} columns")
    x, _, _, sv = np.linalg.lstsq(A, b, rcond=None)
    if sv[0] == 0.0 or sv[-1] < _RANK_RTOL * sv[0]:
        raise RankDeficient(
            f"singular values span {sv[-1]:.3e} .. {sv[0]:.3e}"
        )
    return x


def eigen_sym2(a, b, c):
    """Eigenvalues of the symmetric 2x2 matrix [[a, b], [b, c]].

    Returns (l1, l2) with l1 >= l2. Accepts scalars or broadcastable arrays.
    The half-trace/hypot form keeps l1 + l2 = a + c to rounding error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    h = 0.5 * (a + c)
    d = np.hypot(0.5 * (a - c), b)
    l1 = h + d
    l2 = h - d
    if l1.ndim == 0:
        return float(l1), float(l2)
    return l1, l2
