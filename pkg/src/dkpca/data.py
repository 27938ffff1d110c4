"""Synthetic streams with a controlled spectrum, variance estimates and ground truth.

Also holds the dataset readers: comma-separated numeric rows and idx-style
unsigned-byte image files.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidDimensionError, NonConvergenceError

__all__ = [
    "CovarianceSpec",
    "GroundTruth",
    "TAIL_RULE",
    "make_covariance",
    "sample_stream",
    "SyntheticSource",
    "ArraySource",
    "estimate_sigma2",
    "batch_top_eigenvector",
    "center_dataset",
    "load_csv",
    "load_idx",
    "write_idx",
    "load_dataset",
    "save_csv",
]

TAIL_RULE = "lambda_2..lambda_d equally spaced from lambda_2 down to lambda_2/2"

IDX_UBYTE_3D = 0x00000803


@dataclass(frozen=True)
class CovarianceSpec:
    """Population covariance ``Q diag(eigenvalues) Q^T`` plus how to sample it.

    ``kind="gaussian"`` draws ``N(0, Sigma)``. ``kind="bounded"`` draws
    ``x = C u`` with ``u_i ~ Uniform(-a, a)`` and every sample satisfies
    ``||x|| <= r``.
    """

    eigenvalues: np.ndarray
    Q: np.ndarray
    kind: str = "gaussian"
    C: np.ndarray | None = field(default=None, repr=False)
    half_range: float | None = None
    r: float | None = None

    @property
    def d(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda2(self) -> float:
        return float(self.eigenvalues[1])

    @property
    def eigengap(self) -> float:
        return self.lambda1 - self.lambda2

    @property
    def q_star(self) -> np.ndarray:
        return self.Q[:, 0].copy()

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    def matrix(self) -> np.ndarray:
        """Dense Sigma. Only for tests and small d."""
        return (self.Q * self.eigenvalues) @ self.Q.T

    def quad(self, X: np.ndarray) -> np.ndarray:
        """``x^T Sigma x`` for each row of X, via the eigenbasis."""
        return ((X @ self.Q) ** 2) @ self.eigenvalues

    def metadata(self) -> dict:
        return {
            "d": self.d,
            "kind": self.kind,
            "eigenvalues": self.eigenvalues.tolist(),
            "eigengap": self.eigengap,
            "tail_rule": TAIL_RULE,
            "q_star": self.q_star.tolist(),
            "half_range": self.half_range,
            "r": self.r,
        }


@dataclass(frozen=True)
class GroundTruth:
    q_star: np.ndarray
    lambda1: float
    lambda2: float
    sigma2: float | None = None
    residual: float = 0.0
    iterations: int = 0


def _haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    Z = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.diag(R))


def make_covariance(d: int, lambda1: float, eigengap: float, seed=None, kind: str = "gaussian",
                    half_range: float = 1.0, reference_half_range: float | None = None) -> CovarianceSpec:
    """Random-basis covariance with top eigenvalue ``lambda1`` and the given gap.

    The tail follows :data:`TAIL_RULE`. For ``kind="bounded"`` the mixing
    matrix is ``C = Q diag(sqrt(3 lambda) / a_ref)``, with ``a_ref`` defaulting
    to ``half_range``, so the requested spectrum is reproduced exactly. With a
    fixed ``reference_half_range`` the mixing matrix stays put and the
    covariance scales as ``(half_range / a_ref)^2``.
    """
    if d < 2:
        raise InvalidDimensionError(f"d must be >= 2, got {d}")
    if not 0 < eigengap < lambda1:
        raise ValueError(f"need 0 < eigengap < lambda1, got gap={eigengap}, lambda1={lambda1}")
    rng = np.random.default_rng(seed)
    lam2 = lambda1 - eigengap
    lam = np.concatenate([[lambda1], np.linspace(lam2, lam2 / 2.0, d - 1)])
    Q = _haar_orthogonal(d, rng)
    if kind == "gaussian":
        return CovarianceSpec(lam, Q)
    if kind != "bounded":
        raise ValueError(f"unknown kind {kind!r}")
    a = float(half_range)
    if not a > 0:
        raise ValueError("half_range must be > 0")
    a_ref = a if reference_half_range is None else float(reference_half_range)
    C = Q * (np.sqrt(3.0 * lam) / a_ref)
    # ||C u||^2 = sum_i ||c_i||^2 u_i^2 <= a^2 ||C||_F^2, attained at the cube corners
    r = a * float(np.linalg.norm(C))
    return CovarianceSpec(lam * (a / a_ref) ** 2, Q, "bounded", C, a, r)


def sample_stream(spec: CovarianceSpec, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` samples as an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if spec.kind == "gaussian":
        g = rng.standard_normal((n, spec.d))
        return (g * np.sqrt(spec.eigenvalues)) @ spec.Q.T
    u = rng.uniform(-spec.half_range, spec.half_range, size=(n, spec.d))
    return u @ spec.C.T


class SyntheticSource:
    """Endless stream from a :class:`CovarianceSpec`, generated in chunks.

    Skipped samples are still drawn, so the data seen after a skip does not
    depend on the discard count.
    """

    def __init__(self, spec: CovarianceSpec, rng: np.random.Generator, chunk: int = 8192):
        self.spec = spec
        self.rng = rng
        self.chunk = chunk
        self._buf = np.empty((0, spec.d))
        self._pos = 0

    def _ensure(self, k: int) -> None:
        left = self._buf.shape[0] - self._pos
        if left >= k:
            return
        fresh = sample_stream(self.spec, max(self.chunk, k - left), self.rng)
        self._buf = np.vstack([self._buf[self._pos:], fresh])
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        self._ensure(k)
        out = self._buf[self._pos:self._pos + k]
        self._pos += k
        return out

    def skip(self, k: int) -> int:
        self._ensure(k)
        self._pos += k
        return k


class ArraySource:
    """Finite stream over the rows of an array, optionally in a permuted order."""

    def __init__(self, X: np.ndarray, order: np.ndarray | None = None):
        self.X = X
        self.order = np.arange(X.shape[0]) if order is None else order
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        idx = self.order[self._pos:self._pos + k]
        self._pos += idx.shape[0]
        return self.X[idx]

    def skip(self, k: int) -> int:
        n = min(k, self.order.shape[0] - self._pos)
        self._pos += n
        return n


def _frob_deviation(groups: np.ndarray, quad, sigma_frob2: float) -> np.ndarray:
    """``||mean_i x_i x_i^T - Sigma||_F^2`` per group, without forming x x^T.

    ``groups`` has shape ``(M, n_avg, d)``.
    """
    n_avg = groups.shape[1]
    gram = np.einsum("mid,mjd->mij", groups, groups)
    a_frob2 = (gram**2).sum(axis=(1, 2)) / n_avg**2
    cross = quad(groups.reshape(-1, groups.shape[2])).reshape(groups.shape[:2]).sum(axis=1) / n_avg
    return a_frob2 - 2.0 * cross + sigma_frob2


def estimate_sigma2(source, M: int = 10_000, rng=None, n_avg: int = 1) -> float:
    """Monte-Carlo estimate of ``E ||A - Sigma||_F^2``.

    ``A`` is the mean of ``n_avg`` independent rank-one sample covariances, so
    ``n_avg=1`` estimates the single-sample variance and ``n_avg=N`` the
    N-averaged one. ``source`` is a :class:`CovarianceSpec` (exact Sigma) or
    an ``(n, d)`` sample array, resampled with replacement, whose second-moment
    matrix stands in for Sigma.
    """
    if M < 100:
        raise ValueError(f"M must be >= 100, got {M}")
    if n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if isinstance(source, CovarianceSpec):
        groups = sample_stream(source, M * n_avg, rng).reshape(M, n_avg, source.d)
        quad = source.quad
        sigma_frob2 = float(source.eigenvalues @ source.eigenvalues)
    else:
        X = np.asarray(source, dtype=np.float64)
        S = X.T @ X / X.shape[0]
        groups = X[rng.integers(X.shape[0], size=(M, n_avg))]
        quad = lambda Y: np.einsum("id,de,ie->i", Y, S, Y)  # noqa: E731
        sigma_frob2 = float((S * S).sum())
    return float(_frob_deviation(groups, quad, sigma_frob2).mean())


def _power(apply, v: np.ndarray, tol: float, max_iter: int, rtol: float):
    resid = math.inf
    for it in range(1, max_iter + 1):
        w = apply(v)
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return v, 0.0, 0.0, it
        w = w / nrm
        diff = w - float(w @ v) * v
        step = float(diff @ diff)  # squared sine between successive iterates
        v = w
        if step < tol and resid <= rtol * lam:
            break
    w = apply(v)
    lam = float(v @ w)
    return v, lam, float(np.linalg.norm(w - lam * v)), it


def batch_top_eigenvector(data, tol: float = 1e-12, max_iter: int = 10_000, rtol: float = 1e-10,
                          seed=0) -> GroundTruth:
    """Top eigenpair of Sigma, or of the sample second-moment matrix of ``data``.

    Samples are handled by matrix-free power iteration (``A v = X^T (X v) / n``)
    until successive iterates differ by a squared sine below ``tol`` and the
    eigen-residual is below ``rtol * lambda1``. ``lambda2`` comes from one
    deflation.

    Raises:
        NonConvergenceError: ``max_iter`` reached first; ``residual`` is set.
    """
    if isinstance(data, CovarianceSpec):
        return GroundTruth(data.q_star, data.lambda1, data.lambda2)
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("data must be a non-empty (n, d) array")
    n = X.shape[0]

    def apply(v):
        return X.T @ (X @ v) / n

    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(X.shape[1])
    q, lam1, resid, iters = _power(apply, v0 / np.linalg.norm(v0), tol, max_iter, rtol)
    if iters >= max_iter and resid > rtol * lam1:
        raise NonConvergenceError(f"power iteration did not converge in {max_iter} iterations "
                                  f"(residual {resid:.3e})", residual=resid)

    def deflated(v):
        return apply(v) - lam1 * float(q @ v) * q

    u0 = rng.standard_normal(X.shape[1])
    u0 = u0 - float(q @ u0) * q
    lam2 = 0.0
    if np.linalg.norm(u0) > 0:
        u = u0 / np.linalg.norm(u0)
        prev = -1.0
        for _ in range(max_iter):
            w = deflated(u)
            w = w - float(q @ w) * q
            lam2 = float(u @ w)
            nrm = float(np.linalg.norm(w))
            if nrm == 0.0 or abs(lam2 - prev) <= 1e-13 * max(lam1, 1e-300):
                break
            prev = lam2
            u = w / nrm
    return GroundTruth(q, lam1, max(lam2, 0.0), residual=resid, iterations=iters)


def center_dataset(samples) -> np.ndarray:
    """Subtract the empirical mean from every row."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("samples must be a non-empty (n, d) array")
    return X - X.mean(axis=0)


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_csv(path) -> np.ndarray:
    """Read comma-separated numeric rows; a non-numeric first token marks a header."""
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        skip = 0 if _is_number(first.split(",")[0].strip()) else 1
        X = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if X.shape[0] < 1 or X.shape[1] < 2:
        raise DataError(f"{path}: need at least one row of >= 2 columns, got {X.shape}")
    if not np.isfinite(X).all():
        raise DataError(f"{path}: non-finite values")
    return X


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read an idx unsigned-byte image file into ``(n, rows*cols)`` floats in [0, 1]."""
    try:
        with _open_maybe_gzip(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16:
        raise DataError(f"{path}: truncated idx header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_UBYTE_3D:
        raise DataError(f"{path}: bad idx magic 0x{magic:08x}")
    count = n * rows * cols
    if len(raw) - 16 < count:
        raise DataError(f"{path}: expected {count} pixel bytes, found {len(raw) - 16}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def write_idx(path, images: np.ndarray) -> None:
    """Write ``(n, rows, cols)`` uint8 images in idx format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_UBYTE_3D, n, rows, cols))
        fh.write(images.tobytes())


def load_dataset(path) -> np.ndarray:
    """Dispatch on content: idx magic (optionally gzipped) or CSV text."""
    if not os.path.exists(path):
        raise DataError(f"no such dataset file: {path}")
    with _open_maybe_gzip(path) as fh:
        head = fh.read(4)
    if len(head) == 4 and struct.unpack(">I", head)[0] == IDX_UBYTE_3D:
        return load_idx(path)
    return load_csv(path)


def save_csv(path, X: np.ndarray, header: list[str] | None = None, fmt: str = "%.17g") -> None:
    """Write rows atomically (temp file in the target directory, then rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            np.savetxt(fh, X, delimiter=",", fmt=fmt,
                       header=",".join(header) if header else "", comments="")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
