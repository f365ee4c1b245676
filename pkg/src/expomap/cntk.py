"""Convolutional neural tangent kernel between pixel pairs of a prior image.

The kernel of an infinitely wide convolutional network (LeakyReLU
activations, q x q filters, zero-padded "same" convolutions, no pooling)
is built by a layer recursion over pixel-pair tensors:

  covariance:  sigma_h[p,p'] = (1/q^2) * sum_off ktilde_h[p+off, p'+off]
  tangent:     theta_h[p,p'] = (1/q^2) * sum_off (kdot_h * theta_{h-1}
                                                  + ktilde_h)[p+off, p'+off]

where ktilde/kdot are the closed-form Gaussian expectations of the
activation and its derivative, evaluated entrywise on sigma_{h-1}, and
offsets falling outside the grid contribute zero (padding). The recursion
starts from sigma_0[p,p'] = A[p] * A[p'].

Two evaluation paths are provided. ``cntk_layer`` materializes dense
pixel-pair tensors and is intended for small grids and as a reference.
``compute_kernel`` exploits the fact that a requested entry (p, p') only
ever consumes values at diagonally shifted pairs (p+d, p'+d) with
|d| <= layers*(q-1)/2, so each entry is evaluated on a small shrinking
window. That keeps a 128 x 128 grid tractable and makes the result exactly
independent of tiling and of which other entries were requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainTooSmall, OutOfMemory
from .priors import PriorImage

_DTYPES = {"f32": np.float32, "f64": np.float64}

# Live window tensors per tile (sigma, theta, ktilde, kdot, scratch, masks).
_TENSORS_PER_TILE = 6


@dataclass
class CntkConfig:
    """Architecture and evaluation parameters of the kernel."""

    layers: int = 6
    filter_size: int = 3
    leaky_slope: float = 0.1
    precision: str = "f64"
    tile_rows: int = 1024
    mem_limit_bytes: int = 2 << 30

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd and >= 1")
        if not 0.0 <= self.leaky_slope <= 1.0:
            raise ValueError("leaky_slope must lie in [0, 1]")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.tile_rows < 1:
            raise ValueError("tile_rows must be >= 1")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def radius(self) -> int:
        return (self.filter_size - 1) // 2


@dataclass
class KernelBlock:
    """A rectangular block of the pixel-pair kernel matrix.

    rows/cols are ordered flat (row-major) pixel indices; entries[i, j] is
    the kernel value between rows[i] and cols[j].
    """

    rows: np.ndarray
    cols: np.ndarray
    entries: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.entries = np.asarray(self.entries)
        if self.entries.shape != (len(self.rows), len(self.cols)):
            raise ValueError("entries shape does not match row/col index sets")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("kernel entries must be finite")


def _coeffs(slope: float):
    c1 = (1.0 + slope) / 2.0
    c2 = (1.0 - slope) / 2.0
    return c1 * c1, c2 * c2, 1.0 / (c1 * c1 + c2 * c2)


def dual_activation(s11, s12, s22, slope: float):
    """Normalized Gaussian expectation E[act(u) act(v)].

    (u, v) is centered bivariate normal with covariance [[s11, s12],
    [s12, s22]]; act is LeakyReLU with the given negative slope. The
    normalization keeps dual_activation(d, d, d) == d, so unit variances
    survive arbitrary depth. Degenerate marginals (s11 * s22 == 0) yield 0.
    """
    c1sq, c2sq, csig = _coeffs(slope)
    s11 = np.asarray(s11)
    prod = s11 * s22
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.sqrt(np.maximum(prod, 0.0))
        rho = np.clip(s12 / norm, -1.0, 1.0)
        # (1-rho)(1+rho) instead of 1-rho^2: exact near |rho| = 1, where the
        # naive form loses ~8 digits to cancellation.
        sin_part = np.sqrt((1.0 - rho) * (1.0 + rho))
        val = csig * (
            c1sq * s12
            + c2sq * norm * (2.0 / np.pi) * (sin_part + rho * np.arcsin(rho))
        )
    out = np.where(prod > 0, val, 0.0)
    return out if out.ndim else out.item()


def dual_derivative(s11, s12, s22, slope: float):
    """Normalized Gaussian expectation E[act'(u) act'(v)].

    Same conventions as dual_activation; degenerate marginals fall back to
    the uncorrelated value.
    """
    c1sq, c2sq, csig = _coeffs(slope)
    s11 = np.asarray(s11)
    prod = s11 * s22
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.sqrt(np.maximum(prod, 0.0))
        rho = np.where(prod > 0, np.clip(s12 / norm, -1.0, 1.0), 0.0)
        rho = np.where(np.isfinite(rho), rho, 0.0)
    out = csig * (c1sq + c2sq * (2.0 / np.pi) * np.arcsin(rho))
    return out if out.ndim else out.item()


def _dual_pair(s11, s12, s22, slope: float):
    """Both duals at once, sharing prod/norm/rho/arcsin.

    Bitwise-identical to calling dual_activation and dual_derivative; used
    on the hot paths where the two standalone calls would redo the shared
    intermediates on multi-megabyte windows.
    """
    c1sq, c2sq, csig = _coeffs(slope)
    s11 = np.asarray(s11)
    prod = s11 * s22
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.sqrt(np.maximum(prod, 0.0))
        rho = np.clip(s12 / norm, -1.0, 1.0)
        sin_part = np.sqrt((1.0 - rho) * (1.0 + rho))
        asin = np.arcsin(rho)
        val = csig * (
            c1sq * s12 + c2sq * norm * (2.0 / np.pi) * (sin_part + rho * asin)
        )
    ktilde = np.where(prod > 0, val, 0.0)
    kdot = csig * (c1sq + c2sq * (2.0 / np.pi) * np.where(prod > 0, asin, 0.0))
    return ktilde, kdot


def pixel_covariance(prior: PriorImage) -> np.ndarray:
    """Depth-0 covariance: outer product of the prior over flat pixels."""
    a = prior.values.ravel()
    return np.outer(a, a)


def _box_sum_pairs(x: np.ndarray, shape: tuple[int, int], q: int) -> np.ndarray:
    """Zero-padded q x q patch sum over both pixel axes of a pair tensor."""
    m, n = shape
    r = (q - 1) // 2
    x4 = x.reshape(m, n, m, n)
    padded = np.zeros((m + 2 * r, n + 2 * r, m + 2 * r, n + 2 * r), dtype=x.dtype)
    padded[r : r + m, r : r + n, r : r + m, r : r + n] = x4
    out = np.zeros_like(x4)
    for da in range(q):
        for db in range(q):
            out += padded[da : da + m, db : db + n, da : da + m, db : db + n]
    return out.reshape(m * n, m * n)


def cntk_layer(
    sigma_prev: np.ndarray,
    theta_prev: np.ndarray,
    slope: float,
    q: int,
    shape: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """One dense recursion step over full-grid pixel-pair tensors.

    sigma_prev/theta_prev are (P, P) arrays over all P = rows*cols pixels in
    row-major order. Memory grows as P^2; use only on small grids.
    """
    m, n = shape
    p = m * n
    if sigma_prev.shape != (p, p) or theta_prev.shape != (p, p):
        raise DomainTooSmall(
            f"dense layer step needs full-grid ({p}, {p}) tensors, "
            f"got {sigma_prev.shape} and {theta_prev.shape}"
        )
    d = np.diagonal(sigma_prev)
    ktilde, kdot = _dual_pair(d[:, None], sigma_prev, d[None, :], slope)
    # Same-pixel pairs have rho = 1 exactly: the duals collapse to the
    # variance and to 1. Writing the closed values avoids the arcsin noise
    # near rho = 1 (its derivative is unbounded there).
    np.fill_diagonal(ktilde, d)
    np.fill_diagonal(kdot, 1.0)
    inner = kdot * theta_prev + ktilde
    inv_q2 = 1.0 / (q * q)
    sigma = _box_sum_pairs(ktilde, shape, q) * inv_q2
    theta = _box_sum_pairs(inner, shape, q) * inv_q2
    return sigma, theta


def dilate_pixels(pixels, layers: int, q: int, shape: tuple[int, int]) -> np.ndarray:
    """All pixels within Chebyshev radius layers*(q-1)/2 of the input set.

    Input and output are flat row-major indices; output is sorted, unique,
    clipped to the grid.
    """
    m, n = shape
    pixels = np.asarray(pixels, dtype=np.int64).ravel()
    rad = layers * (q - 1) // 2
    if rad == 0:
        return np.unique(pixels)
    offs = np.arange(-rad, rad + 1)
    rr = pixels[:, None, None] // n + offs[None, :, None]
    cc = pixels[:, None, None] % n + offs[None, None, :]
    ok = (rr >= 0) & (rr < m) & (cc >= 0) & (cc < n)
    flat = rr * n + cc  # broadcasts to (len(pixels), 2*rad+1, 2*rad+1)
    return np.unique(flat[ok])


def _gather_field(field_aug: np.ndarray, rr: np.ndarray, cc: np.ndarray, shape):
    """Read a full-grid field at (rr, cc); out-of-grid positions read 0."""
    m, n = shape
    ok = (rr >= 0) & (rr < m) & (cc >= 0) & (cc < n)
    idx = np.where(ok, rr * n + cc, m * n)
    return field_aug[idx], ok


def _augment(field2d: np.ndarray) -> np.ndarray:
    flat = field2d.ravel()
    return np.concatenate([flat, flat[:1] * 0])


def _diag_track(a: np.ndarray, layers: int, q: int) -> list[np.ndarray]:
    """Per-layer variance (diagonal) over the full grid.

    dual_activation leaves the diagonal unchanged, so each step is just the
    zero-padded patch mean of the previous one.
    """
    m, n = a.shape
    r = (q - 1) // 2
    track = [a * a]
    for _ in range(layers - 1):
        prev = track[-1]
        padded = np.zeros((m + 2 * r, n + 2 * r), dtype=a.dtype)
        padded[r : r + m, r : r + n] = prev
        nxt = np.zeros_like(prev)
        for da in range(q):
            for db in range(q):
                nxt += padded[da : da + m, db : db + n]
        # multiply (not divide) to match the pair-tensor aggregation bitwise
        track.append(nxt * prev.dtype.type(1.0 / (q * q)))
    return track


def compute_kernel(prior: PriorImage, cfg: CntkConfig, rows, cols) -> KernelBlock:
    """Kernel values at the requested pixel pairs.

    Evaluates the depth-``cfg.layers`` recursion on the shifted-pair windows
    of each (row, col) pair, processing rows in chunks of ``cfg.tile_rows``.
    Entries are exact regardless of tiling or of which columns are requested.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    m, n = prior.shape
    if rows.size == 0 or cols.size == 0:
        raise ValueError("rows and cols must be nonempty")
    for name, idx in (("rows", rows), ("cols", cols)):
        if idx.min() < 0 or idx.max() >= m * n:
            raise ValueError(f"{name} contain pixel indices outside the grid")

    dtype = cfg.dtype
    q = cfg.filter_size
    r = cfg.radius
    ell = cfg.layers
    a = prior.values.astype(dtype)

    width0 = 2 * ell * r + 1
    nc = len(cols)
    bytes_per_row = _TENSORS_PER_TILE * nc * width0 * width0 * np.dtype(dtype).itemsize
    tile_rows = min(cfg.tile_rows, len(rows))
    if tile_rows * bytes_per_row > cfg.mem_limit_bytes:
        fit = int(cfg.mem_limit_bytes // bytes_per_row)
        raise OutOfMemory(
            f"kernel block needs {tile_rows * bytes_per_row / 2**20:.0f} MiB "
            f"per tile (limit {cfg.mem_limit_bytes / 2**20:.0f} MiB); "
            f"tile_rows={fit} would fit" + ("" if fit >= 1 else " (infeasible: shrink cols)"),
            suggested_tile_rows=fit,
        )

    diag_aug = [_augment(d) for d in _diag_track(a, ell, q)]
    a_aug = _augment(a)

    offs = np.arange(-ell * r, ell * r + 1)
    col_rr = cols[:, None, None] // n + offs[None, :, None]
    col_cc = cols[:, None, None] % n + offs[None, None, :]

    entries = np.empty((len(rows), nc), dtype=dtype)
    for start in range(0, len(rows), tile_rows):
        chunk = rows[start : start + tile_rows]
        row_rr = chunk[:, None, None] // n + offs[None, :, None]
        row_cc = chunk[:, None, None] % n + offs[None, None, :]

        a_row, _ = _gather_field(a_aug, row_rr, row_cc, (m, n))
        a_col, _ = _gather_field(a_aug, col_rr, col_cc, (m, n))
        sigma = a_row[:, None, :, :] * a_col[None, :, :, :]
        theta = sigma.copy()
        same_pixel = (chunk[:, None] == cols[None, :])[:, :, None, None]

        for h in range(1, ell + 1):
            lo = r * (h - 1)
            hi = width0 - lo
            win = slice(lo, hi)
            drow, vrow = _gather_field(
                diag_aug[h - 1], row_rr[:, win, :], row_cc[:, :, win], (m, n)
            )
            dcol, vcol = _gather_field(
                diag_aug[h - 1], col_rr[:, win, :], col_cc[:, :, win], (m, n)
            )
            ktilde, kdot = _dual_pair(drow[:, None], sigma, dcol[None, :], cfg.leaky_slope)
            if same_pixel.any():
                # Same-pixel pairs stay same-pixel under the shared shift:
                # closed values (variance, 1), exactly as in the dense path.
                ktilde = np.where(same_pixel, drow[:, None], ktilde)
                kdot = np.where(same_pixel, 1.0, kdot)
            inner = kdot * theta + ktilde
            # Pairs with an out-of-grid pixel contribute zero (padding).
            inner *= vrow[:, None, :, :]
            inner *= vcol[None, :, :, :]
            ktilde *= vrow[:, None, :, :]
            ktilde *= vcol[None, :, :, :]

            w_out = (hi - lo) - 2 * r
            sigma = np.zeros(ktilde.shape[:2] + (w_out, w_out), dtype=dtype)
            theta = np.zeros_like(sigma)
            for da in range(q):
                for db in range(q):
                    sigma += ktilde[:, :, da : da + w_out, db : db + w_out]
                    theta += inner[:, :, da : da + w_out, db : db + w_out]
            sigma *= dtype(1.0 / (q * q))
            theta *= dtype(1.0 / (q * q))

        entries[start : start + len(chunk)] = theta[:, :, 0, 0]

    return KernelBlock(rows=rows, cols=cols, entries=entries)
