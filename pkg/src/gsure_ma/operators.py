"""Simulated multi-coil Cartesian MRI acquisition.

Complex images are plain ``complex128`` arrays of shape (H, W); multi-coil
k-space is (coils, H, W).  Inside the autodiff tape the same quantities are
carried as real tensors with a leading (re, im) channel axis: (2, H, W) for
images and (coils, 2, H, W) for k-space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from . import autodiff as ad
from .exceptions import ContractError, DimensionError

log = logging.getLogger(__name__)

CG_TOL = 1e-8
CG_MAX_ITER = 200


# ---------------------------------------------------------------- layout

def to_channels(z: np.ndarray) -> np.ndarray:
    """complex (..., H, W) -> real (..., 2, H, W)."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-3).astype(np.float64)


def from_channels(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r)
    if r.shape[-3] != 2:
        raise DimensionError(f"expected a (re, im) channel axis, got shape {r.shape}")
    return r[..., 0, :, :] + 1j * r[..., 1, :, :]


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(a, b))


# ---------------------------------------------------------------- fft

def fft2_centered(img: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes with DC at the array center."""
    axes = (-2, -1)
    return np.fft.fftshift(sfft.fft2(np.fft.ifftshift(img, axes=axes), norm="ortho"), axes=axes)


def ifft2_centered(ksp: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return np.fft.fftshift(sfft.ifft2(np.fft.ifftshift(ksp, axes=axes), norm="ortho"), axes=axes)


# ---------------------------------------------------------------- masks

@dataclass(frozen=True)
class SamplingMask:
    kept: np.ndarray
    kind: str
    acceleration: float

    @property
    def shape(self):
        return self.kept.shape

    @property
    def fraction(self) -> float:
        return float(self.kept.mean())

    @property
    def count(self) -> int:
        return int(self.kept.sum())


def make_cartesian_mask(h: int, w: int, acceleration: float, center_lines: int,
                        rng_seed: int = 0) -> SamplingMask:
    """Random 1D Cartesian (phase-encode column) mask with a full center band."""
    if acceleration < 1:
        raise ContractError(f"acceleration must be >= 1, got {acceleration}")
    n_keep = int(round(w / acceleration))
    if acceleration > 1 and not center_lines < w / acceleration:
        raise ContractError(
            f"infeasible mask: {center_lines} center lines with only {w / acceleration:.1f} "
            "lines available")
    center_lines = min(center_lines, n_keep)
    cols = np.zeros(w, dtype=bool)
    start = w // 2 - center_lines // 2
    cols[start:start + center_lines] = True
    rng = np.random.default_rng(rng_seed)
    rest = np.flatnonzero(~cols)
    extra = rng.choice(rest, size=n_keep - center_lines, replace=False)
    cols[extra] = True
    kept = np.broadcast_to(cols, (h, w)).copy()
    return SamplingMask(kept, "cartesian-1d", float(acceleration))


def _radial_distance(h: int, w: int) -> np.ndarray:
    yy = (np.arange(h) - h // 2) / (h / 2)
    xx = (np.arange(w) - w // 2) / (w / 2)
    return np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2) / np.sqrt(2.0)


def variable_density_probability(h, w, acceleration, density_power=3.0, center_fraction=0.08):
    """Per-location inclusion probability and the forced-center indicator."""
    center = np.zeros((h, w), dtype=bool)
    ch = max(1, int(round(center_fraction * h)))
    cw = max(1, int(round(center_fraction * w)))
    center[h // 2 - ch // 2:h // 2 - ch // 2 + ch, w // 2 - cw // 2:w // 2 - cw // 2 + cw] = True
    target = h * w / acceleration
    remaining = target - center.sum()
    if remaining < 0:
        raise ContractError("infeasible mask: center region exceeds the sampling budget")
    dens = np.clip(1.0 - _radial_distance(h, w), 0.0, 1.0) ** density_power
    dens[center] = 0.0
    lo, hi = 0.0, 1.0
    while np.minimum(1.0, hi * dens).sum() < remaining:
        hi *= 2.0
        if hi > 1e12:
            raise ContractError("infeasible mask: density cannot reach the sampling budget")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * dens).sum() < remaining:
            lo = mid
        else:
            hi = mid
    prob = np.minimum(1.0, hi * dens)
    prob[center] = 1.0
    return prob, center


def make_variable_density_mask(h: int, w: int, acceleration: float, density_power: float = 3.0,
                               center_fraction: float = 0.08, rng_seed: int = 0) -> SamplingMask:
    """2D random variable-density mask, density (1 - r)^power, full center square."""
    if not 1 <= acceleration <= 16:
        raise ContractError(f"acceleration must lie in [1, 16], got {acceleration}")
    if acceleration == 1:
        return SamplingMask(np.ones((h, w), dtype=bool), "variable-density-2d", 1.0)
    prob, _ = variable_density_probability(h, w, acceleration, density_power, center_fraction)
    target = h * w / acceleration
    rng = np.random.default_rng(rng_seed)
    # redraw (same stream) until the realized count is close to the budget
    for _ in range(1000):
        kept = rng.random((h, w)) < prob
        if abs(kept.sum() - target) <= 0.05 * target:
            break
    return SamplingMask(kept, "variable-density-2d", float(acceleration))


# ---------------------------------------------------------------- coils

def make_coils(h: int, w: int, num_coils: int = 4) -> np.ndarray:
    """Smooth synthetic coil maps, sum-of-squares normalized. Shape (C, H, W)."""
    if num_coils < 1:
        raise ContractError("num_coils must be >= 1")
    yy = (np.arange(h) - h / 2 + 0.5) / (h / 2)
    xx = (np.arange(w) - w / 2 + 0.5) / (w / 2)
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    maps = np.empty((num_coils, h, w), dtype=np.complex128)
    for c in range(num_coils):
        theta = 2 * np.pi * c / num_coils + np.pi / 4
        cy, cx = 1.2 * np.sin(theta), 1.2 * np.cos(theta)
        lobe = np.exp(-((Y - cy) ** 2 + (X - cx) ** 2) / (2 * 0.9 ** 2))
        phase = 0.5 * np.pi * (np.cos(theta) * X + np.sin(theta) * Y) + theta
        maps[c] = lobe * np.exp(1j * phase)
    sos = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    return maps / sos


# ---------------------------------------------------------------- operator

@dataclass(frozen=True)
class KSpaceData:
    values: np.ndarray            # (C, H, W) complex, zero off the mask
    noise_sigma: float = 0.0


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """Multi-coil masked Fourier encoding ``y_c = M F (s_c x)``."""

    mask: np.ndarray
    coils: np.ndarray
    noise_sigma: float = 0.0
    _m: np.ndarray = field(init=False, repr=False)
    _m_unshifted: np.ndarray = field(init=False, repr=False)
    _coils_conj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask.kept if isinstance(self.mask, SamplingMask) else self.mask,
                          dtype=bool)
        coils = np.asarray(self.coils, dtype=np.complex128)
        if coils.ndim == 2:
            coils = coils[None]
        if coils.shape[1:] != mask.shape:
            raise DimensionError(f"coil extents {coils.shape[1:]} != mask extents {mask.shape}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coils", coils)
        object.__setattr__(self, "_m", mask.astype(np.float64))
        object.__setattr__(self, "_m_unshifted", np.fft.ifftshift(self._m))
        object.__setattr__(self, "_coils_conj", np.conj(coils))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def num_coils(self) -> int:
        return self.coils.shape[0]

    @property
    def num_measurements(self) -> int:
        return int(self.mask.sum()) * self.num_coils

    def with_mask(self, mask) -> "ForwardOperator":
        return ForwardOperator(mask, self.coils, self.noise_sigma)

    def with_sigma(self, sigma: float) -> "ForwardOperator":
        return ForwardOperator(self.mask, self.coils, sigma)

    def _check_image(self, x):
        if x.shape[-2:] != self.shape:
            raise DimensionError(f"image extents {x.shape[-2:]} != operator extents {self.shape}")

    # complex-valued numpy interface
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_image(x)
        return self._m * fft2_centered(self.coils * x)

    def adjoint(self, y) -> np.ndarray:
        y = y.values if isinstance(y, KSpaceData) else y
        if y.shape != self.coils.shape:
            raise DimensionError(f"k-space shape {y.shape} != {self.coils.shape}")
        return (np.conj(self.coils) * ifft2_centered(self._m * y)).sum(axis=0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        # the centering shifts are translations and commute with the masked
        # Fourier filter, so A^H A needs only unshifted transforms
        self._check_image(x)
        k = sfft.fft2(self.coils * x, norm="ortho", overwrite_x=True)
        k *= self._m_unshifted
        z = sfft.ifft2(k, norm="ortho", overwrite_x=True)
        z *= self._coils_conj
        return z.sum(axis=0)

    # real (re, im)-channel interface used on the tape
    def forward_r(self, xr: np.ndarray) -> np.ndarray:
        return to_channels(self.forward(from_channels(xr)))

    def adjoint_r(self, yr: np.ndarray) -> np.ndarray:
        return to_channels(self.adjoint(from_channels(yr)))

    def normal_r(self, xr: np.ndarray) -> np.ndarray:
        return to_channels(self.normal(from_channels(xr)))

    def forward_t(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.forward_r, self.adjoint_r, "A")

    def adjoint_t(self, y: ad.Tensor) -> ad.Tensor:
        return ad.linear(y, self.adjoint_r, self.forward_r, "AH")

    def normal_t(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.normal_r, self.normal_r, "AHA")


def apply_forward(A: ForwardOperator, x: np.ndarray) -> KSpaceData:
    return KSpaceData(A.forward(x), 0.0)


def apply_adjoint(A: ForwardOperator, y) -> np.ndarray:
    return A.adjoint(y)


def normal_op(A: ForwardOperator, x: np.ndarray) -> np.ndarray:
    return A.normal(x)


def simulate_acquisition(A: ForwardOperator, x: np.ndarray, rng_seed: int) -> KSpaceData:
    """Noisy measurements; complex noise with E|n|^2 = sigma^2 on kept samples."""
    clean = A.forward(x)
    sigma = A.noise_sigma
    if sigma == 0:
        return KSpaceData(clean, 0.0)
    rng = np.random.default_rng(rng_seed)
    shape = clean.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / np.sqrt(2.0))
    return KSpaceData(clean + A._m * noise, sigma)


def sigma_for_snr(A: ForwardOperator, x: np.ndarray, snr_db: float) -> float:
    """Noise level giving the requested SNR over the acquired samples."""
    energy = float(np.sum(np.abs(A.forward(x)) ** 2))
    return float(np.sqrt(energy / (A.num_measurements * 10 ** (snr_db / 10))))


# ---------------------------------------------------------------- CG solvers

@dataclass
class CGResult:
    x: np.ndarray
    residual: float       # relative residual ||b - Ax|| / ||b||
    iterations: int
    converged: bool


def cg(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float = CG_TOL,
       max_iter: int = CG_MAX_ITER) -> CGResult:
    """Conjugate gradients from x0 = 0 for a Hermitian PSD operator."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    bnorm = np.sqrt(rs)
    if bnorm == 0:
        return CGResult(x, 0.0, 0, True)
    it = 0
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        pAp = np.vdot(p, Ap).real
        if pAp <= 0:
            it -= 1
            break
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = np.vdot(r, r).real
        if np.sqrt(rs_new) <= tol * bnorm:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    res = float(np.sqrt(rs) / bnorm)
    return CGResult(x, res, it, res <= tol)


def _warn_cg(what: str, result: CGResult, tol: float):
    if not result.converged:
        log.warning("%s: CG stopped after %d iterations at relative residual %.3e (tol %.1e)",
                    what, result.iterations, result.residual, tol)


def pinv_normal(A: ForwardOperator, v: np.ndarray, tol: float = CG_TOL,
                max_iter: int = CG_MAX_ITER, assume_range: bool = False,
                return_info: bool = False):
    """Apply the pseudo-inverse of A^H A to ``v``.

    CG started at zero stays in the range of A^H A, which gives the
    minimum-norm solution when the right-hand side is consistent.  Unless
    ``assume_range`` is set, ``v`` is first replaced by its range component
    (itself one consistent pseudo-inverse solve).
    """
    if not assume_range:
        v = project_range(A, v, tol, max_iter)
    result = cg(A.normal, np.asarray(v, dtype=np.complex128), tol, max_iter)
    _warn_cg("pinv_normal", result, tol)
    return (result.x, result) if return_info else result.x


def project_range(A: ForwardOperator, x: np.ndarray, tol: float = CG_TOL,
                  max_iter: int = CG_MAX_ITER) -> np.ndarray:
    """P x = (A^H A)^+ A^H A x."""
    result = cg(A.normal, A.normal(np.asarray(x, dtype=np.complex128)), tol, max_iter)
    _warn_cg("project_range", result, tol)
    return result.x


def least_squares_estimate(A: ForwardOperator, u: np.ndarray, tol: float = CG_TOL,
                           max_iter: int = CG_MAX_ITER) -> np.ndarray:
    """x_LS = (A^H A)^+ u for a regridded image u = A^H y."""
    return pinv_normal(A, u, tol, max_iter, assume_range=True)


def cg_tensor(apply: Callable[[ad.Tensor], ad.Tensor], b: ad.Tensor, iters: int,
              stop_rtol: float = 1e-15) -> ad.Tensor:
    """Fixed-iteration CG recorded on the tape (differentiable w.r.t. ``b``).

    Stops early only once the residual is at round-off level, where another
    step would divide zero by zero.
    """
    x = ad.Tensor(np.zeros_like(b.data))
    r = b
    p = b
    rs = ad.dot(r, r)
    floor = (stop_rtol ** 2) * float(rs.data)
    if float(rs.data) == 0.0:
        return ad.mul(b, 0.0)
    for _ in range(iters):
        Ap = apply(p)
        alpha = ad.div(rs, ad.dot(p, Ap))
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = ad.dot(r, r)
        if float(rs_new.data) <= floor:
            break
        p = r + ad.div(rs_new, rs) * p
        rs = rs_new
    return x


def project_range_t(A: ForwardOperator, x: ad.Tensor, iters: int = 10) -> ad.Tensor:
    """Tape version of the range projection, via ``iters`` unrolled CG steps."""
    return cg_tensor(A.normal_t, A.normal_t(x), iters)


def tikhonov_solve(A: ForwardOperator, v: np.ndarray, reg: float, tol: float = CG_TOL,
                   max_iter: int = CG_MAX_ITER) -> np.ndarray:
    """(A^H A + reg I)^-1 v; a well-conditioned stand-in for the pseudo-inverse."""
    if reg <= 0:
        raise ContractError("reg must be > 0")
    result = cg(lambda z: A.normal(z) + reg * z, np.asarray(v, dtype=np.complex128), tol, max_iter)
    _warn_cg("tikhonov_solve", result, tol)
    return result.x


def soft_project(A: ForwardOperator, x: np.ndarray, reg: float, tol: float = CG_TOL,
                 max_iter: int = CG_MAX_ITER) -> np.ndarray:
    """Q x = (A^H A + reg I)^-1 A^H A x, eigenvalues s / (s + reg) in [0, 1)."""
    return tikhonov_solve(A, A.normal(np.asarray(x, dtype=np.complex128)), reg, tol, max_iter)


def soft_project_t(A: ForwardOperator, x: ad.Tensor, reg: float, iters: int = 10) -> ad.Tensor:
    return cg_tensor(lambda p: A.normal_t(p) + reg * p, A.normal_t(x), iters)
