"""Training and adaptation objectives.

Every loss takes tensors on the active tape and returns differentiable
scalars, so ``tape.backward(loss.total)`` yields parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError
from .networks import reconstruction_fn
from .operators import (CG_MAX_ITER, ForwardOperator, KSpaceData, least_squares_estimate,
                        project_range, project_range_t, soft_project, soft_project_t,
                        tikhonov_solve, to_channels)

ReconFn = Callable[..., Tensor]


@dataclass
class GsureConfig:
    mc_probes: int = 1
    epsilon_scale: float = 1e-3
    divergence_weight_sigma2: bool = True
    cg_tol: float = 1e-8
    rng_seed: int = 0
    proj_iters: int = 10
    project_probes: bool = True
    pinv_reg: float = 0.0

    def __post_init__(self):
        if self.mc_probes < 1:
            raise ContractError("mc_probes must be >= 1")
        if self.epsilon_scale <= 0:
            raise ContractError("epsilon_scale must be > 0")


@dataclass
class LossBreakdown:
    total: Tensor
    data_term: Tensor
    divergence_term: Tensor

    @classmethod
    def single(cls, data_term: Tensor) -> "LossBreakdown":
        return cls(data_term, data_term, Tensor(np.array(0.0)))

    def values(self) -> tuple[float, float, float]:
        return float(self.total.data), float(self.data_term.data), float(self.divergence_term.data)


@dataclass(frozen=True)
class SsduSplit:
    dc_mask: np.ndarray
    loss_mask: np.ndarray

    def validate(self, acquired: np.ndarray) -> None:
        if self.dc_mask.shape != acquired.shape or self.loss_mask.shape != acquired.shape:
            raise DimensionError("SSDU masks and acquired mask have different extents")
        if np.any(self.dc_mask & self.loss_mask):
            raise ContractError("SSDU split is not a partition: dc and loss masks overlap")
        if np.any((self.dc_mask | self.loss_mask) != acquired):
            raise ContractError("SSDU split is not a partition of the acquired locations")
        if not self.loss_mask.any():
            raise ContractError("SSDU loss mask is empty")
        if not self.dc_mask.any():
            raise ContractError("SSDU data-consistency mask is empty")


def make_ssdu_split(acquired: np.ndarray, dc_fraction: float = 0.6, rng_seed: int = 0) -> SsduSplit:
    """Uniformly random partition of the acquired k-space locations."""
    acquired = np.asarray(acquired, dtype=bool)
    idx = np.flatnonzero(acquired)
    n_dc = int(round(dc_fraction * idx.size))
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(idx, size=n_dc, replace=False)
    dc = np.zeros(acquired.size, dtype=bool)
    dc[chosen] = True
    dc = dc.reshape(acquired.shape)
    return SsduSplit(dc, acquired & ~dc)


def _image_tensor(u) -> Tensor:
    if isinstance(u, Tensor):
        return u
    u = np.asarray(u)
    return Tensor(to_channels(u) if np.iscomplexobj(u) else u)


def _kspace_channels(y) -> np.ndarray:
    vals = y.values if isinstance(y, KSpaceData) else y
    return to_channels(vals) if np.iscomplexobj(vals) else np.asarray(vals, dtype=np.float64)


# ---------------------------------------------------------------- losses

def loss_supervised_mse(xhat, x) -> Tensor:
    """||xhat - x||^2 summed over real and imaginary parts."""
    xhat, x = _image_tensor(xhat), _image_tensor(x)
    if xhat.shape != x.shape:
        raise DimensionError(f"shapes {xhat.shape} and {x.shape} differ")
    return ad.sq_norm(xhat - x)


def loss_dip_ma(A: ForwardOperator, f: ReconFn, u, y, params=None) -> Tensor:
    """||A f(u) - y||^2 over the acquired k-space locations."""
    u = _image_tensor(u)
    yr = _kspace_channels(y)
    if yr.shape[-2:] != A.shape:
        raise DimensionError("k-space and operator extents disagree")
    return ad.sq_norm(A.forward_t(f(u, params)) - yr)


def loss_ssdu_ma(A: ForwardOperator, net, split: SsduSplit, y, params=None) -> Tensor:
    """Reconstruct from the dc-subset of y; score on the held-out subset."""
    split.validate(A.mask)
    A_dc = A.with_mask(split.dc_mask)
    A_loss = A.with_mask(split.loss_mask)
    vals = y.values if isinstance(y, KSpaceData) else y
    u_dc = Tensor(to_channels(A_dc.adjoint(vals)))
    xhat = reconstruction_fn(net, A_dc)(u_dc, params)
    y_loss = to_channels(split.loss_mask * vals)
    return ad.sq_norm(A_loss.forward_t(xhat) - y_loss)


def probe_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def mc_divergence(f: ReconFn, u, cfg: GsureConfig, epoch: int = 0, params=None,
                  fu: Tensor | None = None,
                  projector: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """Monte-Carlo estimate of the divergence of f at u.

    (1/eps) * mean_k <b_k, f(u + eps b_k) - f(u)>, with Gaussian probes in
    the real (re, im) layout.  ``projector`` maps each probe before use; with
    the range projection this estimates trace(P J_f) instead of trace(J_f).
    """
    u = _image_tensor(u)
    umax = float(np.max(np.hypot(u.data[0], u.data[1]))) if u.data.ndim == 3 else float(
        np.max(np.abs(u.data)))
    eps = cfg.epsilon_scale * (umax if umax > 0 else 1.0)
    rng = probe_rng(cfg.rng_seed, epoch)
    if fu is None:
        fu = f(u, params)
    acc = None
    for _ in range(cfg.mc_probes):
        b = rng.standard_normal(u.shape)
        if projector is not None:
            b = projector(b)
        diff = f(u + eps * b, params) - fu
        term = ad.dot(Tensor(b), diff)
        acc = term if acc is None else acc + term
    return acc * (1.0 / (eps * cfg.mc_probes))


def divergence_weight(A: ForwardOperator, cfg: GsureConfig) -> float:
    """Weight w in the 2 w div term.

    With the sigma^2 flag the weight is the per-real-component noise
    variance, sigma^2 / 2 under the E|n|^2 = sigma^2 convention.
    """
    return 0.5 * A.noise_sigma ** 2 if cfg.divergence_weight_sigma2 else 1.0


def range_projector(A: ForwardOperator, cfg: GsureConfig):
    """Probe map: exact range projection, or its Tikhonov-damped version."""
    def project(b: np.ndarray) -> np.ndarray:
        z = b[0] + 1j * b[1]
        if cfg.pinv_reg > 0:
            pz = soft_project(A, z, cfg.pinv_reg, cfg.cg_tol, CG_MAX_ITER)
        else:
            pz = project_range(A, z, cfg.cg_tol, CG_MAX_ITER)
        return np.stack([pz.real, pz.imag])
    return project


def gsure_targets(A: ForwardOperator, u: np.ndarray, cfg: GsureConfig) -> np.ndarray:
    """The least-squares image the data term compares against (complex)."""
    if cfg.pinv_reg > 0:
        return tikhonov_solve(A, u, cfg.pinv_reg, cfg.cg_tol)
    return least_squares_estimate(A, u, cfg.cg_tol)


def loss_gsure(A: ForwardOperator, f: ReconFn, u, cfg: GsureConfig, epoch: int = 0,
               params=None, x_ls: np.ndarray | None = None) -> LossBreakdown:
    """||P f(u) - x_LS||^2 + 2 w div f(u).

    With ``cfg.pinv_reg > 0`` the pseudo-inverse is replaced by
    (A^H A + reg I)^-1 throughout, so P becomes the damped projector
    Q = (A^H A + reg I)^-1 A^H A and the estimate targets ||Q (xhat - x)||^2.
    ``x_ls`` may be passed in when the operator is fixed across calls; it
    does not depend on the network parameters.
    """
    u = _image_tensor(u)
    if x_ls is None:
        x_ls = gsure_targets(A, u.data[0] + 1j * u.data[1], cfg)
    x_ls_r = to_channels(x_ls) if np.iscomplexobj(x_ls) else x_ls
    xhat = f(u, params)
    if cfg.pinv_reg > 0:
        pxhat = soft_project_t(A, xhat, cfg.pinv_reg, cfg.proj_iters)
    else:
        pxhat = project_range_t(A, xhat, cfg.proj_iters)
    data = ad.sq_norm(pxhat - x_ls_r)
    w = divergence_weight(A, cfg)
    if w == 0.0:
        div_term = Tensor(np.array(0.0))
    else:
        proj = range_projector(A, cfg) if cfg.project_probes else None
        div = mc_divergence(f, u, cfg, epoch, params, fu=xhat, projector=proj)
        div_term = div * (2.0 * w)
    return LossBreakdown(data + div_term, data, div_term)
