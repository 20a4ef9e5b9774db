"""Fast property suite behind ``gsure-ma verify``.

Each check returns a :class:`Check`; ``run_all`` prints one line per
property.  ``fault="adjoint"`` swaps in an operator with a wrong adjoint so
the suite's own failure path can be exercised.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data_io import make_phantom
from .gradcheck import numeric_grad, rel_error
from .losses import GsureConfig, loss_gsure, mc_divergence
from .networks import UnrolledNet, reconstruction_fn
from .operators import (ForwardOperator, fft2_centered, make_cartesian_mask, make_coils,
                        make_variable_density_mask, pinv_normal, project_range,
                        simulate_acquisition, to_channels)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


class CorruptedAdjointOperator(ForwardOperator):
    """Test hook: adjoint off by a small extra term."""

    def adjoint(self, y):
        out = super().adjoint(y)
        return out + 1e-3 * np.roll(out, 1, axis=-1)


def _crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _operator(mask, coils, sigma=0.0, fault=None) -> ForwardOperator:
    cls = CorruptedAdjointOperator if fault == "adjoint" else ForwardOperator
    return cls(mask, coils, sigma)


def _dense(apply, h, w):
    n = h * w
    M = np.empty((n, n), dtype=np.complex128)
    for k in range(n):
        e = np.zeros(n, dtype=np.complex128)
        e[k] = 1.0
        M[:, k] = apply(e.reshape(h, w)).ravel()
    return M


def _linear(W):
    return lambda u, params=None: ad.linear(
        u, lambda v: (W @ v.ravel()).reshape(v.shape), lambda g: (W.T @ g.ravel()).reshape(g.shape))


def check_adjoint(fault=None, pairs=100, n=32) -> Check:
    rng = np.random.default_rng(0)
    worst = 0.0
    for coils in (1, 4):
        for mask in (make_cartesian_mask(n, n, 4, 4, 1), make_variable_density_mask(n, n, 4, rng_seed=1)):
            A = _operator(mask, make_coils(n, n, coils), fault=fault)
            for _ in range(pairs):
                x, y = _crandn(rng, n, n), A._m * _crandn(rng, coils, n, n)
                Ax, AHy = A.forward(x), A.adjoint(y)
                scale = np.linalg.norm(Ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(AHy)
                worst = max(worst, abs(np.vdot(y, Ax) - np.vdot(AHy, x)) / scale)
    return Check("adjoint", worst <= 1e-10, f"max relative mismatch {worst:.2e} (limit 1e-10)")


def check_fft_unitary() -> Check:
    rng = np.random.default_rng(1)
    x = _crandn(rng, 32, 32)
    err = abs(np.linalg.norm(fft2_centered(x)) - np.linalg.norm(x)) / np.linalg.norm(x)
    return Check("fft-unitary", err <= 1e-12, f"relative energy change {err:.2e}")


def check_projection(fault=None) -> Check:
    rng = np.random.default_rng(2)
    worst, tol = 0.0, 1e-8
    idem = herm = 0.0
    for seed in range(3):
        A = _operator(make_cartesian_mask(8, 8, 2, 2, seed), np.ones((1, 8, 8)), fault=fault)
        N = _dense(lambda z: A.adjoint(A.forward(z)), 8, 8)
        vals, vecs = np.linalg.eigh(0.5 * (N + N.conj().T))
        inv = np.where(vals > 1e-9, 1.0 / np.where(vals > 1e-9, vals, 1.0), 0.0)
        Np = (vecs * inv) @ vecs.conj().T
        v = _crandn(rng, 8, 8)
        worst = max(worst, np.abs(pinv_normal(A, v, tol).ravel() - Np @ v.ravel()).max(),
                    np.abs(project_range(A, v, tol).ravel() - Np @ N @ v.ravel()).max())
        pv = project_range(A, v, tol)
        idem = max(idem, np.linalg.norm(project_range(A, pv, tol) - pv) / np.linalg.norm(pv))
        z = _crandn(rng, 8, 8)
        herm = max(herm, abs(np.vdot(z, pv) - np.vdot(project_range(A, z, tol), v))
                   / (np.linalg.norm(z) * np.linalg.norm(v)))
    ok = worst <= 1e-6 and idem <= 2 * tol and herm <= 2 * tol
    return Check("pinv-projection", ok,
                 f"dense mismatch {worst:.1e}, idempotence {idem:.1e}, symmetry {herm:.1e}")


def check_divergence() -> Check:
    rng = np.random.default_rng(3)
    n = 128
    W = rng.standard_normal((n, n)) / np.sqrt(n) + 2 * np.eye(n)
    d = float(mc_divergence(_linear(W), _crandn(rng, 8, 8), GsureConfig(mc_probes=64, rng_seed=4)).data)
    e1 = abs(d - np.trace(W)) / abs(np.trace(W))
    ident = lambda u, params=None: u * 1.0
    d2 = float(mc_divergence(ident, _crandn(rng, 32, 32), GsureConfig(mc_probes=8, rng_seed=5)).data)
    e2 = abs(d2 - 2048) / 2048
    return Check("divergence-trace", e1 <= 0.03 and e2 <= 0.02,
                 f"linear map {e1:.1%} (limit 3%), identity {e2:.1%} (limit 2%)")


def gsure_unbiasedness_draws(draws=500, sigma=2.0, scale=4.0, probes=16, seed=0, fault=None):
    """GSURE totals and true projected errors of a fixed linear map over noise draws.

    Returns (totals, projected_mse, analytic offset E||x_LS||^2 - ||Px||^2).
    """
    h = w = 8
    rng = np.random.default_rng(seed)
    A = _operator(make_cartesian_mask(h, w, 2, 2, 0), np.ones((1, h, w)), sigma, fault)
    x = make_phantom(h, w, 3, rng_seed=1).image
    n = 2 * h * w
    G = rng.standard_normal((n, n))
    W = np.eye(n) + scale * (G - G.T) / np.sqrt(2 * n)
    f = _linear(W)
    Fw = _dense(A.forward, h, w) if A.num_coils == 1 else None
    M = np.diag(A.mask.ravel().astype(float))
    # dense least-squares map: x_LS = (A^H A)^+ A^H y, over the kept rows
    Ad = M @ Fw
    B = np.linalg.pinv(Ad.conj().T @ Ad, rcond=1e-9, hermitian=True) @ Ad.conj().T
    offset = sigma ** 2 * np.sum(np.abs(B[:, A.mask.ravel()]) ** 2)
    Pd = np.linalg.pinv(Ad, rcond=1e-9) @ Ad
    totals, mses = [], []
    for d in range(draws):
        y = simulate_acquisition(A, x, d)
        u = A.adjoint(y)
        lb = loss_gsure(A, f, u, GsureConfig(mc_probes=probes, rng_seed=d))
        xh = f(Tensor(to_channels(u))).data
        xh = xh[0] + 1j * xh[1]
        totals.append(lb.values()[0])
        mses.append(float(np.sum(np.abs(Pd @ (xh - x).ravel()) ** 2)))
    return np.array(totals), np.array(mses), float(offset)


def check_unbiasedness(fault=None) -> Check:
    tot, mse, offset = gsure_unbiasedness_draws(fault=fault)
    corr = float(np.corrcoef(tot, mse)[0, 1])
    rel = abs(np.mean(mse - tot) + offset) / offset
    return Check("gsure-unbiasedness", corr >= 0.95 and rel <= 0.05,
                 f"corr {corr:.3f} (limit 0.95), offset error {rel:.1%} (limit 5%)")


def check_gradients(fault=None) -> Check:
    rng = np.random.default_rng(6)
    # elementwise ops and conv
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    wt = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    s, t = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    build = lambda: ad.sq_norm(ad.channel_affine(ad.relu(ad.conv2d(x, wt, b)) * 1.5 - 0.2, s, t))
    worst = 0.0
    for leaf in (x, wt, b, s, t):
        leaf.requires_grad = True
        leaf.grad = None
    with Tape() as tape:
        tape.backward(build())
    for leaf in (x, wt, b, s, t):
        worst = max(worst, rel_error(leaf.grad, numeric_grad(lambda: float(build().data), leaf.data)))
    # end to end through the GSURE loss
    n = 16
    A = _operator(make_variable_density_mask(n, n, 2, rng_seed=0), make_coils(n, n, 2), 0.05, fault)
    xi = make_phantom(n, n, 4, rng_seed=2).image
    u = A.adjoint(simulate_acquisition(A, xi, 0))
    net = UnrolledNet(2, 8, num_unrolls=2, lam=1.0, seed=3)
    for _, p in net.params.items():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    f = reconstruction_fn(net, A)
    cfg = GsureConfig(pinv_reg=0.01)
    loss = lambda: loss_gsure(A, f, u, cfg, epoch=1).total
    net.params.zero_grad()
    with Tape() as tape:
        tape.backward(loss(), net.params)
    p = net.params["block1.conv1.w"]
    idx = int(np.argmax(np.abs(p.grad)))
    fd = numeric_grad(lambda: float(loss().data), p.data, 1e-6, idx).ravel()[idx]
    e2e = abs(fd - p.grad.ravel()[idx]) / abs(fd)
    return Check("gradients", worst <= 1e-5 and e2e <= 1e-4,
                 f"op finite differences {worst:.1e} (limit 1e-5), GSURE end-to-end {e2e:.1e} (limit 1e-4)")


def all_checks(fault: str | None = None) -> list[tuple[str, Callable[[], Check]]]:
    return [
        ("adjoint", lambda: check_adjoint(fault)),
        ("fft-unitary", check_fft_unitary),
        ("pinv-projection", lambda: check_projection(fault)),
        ("divergence-trace", check_divergence),
        ("gsure-unbiasedness", lambda: check_unbiasedness(fault)),
        ("gradients", lambda: check_gradients(fault)),
    ]


def run_all(fault: str | None = None, out=print) -> list[Check]:
    results = []
    for name, fn in all_checks(fault):
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crash is a failed property, not a crashed suite
            res = Check(name, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out(res.line())
        results.append(res)
    return results
