"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-5 use dense-matrix oracles built here, independent of the
package's own verify module.  Criteria 6-8 run the desk-scale experiment
described by ``configs/desk.cfg``.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from gsure_ma import autodiff as ad
from gsure_ma import experiment as ex
from gsure_ma.adaptation import records_to_csv
from gsure_ma.autodiff import Tape, Tensor
from gsure_ma.config import load_config
from gsure_ma.data_io import dumps_tnsr, make_phantom
from gsure_ma.gradcheck import numeric_grad, rel_error
from gsure_ma.losses import GsureConfig, loss_gsure, mc_divergence
from gsure_ma.networks import UnrolledNet, reconstruction_fn
from gsure_ma.operators import (ForwardOperator, cg_tensor, from_channels, make_cartesian_mask,
                                make_coils, make_variable_density_mask, pinv_normal, project_range,
                                project_range_t, simulate_acquisition, soft_project_t, to_channels)

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    LINES.append(line)
    print(line)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def dense(apply, h, w):
    cols = []
    for k in range(h * w):
        e = np.zeros(h * w, dtype=complex)
        e[k] = 1.0
        cols.append(np.asarray(apply(e.reshape(h, w))).ravel())
    return np.stack(cols, axis=1)


def linear_map(W):
    return lambda u, params=None: ad.linear(
        u, lambda v: (W @ v.ravel()).reshape(v.shape), lambda g: (W.T @ g.ravel()).reshape(g.shape))


# ---------------------------------------------------------------- 1

def test_criterion_1_adjoint():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    n, worst = 32, 0.0
    for coils in (1, 4):
        for kind in ("cartesian-1d", "variable-density-2d"):
            mask = (make_cartesian_mask(n, n, 4, 4, 3) if kind == "cartesian-1d"
                    else make_variable_density_mask(n, n, 4, rng_seed=3))
            A = ForwardOperator(mask, make_coils(n, n, coils))
            keep = np.broadcast_to(A.mask, (coils, n, n))
            for _ in range(100):
                x = crandn(rng, n, n)
                y = crandn(rng, coils, n, n) * keep
                lhs, rhs = np.vdot(y, A.forward(x)), np.vdot(A.adjoint(y), x)
                worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 10
    report(1, ok, f"max relative adjoint mismatch {worst:.2e} (<= 1e-10), {dt:.1f}s (< 10s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_pinv_projection():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    tol = 1e-8
    err = idem = herm = 0.0
    for seed in range(5):
        A = ForwardOperator(make_cartesian_mask(8, 8, 2 + seed % 2, 2, seed), np.ones((1, 8, 8)))
        F = dense(A.forward, 8, 8)
        vals, vecs = np.linalg.eigh(F.conj().T @ F)
        keep = vals > 1e-10 * vals.max()
        Npinv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].conj().T
        P = vecs[:, keep] @ vecs[:, keep].conj().T
        for _ in range(4):
            v = crandn(rng, 8, 8)
            err = max(err, np.abs(pinv_normal(A, v, tol).ravel() - Npinv @ v.ravel()).max(),
                       np.abs(project_range(A, v, tol).ravel() - P @ v.ravel()).max())
            pv = project_range(A, v, tol)
            idem = max(idem, np.linalg.norm(project_range(A, pv, tol) - pv) / np.linalg.norm(pv))
            z = crandn(rng, 8, 8)
            herm = max(herm, abs(np.vdot(z, pv) - np.vdot(project_range(A, z, tol), v))
                       / (np.linalg.norm(z) * np.linalg.norm(v)))
    dt = time.perf_counter() - t0
    ok = err <= 1e-6 and idem <= 2 * tol and herm <= 2 * tol and dt < 30
    report(2, ok, f"dense-oracle error {err:.1e} (<= 1e-6), idempotence {idem:.1e}, "
                  f"symmetry {herm:.1e} (<= 2e-8), {dt:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_divergence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    n = 2 * 8 * 8
    W = 1.5 * np.eye(n) + rng.standard_normal((n, n)) / np.sqrt(n)
    u = crandn(rng, 8, 8)
    d = float(mc_divergence(linear_map(W), u, GsureConfig(mc_probes=64, rng_seed=7)).data)
    e_lin = abs(d - np.trace(W)) / abs(np.trace(W))
    ident = lambda v, params=None: v * 1.0
    d_id = float(mc_divergence(ident, crandn(rng, 32, 32), GsureConfig(mc_probes=8, rng_seed=8)).data)
    e_id = abs(d_id - 2 * 32 * 32) / (2 * 32 * 32)
    dt = time.perf_counter() - t0
    ok = e_lin <= 0.03 and e_id <= 0.02 and dt < 30
    report(3, ok, f"dense W: {e_lin:.2%} from trace (<= 3%), identity: {e_id:.2%} from 2HW (<= 2%), "
                  f"{dt:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_gsure_unbiasedness():
    t0 = time.perf_counter()
    h = w = 8
    sigma = 2.0
    A = ForwardOperator(make_cartesian_mask(h, w, 2, 2, 0), np.ones((1, h, w)), sigma)
    x = make_phantom(h, w, 3, rng_seed=1).image
    n = 2 * h * w
    G = np.random.default_rng(0).standard_normal((n, n))
    W = np.eye(n) + 4.0 * (G - G.T) / np.sqrt(2 * n)
    f = linear_map(W)
    # dense oracle: x_LS = B y on the kept rows, P the orthogonal range projector
    F = dense(A.forward, h, w)[A.mask.ravel()]
    B = np.linalg.pinv(F)
    P = B @ F
    offset = sigma ** 2 * np.sum(np.abs(B) ** 2)   # E||x_LS||^2 - ||Px||^2
    totals, mses = [], []
    for d in range(500):
        y = simulate_acquisition(A, x, d)
        u = A.adjoint(y)
        totals.append(loss_gsure(A, f, u, GsureConfig(mc_probes=16, rng_seed=d)).values()[0])
        xh = from_channels(f(Tensor(to_channels(u))).data)
        mses.append(float(np.sum(np.abs(P @ (xh - x).ravel()) ** 2)))
    totals, mses = np.array(totals), np.array(mses)
    corr = float(np.corrcoef(totals, mses)[0, 1])
    rel = abs(np.mean(totals - mses) - offset) / offset
    dt = time.perf_counter() - t0
    ok = corr >= 0.95 and rel <= 0.05 and dt < 120
    report(4, ok, f"corr(GSURE, projected MSE) {corr:.3f} (>= 0.95), mean offset {np.mean(totals - mses):.1f} "
                  f"vs analytic {offset:.1f}: {rel:.2%} (<= 5%), {dt:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 5

def _op_cases(rng):
    """(name, builder(leaves) -> scalar Tensor, leaf arrays) for every tape op."""
    A = ForwardOperator(make_variable_density_mask(8, 8, 2, rng_seed=1), make_coils(8, 8, 2))
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    sq = ad.sq_norm
    c3, c6 = r(3), Tensor(r(6))
    return [
        ("add", lambda a, b: sq(a + b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: sq(a - b), [r(3, 4), r(3, 1)]),
        ("neg", lambda a: sq(-a * c3), [r(3)]),
        ("mul", lambda a, b: sq(a * b), [r(2, 3), r(2, 3)]),
        ("div", lambda a, b: sq(a / b), [r(2, 3), pos(2, 3)]),
        ("relu", lambda a: sq(ad.relu(a)), [r(5, 5) + 0.05]),
        ("reshape", lambda a: sq(ad.dot(ad.reshape(a, (6,)), c6)), [r(2, 3)]),
        ("tsum", lambda a: sq(ad.tsum(a)), [r(4, 3)]),
        ("dot", lambda a, b: sq(ad.dot(a, b)), [r(7), r(7)]),
        ("sq_norm", lambda a: sq(a), [r(2, 5)]),
        ("linear", lambda a: sq(ad.linear(a, lambda v: 2 * v[::-1], lambda g: 2 * g[::-1])), [r(6)]),
        ("conv2d", lambda a, wt, b: sq(ad.conv2d(a, wt, b)), [r(1, 2, 5, 6), r(3, 2, 3, 3), r(3)]),
        ("channel_affine", lambda a, s, t: sq(ad.channel_affine(a, s, t)), [r(1, 3, 4, 4), r(3), r(3)]),
        ("forward_t", lambda a: sq(A.forward_t(a)), [r(2, 8, 8)]),
        ("adjoint_t", lambda a: sq(A.adjoint_t(a)), [r(2, 2, 8, 8)]),
        ("normal_t", lambda a: sq(A.normal_t(a)), [r(2, 8, 8)]),
        ("cg_tensor", lambda a: sq(cg_tensor(lambda p: A.normal_t(p) + 0.1 * p, a, 10)), [r(2, 8, 8)]),
        ("project_range_t", lambda a: sq(project_range_t(A, a, 10)), [r(2, 8, 8)]),
        ("soft_project_t", lambda a: sq(soft_project_t(A, a, 0.01, 10)), [r(2, 8, 8)]),
    ]


def test_criterion_5_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    op_errors = {}
    for name, build, arrays in _op_cases(rng):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            tape.backward(build(*leaves))
        fn = lambda: float(build(*leaves).data)
        op_errors[name] = max(rel_error(l.grad, numeric_grad(fn, l.data)) for l in leaves)
    worst_op = max(op_errors, key=op_errors.get)

    n = 16
    A = ForwardOperator(make_variable_density_mask(n, n, 2, rng_seed=0), make_coils(n, n, 4), 0.05)
    x = make_phantom(n, n, 4, rng_seed=5).image
    u = A.adjoint(simulate_acquisition(A, x, 1))
    net = UnrolledNet(num_blocks=2, features=8, num_unrolls=2, lam=1.0, seed=4)
    for _, p in net.params.items():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    f = reconstruction_fn(net, A)
    cfg = GsureConfig(pinv_reg=0.01, rng_seed=3)
    loss = lambda: loss_gsure(A, f, u, cfg, epoch=2).total
    net.params.zero_grad()
    with Tape() as tape:
        tape.backward(loss(), net.params)
    e2e = 0.0
    for name in ("block0.conv1.w", "block1.affine.scale", "out.w", "in.b"):
        p = net.params[name]
        k = int(rng.integers(p.data.size))
        fd = numeric_grad(lambda: float(loss().data), p.data, 1e-6, k).ravel()[k]
        e2e = max(e2e, abs(fd - p.grad.ravel()[k]) / max(abs(fd), 1e-12))
    dt = time.perf_counter() - t0
    ok = op_errors[worst_op] <= 1e-5 and e2e <= 1e-4 and dt < 120
    report(5, ok, f"{len(op_errors)} ops, worst {worst_op} {op_errors[worst_op]:.1e} (<= 1e-5); "
                  f"GSURE end-to-end {e2e:.1e} (<= 1e-4), {dt:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 6-8: desk scenario

DESK_RUNS: dict = {}


def params_bytes(net) -> bytes:
    return dumps_tnsr([(k, p.data) for k, p in net.params.items()])


@pytest.fixture(scope="module")
def desk():
    cfg = load_config(DESK)
    t0 = time.perf_counter()
    net, res = ex.run_pretrain(cfg)
    return cfg, net.params.state(), res.losses, params_bytes(net), time.perf_counter() - t0


def fresh_net(cfg, state):
    net = ex.make_network(cfg)
    net.params.load_state(state)
    return net


def test_criterion_6_trajectories(desk):
    cfg, state, _, _, _ = desk
    t0 = time.perf_counter()
    runs = {s: ex.run_single(cfg, fresh_net(cfg, state), s) for s in ("dip", "gsure")}
    dt = time.perf_counter() - t0
    DESK_RUNS.update({s: records_to_csv(r.result.records) for s, r in runs.items()})
    dip, gs = (runs[s].result.psnr_curve for s in ("dip", "gsure"))
    dip_drop = dip.max() - dip[-1]
    gs_gap = gs.max() - gs[-1]
    ok = dip_drop >= 0.3 and gs_gap <= 0.5 and dt < 20 * 60
    report(6, ok, f"{cfg.test_acceleration:g}x, {cfg.adapt_epochs} epochs: DIP peak {dip.max():.2f} "
                  f"@{int(dip.argmax())} final {dip[-1]:.2f} (drop {dip_drop:.2f} >= 0.3); GSURE peak "
                  f"{gs.max():.2f} final {gs[-1]:.2f} (gap {gs_gap:.2f} <= 0.5); {dt:.0f}s (< 1200s)")
    assert ok


def test_criterion_7_sweep(desk):
    cfg, state, _, _, _ = desk
    t0 = time.perf_counter()
    m = ex.run_sweep(cfg, fresh_net(cfg, state))
    dt = time.perf_counter() - t0
    print()
    print(m.to_table(), end="")
    after = lambda a, s: m.lookup(a, s).psnr_after_db
    low = (after(2.0, "none") + 0.5 < after(2.0, "dip"), after(2.0, "dip") + 0.5 < after(2.0, "gsure"))
    high = {a: after(a, "gsure") >= after(a, "ssdu") for a in (6.0, 8.0)}
    ok = all(low) and all(high.values()) and dt < 45 * 60
    report(7, ok, f"2x none {after(2.0, 'none'):.2f} < dip {after(2.0, 'dip'):.2f} < gsure "
                  f"{after(2.0, 'gsure'):.2f} (margins 0.5 dB: {low[0]}, {low[1]}); gsure >= ssdu at "
                  + ", ".join(f"{a:g}x {after(a, 'gsure'):.2f} vs {after(a, 'ssdu'):.2f}" for a in high)
                  + f"; {dt:.0f}s (< 2700s)")
    assert ok


def test_criterion_8_reproducible(desk):
    cfg, state, losses, pbytes, _ = desk
    net, res = ex.run_pretrain(cfg)
    same_pre = params_bytes(net) == pbytes and res.losses == losses
    if "gsure" not in DESK_RUNS:
        DESK_RUNS["gsure"] = records_to_csv(ex.run_single(cfg, fresh_net(cfg, state), "gsure").result.records)
    again = records_to_csv(ex.run_single(cfg, fresh_net(cfg, state), "gsure").result.records)
    same_csv = again == DESK_RUNS["gsure"]
    ok = same_pre and same_csv
    report(8, ok, f"pre-training params and losses identical: {same_pre}; "
                  f"GSURE adaptation CSV identical ({len(again)} bytes): {same_csv}")
    assert ok
