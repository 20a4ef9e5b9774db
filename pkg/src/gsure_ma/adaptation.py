"""Supervised pre-training, single-image model adaptation and the evaluation matrix."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NetworkParams, Tape, Tensor, adam_step
from .exceptions import ContractError, DimensionError, NumericError
from .losses import (GsureConfig, LossBreakdown, gsure_targets, loss_dip_ma, loss_gsure,
                     loss_ssdu_ma, loss_supervised_mse, make_ssdu_split)
from .networks import reconstruction_fn
from .operators import (ForwardOperator, KSpaceData, from_channels, make_cartesian_mask,
                        make_coils, make_variable_density_mask, sigma_for_snr,
                        simulate_acquisition, to_channels)

log = logging.getLogger(__name__)

STRATEGIES = ("dip", "ssdu", "gsure")
PSNR_CAP = 99.0


def psnr(xhat: np.ndarray, x: np.ndarray) -> float:
    """20 log10(max|x| / rms error), error over (re, im) components.

    Exact reconstructions (zero error) return the 99 dB sentinel.
    """
    xhat, x = np.asarray(xhat), np.asarray(x)
    if xhat.shape != x.shape:
        raise DimensionError(f"shapes {xhat.shape} and {x.shape} differ")
    peak = float(np.max(np.abs(x)))
    if peak == 0:
        raise ContractError("PSNR reference image is identically zero")
    err = np.sum(np.abs(xhat - x) ** 2)
    if err == 0:
        return PSNR_CAP
    rms = math.sqrt(err / (x.shape[-2] * x.shape[-1]))
    return 20.0 * math.log10(peak / rms)


def reconstruct(net, A: ForwardOperator, u: np.ndarray, params: NetworkParams | None = None) -> np.ndarray:
    """Evaluate the network without recording a tape. Complex in, complex out."""
    out = reconstruction_fn(net, A)(Tensor(to_channels(u)), params)
    return from_channels(out.data)


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    params: NetworkParams
    losses: list[float]


def pretrain(net, images: Sequence[np.ndarray],
             operator_for: Callable[[int, int], ForwardOperator], epochs: int,
             lr: float = 1e-4, seed: int = 0, snr_db: float | None = None,
             log_every: int = 0) -> PretrainResult:
    """Supervised training on ||f(A^H y) - x||^2, one image per Adam step.

    ``operator_for(epoch, index)`` supplies the training operator, so a family
    of masks can be cycled.  Noise is redrawn every epoch from (seed, epoch,
    index); with ``snr_db`` the noise level is set per image from that SNR,
    otherwise the operator's own ``noise_sigma`` is used.
    """
    if not images:
        raise ContractError("pretraining dataset is empty")
    state = AdamState()
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for k, x in enumerate(images):
            A = operator_for(epoch, k)
            if snr_db is not None:
                A = A.with_sigma(sigma_for_snr(A, x, snr_db))
            y = simulate_acquisition(A, x, _seed(seed, epoch, k))
            u = Tensor(to_channels(A.adjoint(y)))
            f = reconstruction_fn(net, A)
            net.params.zero_grad()
            with Tape() as tape:
                loss = loss_supervised_mse(f(u), x)
                tape.backward(loss, net.params)
            val = float(loss.data)
            if not math.isfinite(val):
                raise NumericError(f"non-finite training loss at epoch {epoch}, image {k}")
            adam_step(net.params, state, lr)
            total += val
        losses.append(total / len(images))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("pretrain epoch %d loss %.6g", epoch + 1, losses[-1])
    return PretrainResult(net.params, losses)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptationConfig:
    strategy: str = "gsure"
    epochs: int = 400
    lr: float = 1e-5
    seed: int = 0
    gsure: GsureConfig = field(default_factory=GsureConfig)
    ssdu_dc_fraction: float = 0.6
    track_oracle_psnr: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


@dataclass
class AdaptationRecord:
    epoch: int
    total_loss: float
    data_term: float
    divergence_term: float
    oracle_psnr_db: float = float("nan")


@dataclass
class AdaptationResult:
    params: NetworkParams
    records: list[AdaptationRecord]
    psnr_before: float = float("nan")
    psnr_after: float = float("nan")
    aborted: bool = False

    @property
    def psnr_curve(self) -> np.ndarray:
        return np.array([r.oracle_psnr_db for r in self.records] + [self.psnr_after])


CSV_FIELDS = ("epoch", "total_loss", "data_term", "divergence_term", "oracle_psnr_db")


def records_to_csv(records: Sequence[AdaptationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.epoch, repr(r.total_loss), repr(r.data_term), repr(r.divergence_term),
                    repr(r.oracle_psnr_db)])
    return buf.getvalue()


def adapt(net, A: ForwardOperator, y: KSpaceData, cfg: AdaptationConfig,
          oracle_x: np.ndarray | None = None) -> AdaptationResult:
    """Fine-tune ``net`` in place on a single measurement ``y`` taken with ``A``.

    Record ``e`` holds the loss evaluated at the parameters entering epoch
    ``e`` and, when ``oracle_x`` is given, the PSNR of the reconstruction at
    those same parameters.  The ground truth is only ever read after the
    update has been computed from the loss.
    """
    values = y.values if isinstance(y, KSpaceData) else np.asarray(y)
    if values.shape != A.coils.shape:
        raise DimensionError("k-space and operator extents disagree")
    u_c = A.adjoint(values)
    u = Tensor(to_channels(u_c))
    f = reconstruction_fn(net, A)
    track = cfg.track_oracle_psnr and oracle_x is not None

    split = x_ls = None
    gcfg = cfg.gsure
    if cfg.strategy == "ssdu":
        split = make_ssdu_split(A.mask, cfg.ssdu_dc_fraction, cfg.seed)
    elif cfg.strategy == "gsure":
        gcfg = replace(cfg.gsure, rng_seed=cfg.seed)
        x_ls = gsure_targets(A, u_c, gcfg)

    state = AdamState()
    records: list[AdaptationRecord] = []
    last_good = net.params.state()
    aborted = False
    psnr_before = psnr(reconstruct(net, A, u_c), oracle_x) if oracle_x is not None else float("nan")
    for epoch in range(1, cfg.epochs + 1):
        net.params.zero_grad()
        with Tape() as tape:
            if cfg.strategy == "dip":
                xhat = f(u)
                loss = LossBreakdown.single(loss_dip_ma(A, lambda _u, _p=None: xhat, u, values))
            elif cfg.strategy == "ssdu":
                xhat = None
                loss = LossBreakdown.single(loss_ssdu_ma(A, net, split, values))
            else:
                xhat_box = []

                def f_logged(v, params=None):
                    out = f(v, params)
                    xhat_box.append(out)
                    return out
                loss = loss_gsure(A, f_logged, u, gcfg, epoch, x_ls=x_ls)
                xhat = xhat_box[0]
            total, data, div = loss.values()
            if not math.isfinite(total):
                log.error("non-finite %s loss at epoch %d; keeping last good parameters",
                          cfg.strategy, epoch)
                net.params.load_state(last_good)
                aborted = True
                break
            tape.backward(loss.total, net.params)
        last_good = net.params.state()
        rec = AdaptationRecord(epoch, total, data, div)
        if track:
            est = from_channels(xhat.data) if xhat is not None else reconstruct(net, A, u_c)
            rec.oracle_psnr_db = psnr(est, oracle_x)
        records.append(rec)
        adam_step(net.params, state, cfg.lr)
    psnr_after = psnr(reconstruct(net, A, u_c), oracle_x) if oracle_x is not None else float("nan")
    return AdaptationResult(net.params, records, psnr_before, psnr_after, aborted)


# ---------------------------------------------------------------- experiment matrix

@dataclass
class Scenario:
    """Test-time acquisition setting for a set of images."""

    acceleration: float
    mask_kind: str = "variable-density-2d"
    num_coils: int = 4
    snr_db: float = 20.0
    center_lines: int = 4
    density_power: float = 3.0
    center_fraction: float = 0.08
    label: str = ""

    def operator(self, h: int, w: int, image: np.ndarray, seed: int) -> ForwardOperator:
        if self.mask_kind == "cartesian-1d":
            mask = make_cartesian_mask(h, w, self.acceleration, self.center_lines, seed)
        else:
            mask = make_variable_density_mask(h, w, self.acceleration, self.density_power,
                                              self.center_fraction, seed)
        A = ForwardOperator(mask, make_coils(h, w, self.num_coils))
        return A.with_sigma(sigma_for_snr(A, image, self.snr_db))


@dataclass
class MatrixRow:
    acceleration: float
    strategy: str          # "input", "none" (before adaptation) or an adaptation strategy
    psnr_before_db: float
    psnr_after_db: float
    n_images: int
    seed: int


@dataclass
class ExperimentMatrix:
    rows: list[MatrixRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["acceleration", "strategy", "psnr_before_db", "psnr_after_db", "n_images", "seed"])
        for r in self.rows:
            w.writerow([f"{r.acceleration:g}", r.strategy, f"{r.psnr_before_db:.4f}",
                        f"{r.psnr_after_db:.4f}", r.n_images, r.seed])
        return buf.getvalue()

    def lookup(self, acceleration: float, strategy: str) -> MatrixRow:
        for r in self.rows:
            if r.acceleration == acceleration and r.strategy == strategy:
                return r
        raise KeyError((acceleration, strategy))

    def to_table(self) -> str:
        accs = sorted({r.acceleration for r in self.rows})
        labels = []
        for r in self.rows:
            if r.strategy not in labels:
                labels.append(r.strategy)
        names = {"input": "Input A^H y", "none": "Before-MA", "dip": "DIP-MA",
                 "ssdu": "SSDU-MA", "gsure": "GSURE-MA"}
        head = f"{'Acc.':<12}" + "".join(f"{a:>10g}x" for a in accs)
        lines = [head, "-" * len(head)]
        for s in labels:
            cells = []
            for a in accs:
                try:
                    cells.append(f"{self.lookup(a, s).psnr_after_db:>11.2f}")
                except KeyError:
                    cells.append(f"{'-':>11}")
            lines.append(f"{names.get(s, s):<12}" + "".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_matrix(net, images: Sequence[np.ndarray], scenarios: Sequence[Scenario],
                    strategies: Sequence[str], cfg: AdaptationConfig,
                    seeds: Sequence[int] | None = None,
                    curves: dict | None = None) -> ExperimentMatrix:
    """Before/after PSNR averaged over ``images`` for every scenario and strategy.

    Every adaptation restarts from the pre-trained parameters.  ``seeds[i]``
    drives the mask, noise and adaptation randomness of image ``i``.
    """
    if not scenarios:
        raise ContractError("no scenarios to evaluate")
    seeds = list(seeds) if seeds is not None else list(range(len(images)))
    base = net.params.state()
    matrix = ExperimentMatrix()
    for sc in scenarios:
        inputs, before = [], []
        after = {s: [] for s in strategies}
        for x, seed in zip(images, seeds):
            h, w = x.shape
            A = sc.operator(h, w, x, seed)
            y = simulate_acquisition(A, x, _seed(seed, 1))
            u = A.adjoint(y)
            net.params.load_state(base)
            inputs.append(psnr(u, x))
            before.append(psnr(reconstruct(net, A, u), x))
            for s in strategies:
                net.params.load_state(base)
                res = adapt(net, A, y, replace(cfg, strategy=s, seed=seed), oracle_x=x)
                after[s].append(res.psnr_after)
                if curves is not None:
                    curves[(sc.acceleration, s, seed)] = res.psnr_curve
        net.params.load_state(base)
        seed0 = seeds[0] if seeds else 0
        n = len(images)
        b = float(np.mean(before))
        matrix.rows.append(MatrixRow(sc.acceleration, "input", float(np.mean(inputs)),
                                     float(np.mean(inputs)), n, seed0))
        matrix.rows.append(MatrixRow(sc.acceleration, "none", b, b, n, seed0))
        for s in strategies:
            matrix.rows.append(MatrixRow(sc.acceleration, s, b, float(np.mean(after[s])), n, seed0))
    return matrix
