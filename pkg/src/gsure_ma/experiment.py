"""Desk-scale experiment wiring shared by the CLI and the acceptance suite.

Everything here is a pure function of a :class:`RunConfig`: phantoms, masks,
noise and adaptation randomness are all derived from its seeds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptation import (AdaptationConfig, AdaptationResult, ExperimentMatrix, PretrainResult,
                         Scenario, _seed, adapt, evaluate_matrix, pretrain, psnr, reconstruct)
from .config import RunConfig
from .data_io import DatasetSplit, make_split
from .losses import GsureConfig
from .networks import DirectInversionNet, UnrolledNet
from .operators import ForwardOperator, KSpaceData, simulate_acquisition


def make_network(cfg: RunConfig):
    if cfg.architecture == "modl":
        return UnrolledNet(cfg.blocks, cfg.features, cfg.unrolls, cfg.dc_lambda, cfg.dc_iters,
                           seed=cfg.seed)
    return DirectInversionNet(cfg.blocks, cfg.features, seed=cfg.seed)


def dataset(cfg: RunConfig) -> DatasetSplit:
    return make_split(cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed, cfg.image_size,
                      cfg.image_size, cfg.num_ellipses)


def scenario(cfg: RunConfig, acceleration: float) -> Scenario:
    return Scenario(acceleration, cfg.mask_kind, cfg.num_coils, cfg.snr_db, cfg.center_lines,
                    cfg.density_power, cfg.center_fraction)


def gsure_config(cfg: RunConfig) -> GsureConfig:
    return GsureConfig(mc_probes=cfg.mc_probes, epsilon_scale=cfg.epsilon_scale,
                       divergence_weight_sigma2=cfg.divergence_weight_sigma2, cg_tol=cfg.cg_tol,
                       rng_seed=cfg.seed, proj_iters=cfg.proj_iters,
                       project_probes=cfg.project_probes, pinv_reg=cfg.pinv_reg)


def adaptation_config(cfg: RunConfig, strategy: str) -> AdaptationConfig:
    return AdaptationConfig(strategy, cfg.adapt_epochs, cfg.adapt_lr, cfg.seed, gsure_config(cfg),
                            cfg.ssdu_dc_fraction, cfg.track_oracle_psnr)


def image_seeds(cfg: RunConfig, n: int) -> list[int]:
    return [cfg.seed * 1000 + i for i in range(n)]


def run_pretrain(cfg: RunConfig, net=None) -> tuple[object, PretrainResult]:
    """Supervised training at the nominal acceleration, fresh mask and noise per step."""
    net = make_network(cfg) if net is None else net
    images = dataset(cfg).images("train")
    n = cfg.image_size
    sc = scenario(cfg, cfg.train_acceleration)

    def operator_for(epoch: int, k: int) -> ForwardOperator:
        return sc.operator(n, n, images[k], _seed(cfg.seed, 7, epoch, k))

    result = pretrain(net, images, operator_for, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed)
    return net, result


@dataclass
class SingleRun:
    operator: ForwardOperator
    image: np.ndarray
    measurements: KSpaceData
    regridded: np.ndarray
    before: np.ndarray
    after: np.ndarray
    result: AdaptationResult

    @property
    def input_psnr(self) -> float:
        return psnr(self.regridded, self.image)


def held_out_problem(cfg: RunConfig, acceleration: float, index: int):
    """(operator, image, measurements) for test image ``index``; same draws as the sweep."""
    x = dataset(cfg).images("test")[index]
    s = image_seeds(cfg, index + 1)[index]
    A = scenario(cfg, acceleration).operator(cfg.image_size, cfg.image_size, x, s)
    return A, x, simulate_acquisition(A, x, _seed(s, 1))


def run_single(cfg: RunConfig, net, strategy: str, acceleration: float | None = None,
               index: int | None = None) -> SingleRun:
    """Adapt ``net`` in place on one test image; returns reconstructions and the log."""
    acc = cfg.test_acceleration if acceleration is None else acceleration
    idx = cfg.test_image if index is None else index
    A, x, y = held_out_problem(cfg, acc, idx)
    u = A.adjoint(y)
    before = reconstruct(net, A, u)
    res = adapt(net, A, y, adaptation_config(cfg, strategy), oracle_x=x)
    return SingleRun(A, x, y, u, before, reconstruct(net, A, u), res)


def run_sweep(cfg: RunConfig, net, curves: dict | None = None) -> ExperimentMatrix:
    images = dataset(cfg).images("test")
    scenarios = [scenario(cfg, a) for a in cfg.acceleration_list()]
    base = adaptation_config(cfg, "gsure")
    return evaluate_matrix(net, images, scenarios, cfg.strategy_list(), base,
                           image_seeds(cfg, len(images)), curves)
