"""Thin sklearn-style wrappers over pre-training and test-time adaptation.

``Reconstructor.fit`` pre-trains on ground-truth images; ``predict`` maps an
(operator, k-space) pair to an image.  ``Adapter.fit`` fine-tunes a copy of a
fitted reconstructor on a single acquisition without ground truth.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .adaptation import AdaptationConfig, Scenario, _seed, adapt, pretrain, reconstruct
from .losses import GsureConfig
from .networks import DirectInversionNet, UnrolledNet
from .validation import (check_image_stack, check_is_fitted, check_kspace, check_operator,
                         check_positive)


class Reconstructor(BaseEstimator):
    """Supervised reconstruction network trained on simulated acquisitions."""

    def __init__(self, architecture="modl", blocks=4, features=16, unrolls=3, dc_lambda=1.0,
                 epochs=150, lr=1e-3, acceleration=6.0, mask_kind="variable-density-2d",
                 num_coils=4, snr_db=20.0, seed=0):
        self.architecture = architecture
        self.blocks = blocks
        self.features = features
        self.unrolls = unrolls
        self.dc_lambda = dc_lambda
        self.epochs = epochs
        self.lr = lr
        self.acceleration = acceleration
        self.mask_kind = mask_kind
        self.num_coils = num_coils
        self.snr_db = snr_db
        self.seed = seed

    def _network(self):
        if self.architecture == "modl":
            return UnrolledNet(self.blocks, self.features, self.unrolls, self.dc_lambda,
                               seed=self.seed)
        if self.architecture == "resnet":
            return DirectInversionNet(self.blocks, self.features, seed=self.seed)
        raise ValueError(f"unknown architecture {self.architecture!r}")

    def scenario(self) -> Scenario:
        return Scenario(self.acceleration, self.mask_kind, self.num_coils, self.snr_db)

    def fit(self, X, y=None):
        """Pre-train on the (N, H, W) complex images ``X``; ``y`` is ignored."""
        images = check_image_stack(X)
        check_positive(self.lr, "lr")
        h, w = images[0].shape
        sc = self.scenario()
        net = self._network()
        res = pretrain(net, images, lambda e, k: sc.operator(h, w, images[k], _seed(self.seed, 7, e, k)),
                       self.epochs, self.lr, self.seed)
        self.net_ = net
        self.loss_curve_ = np.array(res.losses)
        return self

    def predict(self, A, y):
        """Reconstruct the image measured as ``y`` with operator ``A``."""
        check_is_fitted(self, "net_")
        A = check_operator(A)
        return reconstruct(self.net_, A, A.adjoint(check_kspace(y, A)))


class Adapter(BaseEstimator):
    """Single-acquisition fine-tuning of a fitted :class:`Reconstructor`."""

    def __init__(self, reconstructor=None, strategy="gsure", epochs=400, lr=1e-3, seed=0,
                 mc_probes=1, epsilon_scale=1e-3, pinv_reg=0.1, ssdu_dc_fraction=0.6):
        self.reconstructor = reconstructor
        self.strategy = strategy
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.mc_probes = mc_probes
        self.epsilon_scale = epsilon_scale
        self.pinv_reg = pinv_reg
        self.ssdu_dc_fraction = ssdu_dc_fraction

    def fit(self, A, y, oracle=None):
        """Adapt a copy of the reconstructor to ``(A, y)``.

        ``oracle`` is only used to log PSNR per epoch, never in the update.
        """
        if self.reconstructor is None:
            raise ValueError("Adapter needs a fitted reconstructor")
        check_is_fitted(self.reconstructor, "net_")
        A = check_operator(A)
        values = check_kspace(y, A)
        check_positive(self.lr, "lr")
        net = self.reconstructor._network()
        net.params.load_state(self.reconstructor.net_.params.state())
        gcfg = GsureConfig(mc_probes=self.mc_probes, epsilon_scale=self.epsilon_scale,
                           pinv_reg=self.pinv_reg, proj_iters=20)
        cfg = AdaptationConfig(self.strategy, self.epochs, self.lr, self.seed, gcfg,
                               self.ssdu_dc_fraction, oracle is not None)
        self.result_ = adapt(net, A, values, cfg, oracle_x=oracle)
        self.net_ = net
        self.operator_ = A
        return self

    def predict(self, y):
        """Reconstruction of ``y`` acquired with the operator adapted to."""
        check_is_fitted(self, "net_")
        A = self.operator_
        return reconstruct(self.net_, A, A.adjoint(check_kspace(y, A)))
