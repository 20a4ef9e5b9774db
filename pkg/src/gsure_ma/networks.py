"""Residual CNN (direct inversion) and MoDL-style unrolled network.

Both networks map a regridded image u, carried as a (2, H, W) tensor, to an
image estimate of the same shape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NetworkParams, Tensor
from .data_io import read_tnsr, write_tnsr
from .exceptions import ContainerError, ContractError, DimensionError
from .operators import ForwardOperator, cg_tensor

MANIFEST = "__manifest__"


def he_normal(rng: np.random.Generator, f: int, c: int) -> np.ndarray:
    return rng.standard_normal((f, c, 3, 3)) * np.sqrt(2.0 / (9 * c))


def residual_block(x: Tensor, params: NetworkParams, prefix: str) -> Tensor:
    """x + conv(relu(affine(conv(x))))."""
    h = ad.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    h = ad.channel_affine(h, params[f"{prefix}.affine.scale"], params[f"{prefix}.affine.shift"])
    h = ad.relu(h)
    h = ad.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    return x + h


class DirectInversionNet:
    """Fully convolutional residual CNN on (re, im) channels.

    Layout: 3x3 conv lifting 2 -> ``features`` channels, ``num_blocks``
    residual blocks, 3x3 conv back to 2 channels, plus a global skip from the
    input.  With every conv zeroed the network is the identity map; the
    output conv starts at zero, the others He-normal.
    """

    architecture = "resnet"

    def __init__(self, num_blocks: int = 4, features: int = 16, seed: int = 0,
                 params: NetworkParams | None = None):
        if num_blocks < 0 or features < 1:
            raise ContractError("num_blocks must be >= 0 and features >= 1")
        self.num_blocks = num_blocks
        self.features = features
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed: int) -> NetworkParams:
        rng = np.random.default_rng(seed)
        f = self.features
        p = NetworkParams()
        p.add("in.w", he_normal(rng, f, 2))
        p.add("in.b", np.zeros(f))
        for k in range(self.num_blocks):
            pre = f"block{k}"
            p.add(f"{pre}.conv1.w", he_normal(rng, f, f))
            p.add(f"{pre}.conv1.b", np.zeros(f))
            p.add(f"{pre}.affine.scale", np.ones(f))
            p.add(f"{pre}.affine.shift", np.zeros(f))
            p.add(f"{pre}.conv2.w", he_normal(rng, f, f))
            p.add(f"{pre}.conv2.b", np.zeros(f))
        # zero output conv: the untrained network starts as the identity map
        p.add("out.w", np.zeros((2, f, 3, 3)))
        p.add("out.b", np.zeros(2))
        return p

    def zero_(self) -> "DirectInversionNet":
        """Zero all convolutions, leaving the identity map."""
        for name, t in self.params.items():
            if ".conv" in name or name.startswith(("in.", "out.")):
                t.data = np.zeros_like(t.data)
        return self

    def manifest(self) -> dict:
        return {"architecture": self.architecture, "blocks": self.num_blocks,
                "features": self.features}

    def __call__(self, u: Tensor, params: NetworkParams | None = None) -> Tensor:
        return forward_direct(self, u, params)


def forward_direct(net: DirectInversionNet, u: Tensor, params: NetworkParams | None = None) -> Tensor:
    p = net.params if params is None else params
    u = ad.as_tensor(u)
    if u.data.ndim != 3 or u.shape[0] != 2:
        raise DimensionError(f"expected a (2, H, W) image tensor, got {u.shape}")
    for name, t in p.items():
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"non-finite values in parameter {name!r}")
    x = ad.reshape(u, (1,) + u.shape)
    h = ad.conv2d(x, p["in.w"], p["in.b"])
    for k in range(net.num_blocks):
        h = residual_block(h, p, f"block{k}")
    h = ad.conv2d(h, p["out.w"], p["out.b"])
    return u + ad.reshape(h, u.shape)


def data_consistency(A: ForwardOperator, u, z, lam: float, iters: int = 10) -> Tensor:
    """Solve (A^H A + lam I) x = u + lam z by ``iters`` unrolled CG steps."""
    if lam <= 0:
        raise ContractError(f"data-consistency weight must be > 0, got {lam}")
    u, z = ad.as_tensor(u), ad.as_tensor(z)
    rhs = u + lam * z
    return cg_tensor(lambda p: A.normal_t(p) + lam * p, rhs, iters)


class UnrolledNet:
    """K alternations of a shared denoiser and a CG data-consistency solve."""

    architecture = "modl"

    def __init__(self, num_blocks: int = 4, features: int = 16, num_unrolls: int = 3,
                 lam: float = 0.05, dc_iters: int = 10, seed: int = 0,
                 denoiser: DirectInversionNet | None = None):
        if num_unrolls < 1:
            raise ContractError("num_unrolls must be >= 1")
        if lam <= 0:
            raise ContractError("lam must be > 0")
        self.denoiser = denoiser or DirectInversionNet(num_blocks, features, seed)
        self.num_unrolls = num_unrolls
        self.lam = lam
        self.dc_iters = dc_iters

    @property
    def params(self) -> NetworkParams:
        return self.denoiser.params

    @params.setter
    def params(self, value: NetworkParams):
        self.denoiser.params = value

    @property
    def num_blocks(self):
        return self.denoiser.num_blocks

    @property
    def features(self):
        return self.denoiser.features

    def manifest(self) -> dict:
        m = self.denoiser.manifest()
        m.update(architecture=self.architecture, unrolls=self.num_unrolls, lam=self.lam,
                 dc_iters=self.dc_iters)
        return m

    def __call__(self, u, A: ForwardOperator, params: NetworkParams | None = None) -> Tensor:
        return forward_unrolled(self, A, u, params)


def forward_unrolled(net: UnrolledNet, A: ForwardOperator, u, params=None) -> Tensor:
    u = ad.as_tensor(u)
    x = u
    for _ in range(net.num_unrolls):
        z = forward_direct(net.denoiser, x, params)
        x = data_consistency(A, u, z, net.lam, net.dc_iters)
    return x


@dataclass
class ReconContext:
    operator: ForwardOperator
    regridded: np.ndarray       # complex (H, W), u = A^H y

    def __post_init__(self):
        if self.regridded.shape != self.operator.shape:
            raise DimensionError("regridded image and operator extents disagree")


def reconstruction_fn(net, A: ForwardOperator):
    """Return ``f(u_tensor, params=None) -> Tensor`` for either network type."""
    if isinstance(net, UnrolledNet):
        return lambda u, params=None: forward_unrolled(net, A, u, params)
    return lambda u, params=None: forward_direct(net, u, params)


# ---------------------------------------------------------------- persistence

def save_params(net, path) -> None:
    manifest = json.dumps(net.manifest(), sort_keys=True).encode("utf-8")
    records = [(MANIFEST, np.frombuffer(manifest, dtype=np.uint8))]
    records += [(name, t.data) for name, t in net.params.items()]
    write_tnsr(path, records)


def read_manifest(path) -> dict:
    records = read_tnsr(path)
    if MANIFEST not in records:
        raise ContainerError(f"{path}: no {MANIFEST} record")
    return json.loads(records[MANIFEST].tobytes().decode("utf-8"))


def load_params(net, path) -> None:
    """Load parameters into ``net`` after checking architecture and shapes."""
    records = read_tnsr(path)
    if MANIFEST in records:
        stored = json.loads(records[MANIFEST].tobytes().decode("utf-8"))
        ours = net.manifest()
        for key in ("architecture", "blocks", "features"):
            if stored.get(key) != ours.get(key):
                raise DimensionError(
                    f"architecture mismatch on {key!r}: file has {stored.get(key)!r}, "
                    f"network has {ours.get(key)!r}")
    for name, t in net.params.items():
        if name not in records:
            raise ContainerError(f"parameter {name!r} missing from {path}")
        if records[name].shape != t.shape:
            raise DimensionError(
                f"parameter {name!r}: stored shape {records[name].shape} != {t.shape}")
    net.params.load_state(records)


def build_network(manifest: dict, seed: int = 0):
    if manifest["architecture"] == "modl":
        return UnrolledNet(manifest["blocks"], manifest["features"], manifest["unrolls"],
                           manifest["lam"], manifest.get("dc_iters", 10), seed)
    if manifest["architecture"] == "resnet":
        return DirectInversionNet(manifest["blocks"], manifest["features"], seed)
    raise ContainerError(f"unknown architecture {manifest['architecture']!r}")


def load_network(path):
    net = build_network(read_manifest(path))
    load_params(net, path)
    return net
