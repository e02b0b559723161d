"""Fully connected feedforward networks with a flat parameter vector."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "pinnda-checkpoint/1"


@dataclass(frozen=True)
class MLPArchitecture:
    input_dim: int
    output_dim: int = 1
    hidden_layers: int = 4
    width: int = 20
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_layers", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]

    def layer_slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """Per affine layer: (weight slice, weight shape, bias slice) into theta."""
        out, pos = [], 0
        sizes = self.layer_sizes
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            w = slice(pos, pos + d_in * d_out)
            pos += d_in * d_out
            b = slice(pos, pos + d_out)
            pos += d_out
            out.append((w, (d_out, d_in), b))
        return out


def param_count(arch: MLPArchitecture) -> int:
    """Number of trainable parameters, sum over layers of (d_k + 1) d_{k+1}."""
    sizes = arch.layer_sizes
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def weight_mask(arch: MLPArchitecture) -> np.ndarray:
    """Boolean mask selecting the weight entries (biases excluded)."""
    mask = np.zeros(param_count(arch), dtype=bool)
    for w, _, _ in arch.layer_slices():
        mask[w] = True
    return mask


def init(arch: MLPArchitecture, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(param_count(arch))
    for w, (d_out, d_in), _ in arch.layer_slices():
        bound = np.sqrt(6.0 / (d_in + d_out))
        theta[w] = rng.uniform(-bound, bound, size=d_out * d_in)
    return theta


def unflatten(theta: np.ndarray, arch: MLPArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(theta[w].reshape(shape), theta[b]) for w, shape, b in arch.layer_slices()]


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def forward(theta: np.ndarray, arch: MLPArchitecture, x) -> np.ndarray:
    """Plain evaluation of u_theta at points ``x`` of shape (B, d) -> (B, m)."""
    z = np.atleast_2d(np.asarray(x, dtype=float))
    act = ad.ACTIVATIONS[arch.activation]
    layers = unflatten(np.asarray(theta, dtype=float), arch)
    for k, (w, b) in enumerate(layers):
        z = z @ w.T + b
        if k < len(layers) - 1:
            z = act(z, 0)
    return z


def forward_nodes(theta: ad.Node, arch: MLPArchitecture, x) -> ad.Node:
    """Like :func:`forward`, but recorded on the tape (values only)."""
    z = ad.constant(np.atleast_2d(np.asarray(x, dtype=float)))
    layers = _layer_nodes(theta, arch)
    for k, (w, b) in enumerate(layers):
        z = ad.add(ad.matmul(z, ad._transpose(w)), b)
        if k < len(layers) - 1:
            z = ad.activation(z, arch.activation, 0)
    return z


def forward_jet(theta, arch: MLPArchitecture, x, d2_weights=None) -> ad.Jet2:
    """Value, input gradient and Hessian diagonal of every output.

    ``theta`` may be a plain array or a tape node; in the latter case every jet
    slot is differentiable with respect to it.  The result has a trailing
    channel axis of length ``output_dim``; use :meth:`Jet2.channel` to pick one.

    ``d2_weights`` (shape ``(r, input_dim)``) replaces the Hessian diagonal by
    the ``r`` combinations ``sum_i c_ri d^2/dx_i^2``; e.g. a row of ones gives
    the Laplacian directly at lower cost.
    """
    return forward_packed(theta, arch, x, d2_weights).unpack()


def forward_packed(theta, arch: MLPArchitecture, x, d2_weights=None) -> ad.PackedJet:
    if not isinstance(theta, ad.Node):
        theta = ad.constant(theta)
    jet = ad.packed_seed(x, d2_weights)
    layers = _layer_nodes(theta, arch)
    for k, (w, b) in enumerate(layers):
        jet = ad.packed_affine(jet, w, b)
        if k < len(layers) - 1:
            jet = ad.packed_activation(jet, arch.activation)
    return jet


def _layer_nodes(theta: ad.Node, arch: MLPArchitecture):
    return [(ad.reshape(theta[w], shape), theta[b]) for w, shape, b in arch.layer_slices()]


def save_checkpoint(path, arch: MLPArchitecture, theta: np.ndarray, extra: dict | None = None) -> Path:
    """Write ``(arch, theta)`` as an ``.npz`` archive with a JSON header."""
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "architecture": asdict(arch), "extra": extra or {}}
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (param_count(arch),):
        raise ValueError("theta length does not match the architecture")
    with open(path, "wb") as fh:
        np.savez(fh, theta=theta, meta=np.array(json.dumps(meta, sort_keys=True)))
    return path


def load_checkpoint(path) -> tuple[MLPArchitecture, np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        theta = np.array(data["theta"], dtype=float)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {meta.get('format')!r}")
    arch = MLPArchitecture(**meta["architecture"])
    if theta.shape != (param_count(arch),):
        raise ValueError("checkpoint theta length does not match its architecture")
    return arch, theta, meta.get("extra", {})
