"""Finite-width generative baseline trained on observed pixels only.

A small all-convolutional generator maps the prior image to a full map and
is fitted with Adam against the masked squared error over observed pixels.
Convolutions are 3x3, zero-padded "same", LeakyReLU(0.1) after every layer
except the last. Gradients are computed in closed form (reverse mode over
the im2col formulation); no autograd framework is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadWidths, EmptyMask, NonFiniteLoss
from .grid import ExposureMap, ObservationGrid, UNITS_NORMALIZED
from .priors import PriorImage

DEFAULT_WIDTHS = (1, 16, 32, 32, 16, 1)
DEFAULT_LR = 0.01
DEFAULT_EPOCHS = 150
FILTER_SIZE = 3
LEAKY_SLOPE = 0.1


@dataclass
class GlipNet:
    """Weights of the generator: one (c_out, c_in, 3, 3) tensor per layer."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class AdamState:
    """Moment accumulators for the Adam update."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = DEFAULT_LR) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
        )


@dataclass
class TrainTrace:
    """Masked loss after each epoch's update."""

    losses: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    def to_list(self) -> list[float]:
        return list(self.losses)


def init_net(seed: int, widths=DEFAULT_WIDTHS) -> GlipNet:
    """He-initialized generator, deterministic per seed.

    Weight std per layer is sqrt(2 / (fan_in * 9)); biases start at zero.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or widths[0] != 1 or widths[-1] != 1:
        raise BadWidths(f"channel widths must start and end at 1, got {widths}")
    if any(w < 1 for w in widths):
        raise BadWidths(f"channel widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        std = math.sqrt(2.0 / (c_in * FILTER_SIZE * FILTER_SIZE))
        weights.append(rng.normal(0.0, std, size=(c_out, c_in, FILTER_SIZE, FILTER_SIZE)))
        biases.append(np.zeros(c_out))
    return GlipNet(widths=widths, weights=weights, biases=biases, seed=seed)


def _im2col(x: np.ndarray, q: int = FILTER_SIZE) -> np.ndarray:
    """(C, M, N) -> (C*q*q, M*N) patch matrix with zero padding."""
    c, m, n = x.shape
    r = (q - 1) // 2
    padded = np.zeros((c, m + 2 * r, n + 2 * r), dtype=x.dtype)
    padded[:, r : r + m, r : r + n] = x
    cols = np.empty((c, q * q, m * n), dtype=x.dtype)
    k = 0
    for da in range(q):
        for db in range(q):
            cols[:, k, :] = padded[:, da : da + m, db : db + n].reshape(c, m * n)
            k += 1
    return cols.reshape(c * q * q, m * n)


def _col2im(dcols: np.ndarray, c: int, m: int, n: int, q: int = FILTER_SIZE) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    r = (q - 1) // 2
    dpad = np.zeros((c, m + 2 * r, n + 2 * r), dtype=dcols.dtype)
    dcols = dcols.reshape(c, q * q, m, n)
    k = 0
    for da in range(q):
        for db in range(q):
            dpad[:, da : da + m, db : db + n] += dcols[:, k]
            k += 1
    return dpad[:, r : r + m, r : r + n]


def _leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def _prior_values(a) -> np.ndarray:
    values = a.values if isinstance(a, PriorImage) else np.asarray(a, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("prior must be a 2-d image")
    return values


def _forward_cached(net: GlipNet, a_values: np.ndarray):
    m, n = a_values.shape
    x = a_values.reshape(1, m, n)
    cols_cache, z_cache = [], []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        cols = _im2col(x)
        z = w.reshape(w.shape[0], -1) @ cols + b[:, None]
        cols_cache.append(cols)
        z_cache.append(z)
        x = (_leaky(z) if l < last else z).reshape(w.shape[0], m, n)
    return x[0], cols_cache, z_cache


def forward(net: GlipNet, a) -> np.ndarray:
    """Run the generator on a prior image; returns an M x N map."""
    pred, _, _ = _forward_cached(net, _prior_values(a))
    return pred


def masked_loss(pred: np.ndarray, obs: ObservationGrid) -> float:
    """Mean squared error over observed pixels only."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"prediction shape {pred.shape} != grid shape {obs.shape}")
    n_obs = obs.n_observed
    if n_obs == 0:
        raise EmptyMask("masked loss needs at least one observed pixel")
    diff = (pred - obs.values) * obs.mask
    return float((diff * diff).sum() / n_obs)


def _loss_and_grads(net: GlipNet, a_values: np.ndarray, obs: ObservationGrid):
    m, n = a_values.shape
    pred, cols_cache, z_cache = _forward_cached(net, a_values)
    n_obs = obs.n_observed
    if n_obs == 0:
        raise EmptyMask("masked loss needs at least one observed pixel")
    diff = (pred - obs.values) * obs.mask
    loss = float((diff * diff).sum() / n_obs)

    grads: list[np.ndarray] = [None] * (2 * net.n_layers)
    dz = ((2.0 / n_obs) * diff).reshape(1, m * n)
    for l in range(net.n_layers - 1, -1, -1):
        w = net.weights[l]
        grads[2 * l] = (dz @ cols_cache[l].T).reshape(w.shape)
        grads[2 * l + 1] = dz.sum(axis=1)
        if l > 0:
            dcols = w.reshape(w.shape[0], -1).T @ dz
            dx = _col2im(dcols, net.widths[l], m, n)
            dz = (dx.reshape(net.widths[l], m * n)) * _leaky_grad(z_cache[l - 1])
    return loss, grads


def backward(net: GlipNet, a, obs: ObservationGrid) -> list[np.ndarray]:
    """Exact gradients of masked_loss(forward(net, a), obs).

    Returned in the order of net.parameters(): W0, b0, W1, b1, ...
    """
    _, grads = _loss_and_grads(net, _prior_values(a), obs)
    return grads


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and moments must align")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def train(
    net: GlipNet,
    a,
    obs: ObservationGrid,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
) -> tuple[GlipNet, TrainTrace]:
    """Fit the generator with exactly ``epochs`` Adam updates.

    The trace records the masked loss after each update, so its last entry
    is the loss of the returned net. Deterministic for a fixed seed/net.
    """
    a_values = _prior_values(a)
    params = net.parameters()
    state = AdamState.for_params(params, lr=lr)
    trace = TrainTrace()
    for t in range(epochs):
        loss, grads = _loss_and_grads(net, a_values, obs)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at epoch {t}", trace=trace)
        if t > 0:
            trace.losses.append(loss)
        adam_step(state, params, grads)
    if epochs > 0:
        final_loss = masked_loss(forward(net, a_values), obs)
        if not math.isfinite(final_loss):
            raise NonFiniteLoss(f"loss became {final_loss} after final epoch", trace=trace)
        trace.losses.append(final_loss)
    return net, trace


def reconstruct(net: GlipNet, a) -> ExposureMap:
    """Wrap the generator output as a normalized-units exposure map."""
    return ExposureMap(values=forward(net, a), units=UNITS_NORMALIZED)
