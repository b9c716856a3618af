"""SDF-based volume rendering along ray samples.

Opacity comes from the unbiased first-order SDF estimator: with the logistic
CDF ``phi(x) = sigmoid(s * x)``,

    alpha_i = max((phi(f_i) - phi(f_{i+1})) / phi(f_i), 0),   alpha_last = 0

then transmittance T_i = prod_{j<i} (1 - alpha_j) and weights w_i = T_i a_i.
All functions take batched (R, n) arrays and have explicit backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    # exp overflow-safe logistic
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class RenderWeights:
    """Per-sample compositing state for a batch of rays."""

    alphas: np.ndarray  # (R,n) in [0,1]
    transmittances: np.ndarray  # (R,n), T_0 = 1
    weights: np.ndarray  # (R,n), w = T * alpha
    s: float  # inverse-bandwidth of the logistic CDF


def sdf_to_alpha(sdf_values, s):
    """Opacities from SDF samples along each ray; sdf_values (R,n), s > 0."""
    f = np.atleast_2d(np.asarray(sdf_values, dtype=np.float64))
    if f.shape[-1] < 2:
        raise ValueError("need at least two samples per ray")
    if s <= 0:
        raise ValueError("s must be positive")
    phi = sigmoid(s * f)
    num = phi[:, :-1] - phi[:, 1:]
    alpha = np.maximum(num / phi[:, :-1], 0.0)
    return np.concatenate([alpha, np.zeros((f.shape[0], 1))], axis=-1)


def sdf_to_alpha_backward(sdf_values, s, upstream):
    """(dL/dsdf (R,n), dL/ds scalar) given dL/dalpha = ``upstream``."""
    f = np.atleast_2d(np.asarray(sdf_values, dtype=np.float64))
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))[:, :-1]
    phi = sigmoid(s * f)
    phi_i, phi_j = phi[:, :-1], phi[:, 1:]
    active = (phi_i - phi_j) > 0  # relu gate
    up = up * active
    # alpha = 1 - phi_j / phi_i
    dalpha_dphi_i = phi_j / phi_i**2
    dalpha_dphi_j = -1.0 / phi_i
    dphi_df = s * phi * (1.0 - phi)  # (R,n)
    dphi_ds = f * phi * (1.0 - phi)

    dsdf = np.zeros_like(f)
    dsdf[:, :-1] += up * dalpha_dphi_i * dphi_df[:, :-1]
    dsdf[:, 1:] += up * dalpha_dphi_j * dphi_df[:, 1:]
    ds = float(np.sum(up * (dalpha_dphi_i * dphi_ds[:, :-1] + dalpha_dphi_j * dphi_ds[:, 1:])))
    return dsdf, ds


def compose_weights(alphas, s=0.0):
    """Transmittances T_i = prod_{j<i}(1-a_j) and weights w_i = T_i a_i."""
    a = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alphas must lie in [0,1]")
    one_minus = 1.0 - a
    T = np.concatenate(
        [np.ones((a.shape[0], 1)), np.cumprod(one_minus[:, :-1], axis=-1)], axis=-1
    )
    return RenderWeights(alphas=a, transmittances=T, weights=T * a, s=float(s))


def compose_weights_backward(weights: RenderWeights, upstream_w):
    """dL/dalphas given dL/dweights.

    w_k = a_k * prod_{j<k}(1-a_j), so
    dL/da_i = g_i T_i - sum_{k>i} g_k w_k / (1 - a_i).
    """
    a = weights.alphas
    T = weights.transmittances
    w = weights.weights
    g = np.atleast_2d(np.asarray(upstream_w, dtype=np.float64))
    gw = g * w
    # suffix[i] = sum_{k>i} g_k w_k
    suffix = np.flip(np.cumsum(np.flip(gw, axis=-1), axis=-1), axis=-1) - gw
    return g * T - suffix / np.maximum(1.0 - a, 1e-12)


def render_along_ray(weights: RenderWeights, per_sample_values):
    """Composite per-sample values: (R,n,C) -> (R,C) via sum_i w_i v_i."""
    v = np.asarray(per_sample_values, dtype=np.float64)
    return np.einsum("rn,rnc->rc", weights.weights, v)


def render_along_ray_backward(weights: RenderWeights, per_sample_values, upstream):
    """(dL/dweights (R,n), dL/dvalues (R,n,C)) given dL/drendered (R,C)."""
    v = np.asarray(per_sample_values, dtype=np.float64)
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    d_w = np.einsum("rnc,rc->rn", v, up)
    d_v = weights.weights[:, :, None] * up[:, None, :]
    return d_w, d_v


def render_weights_from_sdf(sdf_values, s):
    """Convenience: sdf samples -> RenderWeights in one call."""
    return compose_weights(sdf_to_alpha(sdf_values, s), s=s)
