"""Gradient-weighted heatmaps for individual semantic features.

For each component ``Q_l`` of the semantic vector, the gradient map over the
last conv activations is turned into per-pixel weighting coefficients, then
into one importance weight per feature map; the weighted sum of feature maps
goes through a leaky ReLU so negative evidence is damped rather than
discarded. Second and third derivatives use the exponential-score closed
form (powers of the first gradient), so only first-order autodiff is needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import DimensionError
from .pgm import write_pgm

log = logging.getLogger(__name__)

DEGENERATE = 1e-12


def semantic_gradients(tape, q_l, A):
    """d(q_l)/dA with the same shape as A."""
    return tape.grad_of(q_l, A)


def weighting_coefficients(G, A):
    """Per-pixel coefficients ``g^2 / (2 g^2 + sum(A^k) g^3)``.

    Works on [..., K, h, w] arrays. Pixels whose denominator vanishes get 0.
    """
    G = np.asarray(G, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if G.shape != A.shape:
        raise DimensionError(f"gradient shape {G.shape} != activation shape {A.shape}")
    g2 = G * G
    denom = 2.0 * g2 + A.sum(axis=(-2, -1), keepdims=True) * g2 * G
    ok = np.abs(denom) > DEGENERATE
    return np.where(ok, g2 / np.where(ok, denom, 1.0), 0.0)


def neuron_importance(rho, G):
    """One weight per feature map: sum over pixels of coefficient times gradient."""
    return (np.asarray(rho) * np.asarray(G)).sum(axis=(-2, -1))


def localization_map(omega, A, slope):
    """leakyReLU(sum_k omega_k A^k) over [..., K, h, w] activations."""
    combo = np.einsum("...k,...kij->...ij", np.asarray(omega, dtype=np.float64), np.asarray(A, dtype=np.float64))
    return T.leaky_relu(combo, slope).data


def normalize(m):
    """Min-max scale to [0, 1]; a constant map becomes zeros and is flagged."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= DEGENERATE * max(1.0, abs(hi)):
        return np.zeros_like(m), True
    return (m - lo) / (hi - lo), False


def upsample(m, shape):
    """Bilinear resize of a 2-D map to ``shape``."""
    zoom = (shape[0] / m.shape[0], shape[1] / m.shape[1])
    return ndimage.zoom(m, zoom, order=1, mode="nearest", grid_mode=True)


@dataclass
class Explanation:
    feature_maps: np.ndarray  # [L, h, w] raw localization maps
    mean_map: np.ndarray  # [h, w] raw mean over features
    heatmap: np.ndarray  # [H, W] normalized, input resolution
    feature_heatmaps: np.ndarray  # [L, H, W] normalized, input resolution
    constant: bool


def _finish(maps, image_hw):
    mean = maps.mean(axis=0)
    norm, constant = normalize(mean)
    if constant:
        log.warning("aggregated localization map is constant; exporting zeros")
        heat = np.zeros(image_hw)
    else:
        heat, _ = normalize(upsample(norm, image_hw))
    per = []
    for m in maps:
        n, flat = normalize(m)
        per.append(np.zeros(image_hw) if flat else normalize(upsample(n, image_hw))[0])
    return Explanation(maps, mean, heat, np.stack(per), constant)


def explain(model, params, x, slope=0.2):
    """Heatmaps for one image [C,H,W] or a batch [B,C,H,W].

    Model weights are held fixed; only the input-dependent activations are
    differentiated. Returns an Explanation, or a list of them for a batch.
    """
    T.check_slope(slope)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    tape = T.Tape()
    Q, A = model.encode(xb, params, tape=tape)
    L = Q.shape[-1]
    maps = np.empty((xb.shape[0], L) + A.shape[-2:])
    for l in range(L):
        # images are independent, so the batch sum yields every image's gradient
        G = semantic_gradients(tape, Q[:, l].sum(), A)
        rho = weighting_coefficients(G, A.data)
        omega = neuron_importance(rho, G)
        maps[:, l] = localization_map(omega, A.data, slope)
    hw = xb.shape[-2:]
    results = [_finish(maps[b], hw) for b in range(xb.shape[0])]
    return results[0] if single else results


def export_heatmaps(explanation, stem, out_dir, binary=True):
    """Write ``<stem>.esc.<l>.pgm`` per feature and ``<stem>.esc.mean.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for l, m in enumerate(explanation.feature_heatmaps):
        p = out / f"{stem}.esc.{l}.pgm"
        write_pgm(p, m, binary=binary)
        paths.append(p)
    p = out / f"{stem}.esc.mean.pgm"
    write_pgm(p, explanation.heatmap, binary=binary)
    paths.append(p)
    return paths
