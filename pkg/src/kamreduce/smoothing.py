"""Analytic smoothing of torus data by a flat Fourier cutoff, and telescoping layers.

Smoothing at width sigma multiplies mode k by phi(sigma |k|), where phi is a
fixed C-infinity cutoff: 1 on [0, 1/2], exp(1 - 1/(1 - t^2)) with
t = 2|xi| - 1 on (1/2, 1), and 0 beyond.  Mode norms are l1 (as in the rest
of the package).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .torus_fourier import TorusSeries, mode_norms
from .wave_model import QPBlockOperator, RTriple


def cutoff_profile(xi) -> np.ndarray:
    """The flat bump phi(|xi|)."""
    x = np.abs(np.asarray(xi, float))
    out = np.zeros_like(x)
    out[x <= 0.5] = 1.0
    mid = (x > 0.5) & (x < 1.0)
    t = 2 * x[mid] - 1
    out[mid] = np.exp(1.0 - 1.0 / (1.0 - t * t))
    return out


def _as_series(P):
    if isinstance(P, QPBlockOperator):
        return P.series, lambda s: QPBlockOperator(s, P.J, P.tag)
    if isinstance(P, TorusSeries):
        return P, lambda s: s
    raise TypeError("expected a TorusSeries or QPBlockOperator")


def jackson_smooth(P, sigma: float):
    """Fourier multiplier phi(sigma k): analytic approximant of P on a strip ~ sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s, wrap = _as_series(P)
    w = cutoff_profile(sigma * mode_norms(s.dim, s.cutoff))
    return wrap(s.multiplier(w))


@dataclass(frozen=True)
class LayeredOperator:
    """layers[l] valid on strips[l]; the last layer absorbs everything deeper."""

    layers: tuple
    strips: tuple
    decay_exponent: float

    def __len__(self):
        return len(self.layers)

    def total(self):
        out = self.layers[0]
        for layer in self.layers[1:]:
            out = out + layer
        return out

    def layer_norms(self, norm=None):
        if norm is None:
            norm = lambda x, s: _as_series(x)[0].strip_norm(s)
        return [norm(layer, s) for layer, s in zip(self.layers, self.strips)]


def split_layers(P, strips, merge_rest: bool = True, decay_exponent: float = 0.0) -> LayeredOperator:
    """Telescoping split layer_0 = S_{s_0} P, layer_l = S_{s_l} P - S_{s_(l-1)} P.

    With merge_rest (the default) the final layer also carries P - S_{s_L} P,
    so the layers sum to P exactly.
    """
    strips = tuple(float(s) for s in strips)
    if any(s <= 0 for s in strips) or any(b >= a for a, b in zip(strips, strips[1:])):
        raise ValueError("strips must be positive and strictly decreasing")
    s, wrap = _as_series(P)
    prev = None
    layers = []
    for sigma in strips:
        cur = jackson_smooth(s, sigma)
        layers.append(cur if prev is None else cur - prev)
        prev = cur
    if merge_rest:
        layers[-1] = layers[-1] + (s - prev)
    return LayeredOperator(tuple(wrap(x) for x in layers), strips, decay_exponent)


def split_triple(R: RTriple, strips) -> list:
    """Split each part of an R-triple; returns a list of RTriple layers."""
    parts = [split_layers(p, strips) for p in R.parts()]
    return [RTriple(*(p.layers[l] for p in parts)) for l in range(len(strips))]


def fit_decay(strips, norms):
    """Least-squares slope of log(norm_l) against log(s_(l-1)) over l >= 1."""
    x = np.log(np.asarray(strips[:-1], float))
    y = np.log(np.asarray(norms[1:], float))
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope), float(np.exp(icpt))
