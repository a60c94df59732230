"""Cross-entropy and surrogate losses with closed-form network gradients.

The gradient of the network output with respect to layer l is rank one,

    grad_{W_l} f(x) = s_l * outer(x_{l-1}, g_l ⊙ sigma_l),
    g_l = vᵀ H_{l+1}^{L+1},   s_l = theta on layers 2..L, 1 at the ends,

so batch gradients are sums of rank-one terms, accumulated here by a single
matmul per layer in fixed sample order.  A central finite-difference oracle
(with a pattern-flip detector, since the output is only piecewise linear in
each weight) provides the independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .model import BatchTrace, NetworkParams, forward, forward_batch


class DataError(ValueError):
    """Labels or samples violate the loss contract."""


def xent(z):
    """Cross-entropy loss log(1 + exp(-z)), overflow-safe for any float z."""
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out

def xent_deriv(z):
    """Derivative of the cross-entropy loss: -1 / (1 + exp(z)), in (-1, 0)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    ez = np.exp(-np.abs(z))
    out[pos] = -ez[pos] / (1.0 + ez[pos])
    out[~pos] = -1.0 / (1.0 + ez[~pos])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossValue:
    """Empirical cross-entropy loss: mean over samples plus the per-sample terms."""
    total: float
    per_sample: np.ndarray


@dataclass(frozen=True)
class SurrogateValue:
    """Empirical surrogate loss: mean of -l'(y f), always inside (0, 1)."""
    empirical: float


@dataclass(frozen=True)
class GradientSet:
    """Per-layer gradient matrices matching the weight shapes.

    ``factors`` optionally memoizes (A_l, B_l) with A_lᵀ B_l equal to the
    dense layer gradient, which makes spectral norms cheap when the batch is
    much smaller than the width.
    """
    layers: tuple
    factors: tuple = None

    def frobenius_norms(self) -> tuple:
        return tuple(numkit.frobenius_norm(g) for g in self.layers)

    def spectral_norms(self, iters: int = 200, tol: float = 1e-8) -> tuple:
        if self.factors is not None:
            return tuple(numkit.factored_spectral_norm(a, b, iters, tol)
                         for a, b in self.factors)
        return tuple(numkit.spectral_norm(g, iters, tol) for g in self.layers)


def _backward_rows(params: NetworkParams, bt: BatchTrace) -> list:
    """rows[l] = per-sample vᵀ H_{l+1}^{L+1}, for l = 1..L+1 (rows[0] unused)."""
    L = params.depth
    n = bt.n
    rows = [None] * (L + 2)
    g = np.broadcast_to(params.v, (n, params.m_last))
    rows[L + 1] = g
    for l in range(L + 1, 1, -1):
        masked = (g * bt.pattern(l)) @ params.weights[l - 1].T
        if params.arch == "residual" and 2 <= l <= L:
            g = g + params.theta * masked
        else:
            g = masked
        rows[l - 1] = g
    return rows


def output_gradient(params: NetworkParams, trace, l: int) -> np.ndarray:
    """Analytic gradient of the network output with respect to W_l."""
    L = params.depth
    if not 1 <= l <= L + 1:
        raise IndexError(f"layer {l} out of range 1..{L + 1}")
    bt = forward_batch(params, trace.x[None, :])
    rows = _backward_rows(params, bt)
    b = (rows[l] * bt.pattern(l))[0]
    a = bt.activations[l - 1][0]
    return params.layer_scale(l) * np.outer(a, b)


def batch_output_grad(params: NetworkParams, bt: BatchTrace,
                      weights: np.ndarray) -> GradientSet:
    """Weighted sum over samples of output gradients: sum_i w_i grad f(x_i)."""
    rows = _backward_rows(params, bt)
    layers = []
    factors = []
    w = np.asarray(weights, dtype=np.float64)
    for l in range(1, params.depth + 2):
        a = params.layer_scale(l) * (w[:, None] * bt.activations[l - 1])
        b = rows[l] * bt.pattern(l)
        layers.append(a.T @ b)
        factors.append((a, b))
    return GradientSet(tuple(layers), tuple(factors))


def _as_xy(dataset):
    if hasattr(dataset, "xs") and hasattr(dataset, "ys"):
        return np.asarray(dataset.xs, dtype=np.float64), np.asarray(dataset.ys, dtype=np.float64)
    xs, ys = dataset
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)


def loss_grad_from_trace(params: NetworkParams, bt: BatchTrace, ys: np.ndarray):
    """Loss, surrogate, and loss gradient reusing an existing forward trace."""
    ys = np.asarray(ys, dtype=np.float64)
    if ys.shape != (bt.n,):
        raise DataError(f"labels have shape {ys.shape}, expected ({bt.n},)")
    if not np.all(np.abs(ys) == 1.0):
        raise DataError("labels must be +1 or -1")
    z = ys * bt.outputs
    per_sample = xent(z)
    n = bt.n
    loss = LossValue(numkit.pairwise_sum(per_sample) / n, per_sample)
    lderiv = xent_deriv(z)
    surrogate = SurrogateValue(-numkit.pairwise_sum(lderiv) / n)
    grads = batch_output_grad(params, bt, lderiv * ys / n)
    return loss, surrogate, grads


def batch_loss_grad(params: NetworkParams, dataset):
    """Empirical loss, surrogate, and full loss gradient over a dataset."""
    xs, ys = _as_xy(dataset)
    if xs.shape[0] == 0:
        raise DataError("empty dataset")
    bt = forward_batch(params, xs)
    return loss_grad_from_trace(params, bt, ys)


def _perturbed(params: NetworkParams, l: int, i: int, j: int, delta: float) -> NetworkParams:
    w = [wl.copy() if k == l - 1 else wl for k, wl in enumerate(params.weights)]
    w[l - 1][i, j] += delta
    return params.with_weights(w)


def finite_diff_oracle(params: NetworkParams, x: np.ndarray, l: int,
                       i: int, j: int, h: float) -> float:
    """Central difference of the output along weight entry (i, j) of layer l."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    f_plus = forward(_perturbed(params, l, i, j, +h), x).output
    f_minus = forward(_perturbed(params, l, i, j, -h), x).output
    return (f_plus - f_minus) / (2.0 * h)


def perturbation_flips(params: NetworkParams, x: np.ndarray, l: int,
                       i: int, j: int, h: float) -> bool:
    """True if the ±h probes of entry (i, j) flip any activation pattern bit.

    Flipped entries sit on a kink of the piecewise-linear output, where the
    central difference no longer matches the one-sided analytic gradient.
    """
    base = forward(params, x)
    for delta in (+h, -h):
        pert = forward(_perturbed(params, l, i, j, delta), x)
        for pl in range(1, params.depth + 2):
            if not np.array_equal(base.pattern(pl), pert.pattern(pl)):
                return True
    return False
