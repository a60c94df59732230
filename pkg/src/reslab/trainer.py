"""Constant-step full-batch gradient descent with trajectory instrumentation.

Every recorded step captures the quantities the trajectory analysis needs:
losses, per-layer gradient norms, per-layer Frobenius distance from the
initialization, the spectral step-distance functional

    h(W', W) = ||d_1||_2 + theta * sum_{l=2..L} ||d_l||_2 + ||d_{L+1}||_2,
    d_l = W'_l - W_l,

activation-pattern flip fractions against the initialization, and the range
of hidden-layer norms over the batch.  The update rule is exactly
W_l <- W_l - eta * grad_l on every layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import lossgrad, numkit
from .model import NetworkParams, forward_batch

TRAJECTORY_COLUMNS = [
    "step", "loss", "surrogate", "train_err", "h_k", "max_dist_init",
    "grad_norm_first", "grad_norm_mid_max", "grad_norm_last",
    "flip_frac", "xl_min", "xl_max",
]


class DivergenceError(RuntimeError):
    """Gradient descent produced a non-finite quantity."""

    def __init__(self, step: int, what: str):
        super().__init__(f"divergence at step {step}: {what}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    steps: int
    tau_budget: float = None       # optional alarm threshold, never fatal
    stop_surrogate: float = None   # early-stop target for the surrogate loss
    record_every: int = 1
    seed: tuple = None             # provenance only; GD itself is deterministic

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"step size must be positive, got {self.eta}")
        if self.steps < 0:
            raise ValueError(f"step budget must be nonnegative, got {self.steps}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass(frozen=True)
class TrajectoryRecord:
    """Metrics of one iterate (and of the step its gradient defines)."""

    step: int
    loss: float
    surrogate: float
    train_err: float
    grad_frob: tuple          # per-layer Frobenius norms of the loss gradient
    h: float                  # eta-scaled spectral step distance of this step
    dist_init: tuple          # per-layer ||W_l - W_l^(0)||_F
    flip_frac: float          # pattern bits differing from init, all layers
    xl_min: float             # min/max ||x_L|| over the batch
    xl_max: float

    def csv_row(self) -> list:
        L = len(self.grad_frob) - 1
        mid = max(self.grad_frob[1:L]) if L >= 2 else 0.0
        return [self.step, self.loss, self.surrogate, self.train_err, self.h,
                max(self.dist_init), self.grad_frob[0], mid, self.grad_frob[-1],
                self.flip_frac, self.xl_min, self.xl_max]


@dataclass
class TrainResult:
    params: NetworkParams
    records: list
    best_step: int = None
    best_surrogate: float = None
    tau_breach_step: int = None
    stopped_early: bool = False
    steps_run: int = 0


def step_distance(a: NetworkParams, b: NetworkParams, iters: int = 300,
                  tol: float = 1e-9, restarts: int = 1) -> float:
    """Spectral step distance h(a, b); zero iff the weights coincide."""
    if a.widths != b.widths or a.d != b.d:
        raise ValueError("networks have different shapes")
    total = 0.0
    for l in range(1, a.depth + 2):
        diff = a.weights[l - 1] - b.weights[l - 1]
        if not np.any(diff):
            continue  # spectral norm of an exact zero block is zero
        total += a.layer_scale(l) * numkit.spectral_norm(diff, iters, tol, restarts)
    return total


def _grad_step_distance(params: NetworkParams, grads: lossgrad.GradientSet,
                        eta: float) -> float:
    scales = [params.layer_scale(l) for l in range(1, params.depth + 2)]
    return eta * sum(s * g for s, g in zip(scales, grads.spectral_norms()))


def _flip_fraction(bt, init_patterns) -> float:
    diff = 0
    total = 0
    for cur, ref in zip(bt.patterns, init_patterns):
        diff += int(np.count_nonzero(cur != ref))
        total += cur.size
    return diff / total


def _evaluate(params, xs, ys, step, init_weights, init_patterns, eta,
              with_h=True):
    """Forward + gradient at one iterate, packaged as a TrajectoryRecord.

    The spectral step distance h is the one expensive field; callers that
    only need the cheap metrics (loss, norms, distances) can defer it.
    """
    bt = forward_batch(params, xs)
    loss, surrogate, grads = lossgrad.loss_grad_from_trace(params, bt, ys)
    if not np.isfinite(loss.total):
        raise DivergenceError(step, f"loss = {loss.total}")
    grad_frob = grads.frobenius_norms()
    if not all(np.isfinite(g) for g in grad_frob):
        raise DivergenceError(step, "non-finite gradient")
    train_err = float(np.mean(ys * bt.outputs <= 0.0))
    xl_norms = np.linalg.norm(bt.activations[params.depth], axis=1)
    dist = tuple(numkit.frobenius_norm(w - w0)
                 for w, w0 in zip(params.weights, init_weights))
    rec = TrajectoryRecord(
        step=step,
        loss=loss.total,
        surrogate=surrogate.empirical,
        train_err=train_err,
        grad_frob=grad_frob,
        h=_grad_step_distance(params, grads, eta) if with_h else float("nan"),
        dist_init=dist,
        flip_frac=_flip_fraction(bt, init_patterns) if init_patterns is not None else 0.0,
        xl_min=float(np.min(xl_norms)),
        xl_max=float(np.max(xl_norms)),
    )
    return rec, grads, surrogate.empirical


def _apply_update(params: NetworkParams, grads: lossgrad.GradientSet,
                  eta: float) -> NetworkParams:
    return params.with_weights(
        w - eta * g for w, g in zip(params.weights, grads.layers))


def gd_step(params: NetworkParams, dataset, eta: float,
            init_params: NetworkParams = None):
    """One exact gradient-descent step W_l <- W_l - eta * grad_l.

    The record carries the pre-step losses and gradient norms together with
    the post-step distances from ``init_params`` (the pre-step weights when
    no initialization is supplied).
    """
    xs, ys = lossgrad._as_xy(dataset)
    ref = init_params if init_params is not None else params
    rec, grads, _ = _evaluate(params, xs, ys, 0, ref.weights, None, eta)
    new_params = _apply_update(params, grads, eta)
    dist = tuple(numkit.frobenius_norm(w - w0)
                 for w, w0 in zip(new_params.weights, ref.weights))
    return new_params, replace(rec, dist_init=dist)


def train(params: NetworkParams, dataset, cfg: TrainConfig) -> TrainResult:
    """Run at most cfg.steps GD iterations, recording the trajectory.

    Record k describes iterate W^(k); the loop stops early once the
    surrogate target is met, and flags (without aborting) the first step at
    which any layer leaves the tau_budget ball around the initialization.
    """
    xs, ys = lossgrad._as_xy(dataset)
    result = TrainResult(params=params, records=[])
    if cfg.steps == 0:
        return result  # zero budget: the untouched init, empty trajectory
    init_weights = params.weights
    init_patterns = forward_batch(params, xs).patterns
    best = np.inf
    for k in range(cfg.steps + 1):
        recording = k % cfg.record_every == 0 or k == cfg.steps
        rec, grads, surrogate = _evaluate(
            params, xs, ys, k, init_weights, init_patterns, cfg.eta,
            with_h=recording)
        stopping = (cfg.stop_surrogate is not None
                    and surrogate <= cfg.stop_surrogate)
        if stopping and not recording:
            rec = replace(rec, h=_grad_step_distance(params, grads, cfg.eta))
        if recording or stopping:
            result.records.append(rec)
        if surrogate < best:
            best = surrogate
            result.best_step = k
            result.best_surrogate = surrogate
        if (result.tau_breach_step is None and cfg.tau_budget is not None
                and max(rec.dist_init) > cfg.tau_budget):
            result.tau_breach_step = k
        result.steps_run = k
        if stopping:
            result.stopped_early = True
            break
        if k == cfg.steps:
            break
        params = _apply_update(params, grads, cfg.eta)
    result.params = params
    return result


def write_trajectory_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in rec.csv_row()) + "\n")


def write_summary_json(result: TrainResult, config_echo: dict, path) -> None:
    summary = {
        "config": config_echo,
        "best_step": result.best_step,
        "best_surrogate": result.best_surrogate,
        "tau_breach_step": result.tau_breach_step,
        "stopped_early": result.stopped_early,
        "steps_run": result.steps_run,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
