"""Empirical probes: one measured quantity per provable bound.

Each probe evaluates the bounded quantity over seeded trials, computes the
bound's right-hand side, and fits the smallest constant that makes the bound
hold over every trial (the pointwise max of measured/basis, so adding trials
can only grow a fitted upper constant).  A probe's verdict is ``hold`` iff
the measured value stays within the bound expression in every trial; when no
externally configured constant exists, the bound uses the fitted one and the
interesting output is the fitted constant's stability across widths and
depths, which the acceptance suite tracks.

Reports serialize to ``<name>.report.json`` plus ``<name>.details.csv`` and
are recomputable from the details alone.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import lossgrad, numkit, trainer
from .data import MarginDataset, Teacher, sample_dataset
from .model import (InterlayerOp, NetworkParams, forward, forward_batch,
                    init_gaussian, interlayer_apply, interlayer_norm)
from .numkit import RngState

VERDICT_HOLD = "hold"
VERDICT_VIOLATED = "violated"


@dataclass
class ProbeReport:
    """One probe's measured quantities, bound value, fit, and verdict."""

    name: str
    measured: dict
    bound_expr: float
    constant_fit: float
    trials: int
    verdict: str
    config: dict = field(default_factory=dict)
    detail_columns: list = field(default_factory=list)
    details: list = field(default_factory=list)

    def write(self, out_dir) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        report_path = os.path.join(out_dir, f"{self.name}.report.json")
        details_path = os.path.join(out_dir, f"{self.name}.details.csv")
        payload = {
            "name": self.name,
            "measured": self.measured,
            "bound_expr": self.bound_expr,
            "constant_fit": self.constant_fit,
            "trials": self.trials,
            "verdict": self.verdict,
            "config": self.config,
            "details_file": os.path.basename(details_path),
        }
        with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        with open(details_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.detail_columns) + "\n")
            for row in self.details:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
        return {"report": report_path, "details": details_path}


def _verdict(ok: bool) -> str:
    return VERDICT_HOLD if ok else VERDICT_VIOLATED


BOUNDARY_FRACTION = 0.8  # fraction of ball draws placed on the boundary


@dataclass(frozen=True)
class PerturbationBall:
    """Sampler of weight collections within Frobenius distance tau per layer.

    Draws are boundary-biased: most samples sit at radius exactly tau, which
    stresses sup-over-ball bounds harder than uniform sampling would.
    """

    center: NetworkParams
    tau: float
    rng: RngState

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"radius must be nonnegative, got {self.tau}")

    def draw(self) -> NetworkParams:
        new = []
        for w in self.center.weights:
            if self.tau == 0.0:
                new.append(w)
                continue
            direction = self.rng.standard_normal(w.shape)
            norm = numkit.frobenius_norm(direction)
            radius = self.tau
            if self.rng.uniform() >= BOUNDARY_FRACTION:
                radius = self.tau * (1.0 - float(self.rng.uniform()))  # in (0, tau]
            delta = direction * (radius / norm)
            # post-projection on the stored difference: (w + delta) - w picks
            # up cancellation noise, so iterate until the invariant is exact
            for _ in range(8):
                stored = (w + delta) - w
                dn = numkit.frobenius_norm(stored)
                if dn <= self.tau:
                    break
                delta = stored * (self.tau / dn) * (1.0 - 1e-12)
            assert numkit.frobenius_norm((w + delta) - w) <= self.tau
            new.append(w + delta)
        return self.center.with_weights(new)


# ---------------------------------------------------------------------------
# activation / interlayer norms at initialization
# ---------------------------------------------------------------------------

def _default_layer_pairs(L: int) -> list:
    mid = (2 + L) // 2
    pairs = [(2, L), (2, mid), (mid, L), (1, L), (2, L + 1), (L, L)]
    return sorted({(l, lp) for l, lp in pairs if 1 <= l <= lp <= L + 1})


def probe_activation_norms(params: NetworkParams, inputs, norm_low=0.5,
                           norm_high=1.5, h_limit=None, h_inputs=5,
                           h_iters=120) -> ProbeReport:
    """Hidden-layer norm window and interlayer operator norms.

    Measures ||x_l|| for every layer over all inputs, and the spectral norm
    of H_l^{l'} over a fixed set of (l, l') pairs on a few inputs.  Verdict
    holds iff every activation norm lies in [norm_low, norm_high] and every
    middle-range operator (2 <= l <= l' <= L) stays below ``h_limit``
    (default exp(3*theta*L)); operators crossing the first or last layer
    carry a spectral factor of that weight matrix, so they are reported
    with a fitted constant rather than checked against the same limit.
    """
    xs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    bt = forward_batch(params, xs)
    L = params.depth
    if h_limit is None:
        h_limit = math.exp(3.0 * params.theta * L) if params.arch == "residual" else float("inf")

    rows = []
    ok = True
    xnorm_min, xnorm_max = np.inf, -np.inf
    for l in range(1, L + 2):
        norms = np.linalg.norm(bt.activations[l], axis=1)
        lo, hi = float(np.min(norms)), float(np.max(norms))
        xnorm_min, xnorm_max = min(xnorm_min, lo), max(xnorm_max, hi)
        ok = ok and (lo >= norm_low) and (hi <= norm_high)
        rows.append(["xnorm", l, 0, lo, hi])

    h_mid_max = 0.0
    h_all_max = 0.0
    pairs = _default_layer_pairs(L)
    for i in range(min(h_inputs, xs.shape[0])):
        trace = forward(params, xs[i])
        for (l, lp) in pairs:
            hn = interlayer_norm(InterlayerOp(trace, l, lp), iters=h_iters)
            h_all_max = max(h_all_max, hn)
            if 2 <= l and lp <= L:
                h_mid_max = max(h_mid_max, hn)
                ok = ok and hn <= h_limit
            rows.append(["hnorm", l, lp, hn, hn])

    return ProbeReport(
        name="activation_norms",
        measured={"xnorm_min": xnorm_min, "xnorm_max": xnorm_max,
                  "h_mid_max": h_mid_max, "h_all_max": h_all_max},
        bound_expr=h_limit,
        constant_fit=h_all_max,
        trials=int(xs.shape[0]),
        verdict=_verdict(ok),
        config={"norm_low": norm_low, "norm_high": norm_high, "h_limit": h_limit,
                "L": L, "m": params.m, "theta": params.theta, "arch": params.arch},
        detail_columns=["kind", "l", "lp", "value_min", "value_max"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# Lipschitz continuity in the input
# ---------------------------------------------------------------------------

def probe_input_lipschitz(params: NetworkParams, pairs, min_dist=1e-6,
                          bound_constant=None) -> ProbeReport:
    """Fitted constant for ||x_l - x_l'|| <= C ||x - x'|| over input pairs."""
    xs_a, xs_b = (np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in pairs)
    bt_a = forward_batch(params, xs_a)
    bt_b = forward_batch(params, xs_b)
    base = np.linalg.norm(xs_a - xs_b, axis=1)
    keep = base >= min_dist
    rows = []
    fitted = 0.0
    for l in range(1, params.depth + 2):
        diff = np.linalg.norm(bt_a.activations[l] - bt_b.activations[l], axis=1)
        ratios = diff[keep] / base[keep]
        if ratios.size:
            fitted = max(fitted, float(np.max(ratios)))
            rows.append([l, float(np.max(ratios)), float(np.mean(ratios))])
    bound = bound_constant if bound_constant is not None else fitted
    return ProbeReport(
        name="input_lipschitz",
        measured={"fitted_constant": fitted, "pairs_used": int(np.count_nonzero(keep))},
        bound_expr=bound,
        constant_fit=fitted,
        trials=int(np.count_nonzero(keep)),
        verdict=_verdict(fitted <= bound),
        config={"min_dist": min_dist, "L": params.depth, "m": params.m,
                "theta": params.theta, "arch": params.arch},
        detail_columns=["layer", "ratio_max", "ratio_mean"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# weight-Lipschitz + activation-flip sparsity over a radius grid
# ---------------------------------------------------------------------------

def _layered_weight_basis(params, wa, wb):
    """Per-layer accumulations of spectral weight differences.

    basis[l] corresponds to the bound for ||x^a_l - x^b_l||: layer 1 uses
    ||d_1||, layers 2..L add theta * sum_{r<=l} ||d_r||, and the output
    layer adds ||d_{L+1}||.
    """
    L = params.depth
    d_spec = [numkit.spectral_norm(a - b, iters=200, tol=1e-8, restarts=0)
              for a, b in zip(wa, wb)]
    basis = [0.0] * (L + 2)
    basis[1] = d_spec[0]
    run = 0.0
    for l in range(2, L + 1):
        run += d_spec[l - 1]
        basis[l] = d_spec[0] + params.theta * run
    basis[L + 1] = basis[L] + d_spec[L]
    return basis, d_spec


def probe_weight_lipschitz_and_flips(params: NetworkParams, rng: RngState,
                                     inputs, tau_grid=(0.01, 0.03, 0.1, 0.3),
                                     draws=8) -> ProbeReport:
    """Weight-space Lipschitz constant and flip-count scaling over tau.

    For pairs drawn in each tau-ball: (a) fits C2 in the layered bound
    ||x^a_l - x^b_l|| <= C2 * (||d_1|| + theta * sum ||d_r|| [+ ||d_{L+1}||]),
    and (b) fits C3 in  flips_l <= C3 * m_l * tau^(2/3), plus the log-log
    slope of mean flips against tau (theory predicts exponent 2/3).
    """
    xs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    L = params.depth
    rows = []
    fitted_c2 = 0.0
    fitted_c3 = 0.0
    mean_flips = []
    for tau in tau_grid:
        ball = PerturbationBall(params, tau, rng.substream(f"ball/{tau}"))
        flips_here = []
        for t in range(draws):
            wa = ball.draw()
            wb = ball.draw()
            basis, _ = _layered_weight_basis(params, wa.weights, wb.weights)
            bta = forward_batch(wa, xs)
            btb = forward_batch(wb, xs)
            for l in range(1, L + 2):
                dist = float(np.max(np.linalg.norm(
                    bta.activations[l] - btb.activations[l], axis=1)))
                if basis[l] > 0:
                    fitted_c2 = max(fitted_c2, dist / basis[l])
                flips = int(np.max(np.count_nonzero(
                    bta.pattern(l) != btb.pattern(l), axis=1)))
                m_l = params.widths[l - 1]
                fitted_c3 = max(fitted_c3, flips / (m_l * tau ** (2.0 / 3.0)))
                flips_here.append(flips)
                rows.append([tau, t, l, dist, basis[l], flips,
                             m_l * tau ** (2.0 / 3.0)])
        mean_flips.append(float(np.mean(flips_here)))

    # log-log slope of flips against tau over grid cells with any flips
    taus = np.asarray(tau_grid, dtype=np.float64)
    flips_arr = np.asarray(mean_flips)
    mask = flips_arr > 0
    slope = float("nan")
    if np.count_nonzero(mask) >= 2:
        slope = float(np.polyfit(np.log(taus[mask]), np.log(flips_arr[mask]), 1)[0])

    ok = all(r[3] <= fitted_c2 * r[4] + 1e-12 or r[4] == 0 for r in rows)
    return ProbeReport(
        name="weight_lipschitz_flips",
        measured={"fitted_c2": fitted_c2, "fitted_c3": fitted_c3,
                  "flip_slope": slope,
                  "mean_flips_per_tau": {repr(t): f for t, f in zip(tau_grid, mean_flips)}},
        bound_expr=fitted_c3,
        constant_fit=fitted_c2,
        trials=len(tau_grid) * draws,
        verdict=_verdict(ok),
        config={"tau_grid": list(tau_grid), "draws": draws, "m": params.m,
                "L": L, "theta": params.theta},
        detail_columns=["tau", "trial", "layer", "activation_dist",
                        "weight_basis", "flips", "flip_basis"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# semismoothness of the output and the empirical loss
# ---------------------------------------------------------------------------

def _linearization_terms(ref: NetworkParams, bt, deltas) -> np.ndarray:
    """Per-sample sum_l tr[delta_lᵀ grad_{W_l} f_ref(x_i)], vectorized."""
    rows = lossgrad._backward_rows(ref, bt)
    total = np.zeros(bt.n)
    for l in range(1, ref.depth + 2):
        b = rows[l] * bt.pattern(l)
        a = bt.activations[l - 1]
        total += ref.layer_scale(l) * np.einsum("ij,jk,ik->i", a, deltas[l - 1], b)
    return total


def probe_semismoothness(params: NetworkParams, rng: RngState, inputs,
                         tau=0.1, draws=50, dataset=None,
                         pairs: str = "center") -> ProbeReport:
    """Taylor residual of the output against the semismoothness basis.

    Each trial evaluates R = f_a(x) - f_b(x) - sum_l tr[(Wa_l - Wb_l)ᵀ
    grad f_b(x)] at one input (cycling through ``inputs``) and fits R
    against  tau^(1/3) sqrt(m log m) h + sqrt(m) h²  with h the spectral
    step distance.  ``pairs="center"`` expands around the initialization
    (Wb fixed to ``params``, the configuration the complexity argument
    instantiates); ``pairs="independent"`` draws both endpoints from the
    ball, which also stresses small-h pairs.  With a dataset, the
    loss-level residual is additionally fitted against the
    surrogate-weighted variant with an m h² second term.  A
    coincident-pair control asserts R == 0 exactly.
    """
    if pairs not in ("center", "independent"):
        raise ValueError(f"unknown pair scheme {pairs!r}")
    xs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    m = params.m
    ball = PerturbationBall(params, tau, rng.substream("ball"))
    rows = []
    fit_f = -np.inf
    fit_loss = -np.inf
    for t in range(draws):
        wa = ball.draw()
        wb = ball.draw() if pairs == "independent" else params
        h = trainer.step_distance(wa, wb, iters=200, tol=1e-8, restarts=0)
        deltas = [a - b for a, b in zip(wa.weights, wb.weights)]
        x = xs[t % xs.shape[0]][None, :]
        bta = forward_batch(wa, x)
        btb = forward_batch(wb, x)
        lin = _linearization_terms(wb, btb, deltas)
        resid = float(bta.outputs[0] - btb.outputs[0] - lin[0])
        basis_f = tau ** (1.0 / 3.0) * math.sqrt(m * math.log(m)) * h + math.sqrt(m) * h * h
        if basis_f > 0:
            fit_f = max(fit_f, resid / basis_f)
        loss_ratio = float("nan")
        if dataset is not None:
            ys = np.asarray(dataset.ys, dtype=np.float64)
            la, sa, _ = lossgrad.loss_grad_from_trace(
                wa, forward_batch(wa, dataset.xs), ys)
            lb, sb, gb = lossgrad.loss_grad_from_trace(
                wb, forward_batch(wb, dataset.xs), ys)
            lin_loss = sum(float(np.sum(d * g))
                           for d, g in zip(deltas, gb.layers))
            r_loss = la.total - lb.total - lin_loss
            basis_loss = (tau ** (1.0 / 3.0) * math.sqrt(m * math.log(m)) * h
                          * sb.empirical + m * h * h)
            if basis_loss > 0:
                loss_ratio = r_loss / basis_loss
                fit_loss = max(fit_loss, loss_ratio)
        rows.append([t, h, resid, basis_f, loss_ratio])

    # coincident-pair control: residual must vanish identically
    wc = ball.draw()
    btc = forward_batch(wc, xs)
    zero = [np.zeros_like(w) for w in wc.weights]
    control = btc.outputs - btc.outputs - _linearization_terms(wc, btc, zero)
    control_residual = float(np.max(np.abs(control)))

    ok = control_residual <= 1e-12
    return ProbeReport(
        name="semismoothness",
        measured={"fitted_cbar_f": fit_f,
                  "fitted_cbar_loss": fit_loss if dataset is not None else float("nan"),
                  "control_residual": control_residual},
        bound_expr=max(fit_f, 0.0),
        constant_fit=fit_f,
        trials=draws,
        verdict=_verdict(ok),
        config={"tau": tau, "draws": draws, "m": m, "L": params.depth,
                "with_loss": dataset is not None, "pairs": pairs},
        detail_columns=["trial", "h", "residual", "basis_f", "loss_ratio"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# gradient upper / lower bound ratios along a trajectory
# ---------------------------------------------------------------------------

def probe_gradient_bounds(params: NetworkParams, dataset, records,
                          gamma=None) -> ProbeReport:
    """Normalized gradient ratios along a recorded training trajectory.

    Upper:  ||grad_l||_F / (scale_l * sqrt(m) * E_S); the max is the fitted C.
    Lower:  ||grad_{L+1}||_F² / (m_{L+1} * gamma⁴ * E_S²); the min is the
    fitted lower constant; positivity is the point.
    """
    if not records:
        raise ValueError("need a nonempty trajectory")
    if gamma is None:
        gamma = dataset.teacher.gamma if isinstance(dataset, MarginDataset) else None
    if gamma is None:
        raise ValueError("no margin available: pass gamma explicitly")
    m = params.m
    L = params.depth
    sqrt_m = math.sqrt(m)
    rows = []
    up = -np.inf
    low = np.inf
    for rec in records:
        es = rec.surrogate
        if es <= 0:
            continue  # saturated surrogate: ratios undefined
        worst_up = 0.0
        for l in range(1, L + 2):
            ratio = rec.grad_frob[l - 1] / (params.layer_scale(l) * sqrt_m * es)
            worst_up = max(worst_up, ratio)
        ratio_low = rec.grad_frob[L] ** 2 / (params.m_last * gamma ** 4 * es ** 2)
        up = max(up, worst_up)
        low = min(low, ratio_low)
        rows.append([rec.step, es, worst_up, ratio_low])
    return ProbeReport(
        name="gradient_bounds",
        measured={"fitted_upper": up, "fitted_lower": low},
        bound_expr=up,
        constant_fit=up,
        trials=len(rows),
        verdict=_verdict(low > 0 and np.isfinite(up)),
        config={"gamma": gamma, "m": m, "m_last": params.m_last,
                "theta": params.theta, "L": L},
        detail_columns=["step", "surrogate", "ratio_up_max", "ratio_low"],
        details=rows,
    )


def last_layer_column_sets(params_init: NetworkParams, params_cur: NetworkParams,
                           dataset) -> dict:
    """Diagnostic sizes of the strong-column set A and flip set A'.

    A collects output-layer columns whose aggregate per-column gradient
    (with initialization patterns) is large relative to gamma * E_S; A' are
    columns whose activation pattern flipped between the two weight settings.
    Emitted as diagnostics only; their thresholds are proof artifacts.
    """
    xs, ys = lossgrad._as_xy(dataset)
    bt0 = forward_batch(params_init, xs)
    btc = forward_batch(params_cur, xs)
    gamma = dataset.teacher.gamma
    z = ys * btc.outputs
    a_weights = -lossgrad.xent_deriv(z)            # a(x, y) in [0, 1]
    es = float(np.mean(a_weights))
    n = xs.shape[0]
    pat0 = bt0.pattern(params_init.depth + 1)      # (n, m_last), init patterns
    x_l = bt0.activations[params_init.depth]       # (n, m_L), init activations
    coef = (a_weights * ys)[:, None] * pat0        # (n, m_last)
    g_cols = x_l.T @ coef / n                      # (m_L, m_last): g_j columns
    col_sq = np.sum(g_cols * g_cols, axis=0)
    threshold = gamma ** 2 * es ** 2 / (2 * 67)
    set_a = col_sq >= threshold
    flipped = np.any(bt0.pattern(params_init.depth + 1)
                     != btc.pattern(params_cur.depth + 1), axis=0)
    return {
        "A": int(np.count_nonzero(set_a)),
        "A_prime": int(np.count_nonzero(flipped)),
        "A_minus_A_prime": int(np.count_nonzero(set_a & ~flipped)),
        "m_last": params_init.m_last,
        "surrogate": es,
    }


# ---------------------------------------------------------------------------
# layerwise linear separability direction
# ---------------------------------------------------------------------------

def separability_direction(teacher: Teacher, params: NetworkParams,
                           method: str = "kernel", power: float = 3.0) -> np.ndarray:
    """Unit direction built from teacher coefficients at scaled first-layer rows.

    Each first-layer column w_{1,j}, rescaled by sqrt(m_1/2) to unit-Gaussian
    calibration, gets a coefficient from a measurable |c| <= 1 extension of
    the teacher's discrete ±1 coefficients:

    - ``kernel``: c(u) = clip(sum_k c_k cos_+(u, u_k)^power, ±1), a smooth
      feature-similarity vote (the default; empirically it preserves the
      teacher's margin structure far better than a hard assignment), or
    - ``nearest``: c(u) = c of the nearest feature by cosine similarity.

    The resulting vector is normalized to the unit sphere.
    """
    m1 = params.widths[0]
    u = math.sqrt(m1 / 2.0) * params.weights[0].T      # (m_1, d) calibrated rows
    u_norm = u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    t_norm = teacher.directions / np.maximum(
        np.linalg.norm(teacher.directions, axis=1, keepdims=True), 1e-300)
    cos = u_norm @ t_norm.T
    if method == "nearest":
        alpha = teacher.coeffs[np.argmax(cos, axis=1)]
    elif method == "kernel":
        alpha = np.clip(np.maximum(cos, 0.0) ** power @ teacher.coeffs, -1.0, 1.0)
    else:
        raise ValueError(f"unknown coefficient extension {method!r}")
    return alpha / np.linalg.norm(alpha)


def probe_separability(teacher: Teacher, params: NetworkParams,
                       dataset, rng: RngState, margin_floor=None,
                       method: str = "kernel", power: float = 3.0) -> ProbeReport:
    """Layerwise margins of the constructed direction versus a random control.

    Requires freshly initialized params (the construction reads W_1 at
    initialization).  Reports min_i y_i <alpha, x_{l,i}> per hidden layer;
    verdict holds iff the layer-L margin clears ``margin_floor``
    (default gamma / 4) while the random-alpha control does not.
    """
    gamma = teacher.gamma
    if margin_floor is None:
        margin_floor = gamma / 4.0
    alpha = separability_direction(teacher, params, method=method, power=power)
    control = rng.standard_normal(alpha.shape[0])
    control /= np.linalg.norm(control)
    bt = forward_batch(params, dataset.xs)
    ys = dataset.ys
    rows = []
    margins = []
    margins_ctl = []
    for l in range(1, params.depth + 1):
        acts = bt.activations[l]
        margin = float(np.min(ys * (acts @ alpha)))
        margin_ctl = float(np.min(ys * (acts @ control)))
        margins.append(margin)
        margins_ctl.append(margin_ctl)
        rows.append([l, margin, margin_ctl])
    final_margin = margins[-1]
    ok = final_margin >= margin_floor and margins_ctl[-1] < margin_floor
    return ProbeReport(
        name="separability",
        measured={"margin_layer1": margins[0], "margin_layerL": final_margin,
                  "margin_min": min(margins), "control_margin_layerL": margins_ctl[-1]},
        bound_expr=margin_floor,
        constant_fit=final_margin / gamma,
        trials=params.depth,
        verdict=_verdict(ok),
        config={"gamma": gamma, "margin_floor": margin_floor, "m": params.m,
                "L": params.depth, "theta": params.theta, "method": method,
                "power": power},
        detail_columns=["layer", "margin", "control_margin"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# near-threshold pre-activation index sets
# ---------------------------------------------------------------------------

def probe_threshold_indices(params: NetworkParams, inputs,
                            beta_grid=(0.001, 0.01, 0.1)) -> ProbeReport:
    """Counts of units with |w_{l,j}ᵀ x_{l-1}| <= beta, against m^(3/2) beta.

    Fits the smallest C' with count <= C' * m_l^(3/2) * beta over all
    layers, inputs, and betas, plus the log-log slope of the mean count in
    beta (theory: linear, slope 1).
    """
    xs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    bt = forward_batch(params, xs)
    L = params.depth
    rows = []
    fitted = 0.0
    mean_counts = []
    for beta in beta_grid:
        counts_here = []
        for l in range(1, L + 2):
            pre = np.abs(bt.activations[l - 1] @ params.weights[l - 1])
            counts = np.count_nonzero(pre <= beta, axis=1)
            m_l = params.widths[l - 1]
            basis = m_l ** 1.5 * beta
            cmax = int(np.max(counts))
            fitted = max(fitted, cmax / basis) if basis > 0 else fitted
            counts_here.extend(counts.tolist())
            rows.append([beta, l, cmax, float(np.mean(counts)), basis])
        mean_counts.append(float(np.mean(counts_here)))

    betas = np.asarray(beta_grid, dtype=np.float64)
    mc = np.asarray(mean_counts)
    mask = mc > 0
    slope = float("nan")
    if np.count_nonzero(mask) >= 2:
        slope = float(np.polyfit(np.log(betas[mask]), np.log(mc[mask]), 1)[0])
    return ProbeReport(
        name="threshold_indices",
        measured={"fitted_cprime": fitted, "beta_slope": slope},
        bound_expr=fitted,
        constant_fit=fitted,
        trials=len(beta_grid) * xs.shape[0],
        verdict=_verdict(all(r[2] <= fitted * r[4] + 1e-9 for r in rows)),
        config={"beta_grid": list(beta_grid), "m": params.m, "L": L},
        detail_columns=["beta", "layer", "count_max", "count_mean", "basis"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# output magnitude on sparse directions inside the ball
# ---------------------------------------------------------------------------

def _sparse_unit(rng: RngState, dim: int, s: int) -> np.ndarray:
    idx = rng.permutation(dim)[:s]
    vals = rng.standard_normal(s)
    a = np.zeros(dim)
    a[idx] = vals / np.linalg.norm(vals)
    return a


def probe_sparse_output(params: NetworkParams, rng: RngState, tau: float,
                        sparsity: int, trials: int = 20) -> ProbeReport:
    """max_l |vᵀ H_l^{L+1} a| for s-sparse unit a, against tau sqrt(m) + sqrt(s log m).

    The interlayer operators use the perturbed network's own patterns at a
    fresh sphere input per trial.
    """
    m = params.m
    L = params.depth
    if not 1 <= sparsity <= m:
        raise ValueError(f"sparsity must be in [1, {m}], got {sparsity}")
    ball = PerturbationBall(params, tau, rng.substream("ball"))
    basis = tau * math.sqrt(m) + math.sqrt(sparsity * math.log(m))
    rows = []
    fitted = 0.0
    for t in range(trials):
        x = rng.standard_normal(params.d)
        x /= np.linalg.norm(x)
        wt = ball.draw()
        trace = forward(wt, x)
        a = _sparse_unit(rng, m, sparsity)
        worst = 0.0
        for l in range(2, L + 2):
            val = abs(float(params.v @ interlayer_apply(
                InterlayerOp(trace, l, L + 1), a)))
            worst = max(worst, val)
        fitted = max(fitted, worst / basis)
        rows.append([t, worst, basis])
    return ProbeReport(
        name="sparse_output",
        measured={"fitted_c1": fitted, "basis": basis},
        bound_expr=fitted * basis,
        constant_fit=fitted,
        trials=trials,
        verdict=_verdict(all(r[1] <= fitted * basis + 1e-9 for r in rows)),
        config={"tau": tau, "sparsity": sparsity, "m": m, "L": L},
        detail_columns=["trial", "max_output", "basis"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# loss at initialization
# ---------------------------------------------------------------------------

def probe_loss_at_init(params: NetworkParams, dataset) -> ProbeReport:
    """Loss and output magnitude at initialization against sqrt(log n)."""
    loss, surrogate, _ = lossgrad.batch_loss_grad(params, dataset)
    bt = forward_batch(params, dataset.xs)
    max_out = float(np.max(np.abs(bt.outputs)))
    n = dataset.n
    basis = math.sqrt(math.log(max(n, 2)))
    fitted = max(loss.total, max_out) / basis
    return ProbeReport(
        name="loss_at_init",
        measured={"loss": loss.total, "surrogate": surrogate.empirical,
                  "max_abs_output": max_out},
        bound_expr=fitted * basis,
        constant_fit=fitted,
        trials=n,
        verdict=_verdict(loss.total <= fitted * basis + 1e-9),
        config={"n": n, "m": params.m, "L": params.depth},
        detail_columns=["quantity", "value"],
        details=[["loss", loss.total], ["surrogate", surrogate.empirical],
                 ["max_abs_output", max_out]],
    )


# ---------------------------------------------------------------------------
# empirical Rademacher complexity of the tau-ball (ascent lower estimate)
# ---------------------------------------------------------------------------

def _project_to_ball(params: NetworkParams, center: NetworkParams,
                     tau: float) -> NetworkParams:
    new = []
    for w, w0 in zip(params.weights, center.weights):
        delta = w - w0
        norm = numkit.frobenius_norm(delta)
        if norm > tau:
            delta = delta * (tau / norm) if tau > 0 else np.zeros_like(delta)
        new.append(w0 + delta)
    return params.with_weights(new)


def rademacher_estimate(params: NetworkParams, tau: float, dataset,
                        rng: RngState, xi_draws: int = 16,
                        ascent_steps: int = 50, step_size=None) -> ProbeReport:
    """Lower estimate of the tau-ball's empirical Rademacher complexity.

    For each sign vector xi, projected gradient ascent maximizes
    (1/n) sum_i xi_i f_W(x_i) over the per-layer Frobenius ball; each draw
    is centered by the initial network's own correlation with xi, so the
    tau = 0 class yields exactly zero.  The report also carries the largest
    first-order linearization gap at the ascent endpoints, and the fitted
    constant against  tau^(4/3) sqrt(m log m) + tau sqrt(m) / sqrt(n).
    """
    xs, _ = lossgrad._as_xy(dataset)
    n = xs.shape[0]
    m = params.m
    if step_size is None:
        step_size = tau / 10.0
    bt0 = forward_batch(params, xs)
    values = []
    rows = []
    gap_max = 0.0
    dropped = 0
    for t in range(xi_draws):
        xi = rng.substream(f"xi/{t}").signs(n)
        center_obj = float(xi @ bt0.outputs) / n
        current = params
        best = 0.0  # value of the center itself, post-centering
        diverged = False
        for _ in range(ascent_steps):
            bt = forward_batch(current, xs)
            obj = float(xi @ bt.outputs) / n - center_obj
            if not np.isfinite(obj):
                diverged = True
                break
            best = max(best, obj)
            grads = lossgrad.batch_output_grad(current, bt, xi / n)
            stepped = current.with_weights(
                w + step_size * g for w, g in zip(current.weights, grads.layers))
            current = _project_to_ball(stepped, params, tau)
        if diverged:
            dropped += 1
            continue
        bt_end = forward_batch(current, xs)
        obj_end = float(xi @ bt_end.outputs) / n - center_obj
        if np.isfinite(obj_end):
            best = max(best, obj_end)
        # first-order linearization gap at the endpoint
        deltas = [w - w0 for w, w0 in zip(current.weights, params.weights)]
        lin = _linearization_terms(params, bt0, deltas)
        gap = float(np.max(np.abs(bt_end.outputs - (bt0.outputs + lin))))
        gap_max = max(gap_max, gap)
        values.append(best)
        rows.append([t, best, gap])

    estimate = numkit.pairwise_sum(values) / len(values) if values else 0.0
    basis = tau ** (4.0 / 3.0) * math.sqrt(m * math.log(m)) + tau * math.sqrt(m / n)
    fitted = estimate / basis if basis > 0 else 0.0
    return ProbeReport(
        name="rademacher",
        measured={"estimate": estimate, "linearization_gap": gap_max,
                  "dropped": dropped, "basis": basis},
        bound_expr=basis * fitted if basis > 0 else 0.0,
        constant_fit=fitted,
        trials=xi_draws,
        verdict=_verdict(dropped == 0),
        config={"tau": tau, "xi_draws": xi_draws, "ascent_steps": ascent_steps,
                "step_size": step_size, "n": n, "m": m},
        detail_columns=["xi_draw", "ascent_value", "linearization_gap"],
        details=rows,
    )


# ---------------------------------------------------------------------------
# surrogate-to-classification step (Markov)
# ---------------------------------------------------------------------------

def probe_surrogate_markov(params: NetworkParams, heldout,
                           band: float = 0.03) -> ProbeReport:
    """Held-out 0-1 error against twice the held-out surrogate loss."""
    xs, ys = lossgrad._as_xy(heldout)
    bt = forward_batch(params, xs)
    z = ys * bt.outputs
    err = float(np.mean(z <= 0.0))
    surrogate = float(-numkit.pairwise_sum(lossgrad.xent_deriv(z)) / xs.shape[0])
    bound = 2.0 * surrogate + band
    return ProbeReport(
        name="surrogate_markov",
        measured={"test_error": err, "test_surrogate": surrogate},
        bound_expr=bound,
        constant_fit=err / surrogate if surrogate > 0 else 0.0,
        trials=int(xs.shape[0]),
        verdict=_verdict(err <= bound),
        config={"band": band, "n_heldout": int(xs.shape[0])},
        detail_columns=["quantity", "value"],
        details=[["test_error", err], ["test_surrogate", surrogate],
                 ["bound", bound]],
    )


# ---------------------------------------------------------------------------
# depth sweep: residual versus plain under one tuning protocol
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["arch", "L", "eta", "retries", "steps_to_threshold",
                 "final_train_err", "final_surrogate", "h2l_init", "h2l_final"]


def sweep_cell(rng: RngState, arch: str, L: int, ds, d, m, m_last,
               theta_per_L=0.1, eta_scale=40.0, steps_budget=2000,
               surrogate_target=0.3, max_retries=2, probe_inputs=None) -> dict:
    """Train one (arch, depth) cell under the shared tuning protocol.

    Every cell starts from eta = eta_scale / m and halves eta on divergence,
    up to ``max_retries`` restarts.  ``steps_to_threshold`` is -1 when the
    cell never reaches the surrogate target within the budget.
    """
    theta = theta_per_L / L
    init_rng = rng.substream(f"init/{arch}/{L}")
    params = init_gaussian(init_rng, d, L, m, m_last, theta, arch)
    eta = eta_scale / m
    retries = 0
    result = None
    while True:
        cfg = trainer.TrainConfig(eta=eta, steps=steps_budget,
                                  stop_surrogate=surrogate_target,
                                  record_every=max(1, steps_budget // 200))
        try:
            result = trainer.train(params, ds, cfg)
            break
        except trainer.DivergenceError:
            retries += 1
            if retries > max_retries:
                break
            eta *= 0.5
    row = {"arch": arch, "L": L, "eta": eta, "retries": retries,
           "steps_to_threshold": -1, "final_train_err": 1.0,
           "final_surrogate": float("nan"),
           "h2l_init": float("nan"), "h2l_final": float("nan")}
    if result is None:
        return row
    if result.stopped_early:
        row["steps_to_threshold"] = result.steps_run
    last = result.records[-1]
    row["final_train_err"] = last.train_err
    row["final_surrogate"] = last.surrogate
    if L >= 2 and probe_inputs is not None:
        ref = init_gaussian(rng.substream(f"init/{arch}/{L}"),
                            d, L, m, m_last, theta, arch)
        row["h2l_init"] = max(interlayer_norm(InterlayerOp(forward(ref, x), 2, L))
                              for x in probe_inputs)
        row["h2l_final"] = max(interlayer_norm(
            InterlayerOp(forward(result.params, x), 2, L)) for x in probe_inputs)
    return row


def depth_sweep(rng: RngState, L_grid=(4, 16, 64), arches=("residual", "plain"),
                d=10, m=128, m_last=128, n=200, gamma=0.1, M=64,
                theta_per_L=0.1, eta_scale=2.0, steps_budget=2000,
                surrogate_target=0.3, max_retries=2,
                ratio_limit=2.0) -> ProbeReport:
    """Steps-to-surrogate-threshold across depths for both architectures.

    All cells share one dataset and one tuning protocol (see sweep_cell).
    The verdict holds iff the residual cells' steps-to-threshold vary by at
    most ``ratio_limit`` across the depth grid; the plain baseline is
    reported alongside for comparison.
    """
    from .data import make_teacher  # local import to avoid cycle at module load

    teacher = make_teacher(rng.substream("teacher"), d, M, gamma)
    ds = sample_dataset(teacher, rng.substream("data"), n)
    probe_inputs = ds.xs[:3]
    rows = []
    steps_by_cell = {}
    for arch in arches:
        for L in L_grid:
            row = sweep_cell(rng, arch, L, ds, d, m, m_last, theta_per_L,
                             eta_scale, steps_budget, surrogate_target,
                             max_retries, probe_inputs)
            steps = row["steps_to_threshold"]
            steps_by_cell[(arch, L)] = steps if steps >= 0 else None
            rows.append([row[c] for c in SWEEP_COLUMNS])

    residual_steps = [steps_by_cell[("residual", L)] for L in L_grid
                      if ("residual", L) in steps_by_cell]
    ok = all(s is not None for s in residual_steps)
    ratio = float("nan")
    if ok and min(residual_steps) > 0:
        ratio = max(residual_steps) / min(residual_steps)
        ok = ratio <= ratio_limit
    elif ok:
        ratio = 1.0  # all cells stopped at or before the first step
    plain_vs_res = float("nan")
    if "plain" in arches:
        L_max = max(L_grid)
        p = steps_by_cell.get(("plain", L_max))
        r = steps_by_cell.get(("residual", L_max))
        if r:
            plain_vs_res = (p / r) if p is not None else float("inf")
    return ProbeReport(
        name="depth_sweep",
        measured={"residual_step_ratio": ratio,
                  "plain_over_residual_at_max_depth": plain_vs_res},
        bound_expr=ratio_limit,
        constant_fit=ratio,
        trials=len(rows),
        verdict=_verdict(ok),
        config={"L_grid": list(L_grid), "arches": list(arches), "m": m,
                "n": n, "gamma": gamma, "eta_scale": eta_scale,
                "steps_budget": steps_budget, "surrogate_target": surrogate_target,
                "theta_per_L": theta_per_L},
        detail_columns=list(SWEEP_COLUMNS),
        details=rows,
    )
