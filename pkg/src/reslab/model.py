"""Scaled-skip residual ReLU network and a plain (no-skip) baseline.

Architecture, for input x on the unit sphere:

    x_1     = relu(W_1ᵀ x)
    x_l     = x_{l-1} + theta * relu(W_lᵀ x_{l-1})     l = 2..L   (residual)
    x_{L+1} = relu(W_{L+1}ᵀ x_L)
    f(x)    = vᵀ x_{L+1}

with v a fixed ±1 vector (first half +1, second half −1).  The plain
baseline replaces every layer by x_l = relu(W_lᵀ x_{l-1}).

Forward evaluation records per-layer activations and the binary activation
patterns sigma_l(x) (bit j set iff the pre-activation of unit j is strictly
positive).  Frozen-pattern interlayer operators propagate a vector from
layer l to layer l' through the linearization the patterns define.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from . import numkit
from .numkit import RngState, Vector

ARCH_RESIDUAL = "residual"
ARCH_PLAIN = "plain"

NORM_TOL = 1e-9  # allowed deviation of input norms from 1


class ConfigError(ValueError):
    """Invalid architecture hyperparameters."""


class ShapeError(ValueError):
    """Operand dimensions inconsistent with the network."""


def output_vector(m_last: int) -> Vector:
    """The fixed top vector: first half +1, second half −1."""
    if m_last <= 0 or m_last % 2 != 0:
        raise ConfigError(f"output width must be positive and even, got {m_last}")
    v = np.ones(m_last)
    v[m_last // 2:] = -1.0
    return v


@dataclass(frozen=True)
class NetworkParams:
    """All layer weights plus architectural constants.

    ``weights[i]`` is W_{i+1} with shape (m_i, m_{i+1}) where m_0 = d.
    Hidden widths m_1..m_L must be equal; the output width m_{L+1} is even.
    """

    weights: tuple
    theta: float
    v: Vector
    arch: str = ARCH_RESIDUAL

    def __post_init__(self):
        if self.arch not in (ARCH_RESIDUAL, ARCH_PLAIN):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if len(self.weights) < 2:
            raise ConfigError("need at least W_1 and W_{L+1}")
        widths = [w.shape[1] for w in self.weights]
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != widths[i - 1]:
                raise ConfigError(
                    f"layer {i + 1} expects {widths[i - 1]} inputs, "
                    f"weight has {self.weights[i].shape[0]} rows")
        hidden = widths[:-1]
        if any(m != hidden[0] for m in hidden):
            raise ConfigError(f"hidden widths must all match, got {hidden}")
        if widths[-1] % 2 != 0:
            raise ConfigError(f"output width must be even, got {widths[-1]}")
        if self.v.shape != (widths[-1],):
            raise ConfigError("output vector length does not match last width")
        if self.theta < 0:
            raise ConfigError(f"theta must be nonnegative, got {self.theta}")
        if self.arch == ARCH_RESIDUAL and self.theta * self.depth > 1.0 + 1e-12:
            raise ConfigError(
                f"residual scaling too large: theta*L = {self.theta * self.depth:.4g} > 1")

    @property
    def depth(self) -> int:
        """L: number of layers before the final fully connected one."""
        return len(self.weights) - 1

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @cached_property
    def widths(self) -> tuple:
        """(m_1, ..., m_{L+1})."""
        return tuple(w.shape[1] for w in self.weights)

    @property
    def m(self) -> int:
        """Network width: min of the last two layer widths."""
        return min(self.widths[-2], self.widths[-1])

    @property
    def m_last(self) -> int:
        return self.widths[-1]

    def dim_at(self, l: int) -> int:
        """Activation dimension at layer l (layer 0 is the input)."""
        return self.d if l == 0 else self.widths[l - 1]

    def layer_scale(self, l: int) -> float:
        """Gradient scale factor for layer l: theta on 2..L, 1 at the ends."""
        if self.arch == ARCH_PLAIN:
            return 1.0
        return self.theta if 2 <= l <= self.depth else 1.0

    def with_weights(self, weights) -> "NetworkParams":
        return replace(self, weights=tuple(weights))


def init_gaussian(rng: RngState, d: int, L: int, m: int, m_last: int,
                  theta: float, arch: str = ARCH_RESIDUAL) -> NetworkParams:
    """Gaussian-initialized network: W_l entries ~ N(0, 2/m_l).

    Requires m_last even and within [m/4, 4m] so the two final widths are of
    the same order; residual nets additionally require theta * L <= 1.
    """
    if L < 1:
        raise ConfigError(f"depth must be >= 1, got {L}")
    if m_last % 2 != 0 or m_last <= 0:
        raise ConfigError(f"m_last must be positive and even, got {m_last}")
    if not (m / 4 <= m_last <= 4 * m):
        raise ConfigError(f"m_last={m_last} not within [m/4, 4m] of m={m}")
    if theta < 0 or (arch == ARCH_RESIDUAL and theta * L > 1.0 + 1e-12):
        raise ConfigError(f"invalid residual scaling theta={theta} at L={L}")
    dims = [d] + [m] * L + [m_last]
    weights = []
    for l in range(1, L + 2):
        weights.append(numkit.gaussian_matrix(rng, dims[l - 1], dims[l], 2.0 / dims[l]))
    return NetworkParams(tuple(weights), float(theta), output_vector(m_last), arch)


def _check_unit_rows(x: np.ndarray) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"inputs must lie on the unit sphere (|‖x‖−1| ≤ {NORM_TOL}); "
                         f"worst deviation {worst:.3g}")


@dataclass(frozen=True)
class ActivationTrace:
    """Forward pass record for a single input.

    ``activations[l]`` is x_l (so activations[0] is the input) and
    ``pattern(l)`` is the boolean activation pattern sigma_l for l = 1..L+1.
    """

    params: NetworkParams
    activations: tuple
    patterns: tuple  # patterns[l-1] is sigma_l
    output: float

    @property
    def x(self) -> Vector:
        return self.activations[0]

    def activation(self, l: int) -> Vector:
        return self.activations[l]

    def pattern(self, l: int) -> np.ndarray:
        if not 1 <= l <= self.params.depth + 1:
            raise ShapeError(f"pattern layer {l} out of range")
        return self.patterns[l - 1]


@dataclass(frozen=True)
class BatchTrace:
    """Vectorized forward record; row i of every array belongs to sample i."""

    params: NetworkParams
    activations: tuple  # activations[l] has shape (n, m_l)
    patterns: tuple     # patterns[l-1] has shape (n, m_l), boolean
    outputs: np.ndarray

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    def pattern(self, l: int) -> np.ndarray:
        return self.patterns[l - 1]


def forward_batch(params: NetworkParams, xs: np.ndarray) -> BatchTrace:
    """Forward pass over a batch of unit-norm rows."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != params.d:
        raise ShapeError(f"inputs have dim {xs.shape[1]}, network expects {params.d}")
    _check_unit_rows(xs)
    L = params.depth
    acts = [xs]
    pats = []
    h = xs
    for l in range(1, L + 2):
        pre = h @ params.weights[l - 1]
        pat = pre > 0.0  # strict: ties at exactly zero count as inactive
        inc = np.where(pat, pre, 0.0)
        if params.arch == ARCH_RESIDUAL and 2 <= l <= L:
            h = h + params.theta * inc
        else:
            h = inc
        acts.append(h)
        pats.append(pat)
    outputs = acts[-1] @ params.v
    return BatchTrace(params, tuple(acts), tuple(pats), outputs)


def forward(params: NetworkParams, x: Vector) -> ActivationTrace:
    """Forward pass for one unit-norm input, recording activations and patterns."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward expects a 1-d input vector")
    bt = forward_batch(params, x[None, :])
    acts = tuple(a[0] for a in bt.activations)
    pats = tuple(p[0] for p in bt.patterns)
    return ActivationTrace(params, acts, pats, float(bt.outputs[0]))


@dataclass(frozen=True)
class InterlayerOp:
    """Frozen-pattern operator H_l^{l'} taken from a recorded trace.

    For 2 <= l <= l' <= L this is the product of (I + theta*sigma_r W_rᵀ)
    over r = l..l'.  Boundary conventions: the r = 1 factor is sigma_1 W_1ᵀ
    and the r = L+1 factor is sigma_{L+1} W_{L+1}ᵀ.  An empty range (l > l')
    is the identity.  Patterns come from the trace and are never recomputed,
    so the operator is linear even though the network is not.
    """

    trace: ActivationTrace
    l: int
    lp: int

    def __post_init__(self):
        L = self.trace.params.depth
        if not (1 <= self.l <= L + 2) or not (0 <= self.lp <= L + 1):
            raise ShapeError(f"interlayer range ({self.l}, {self.lp}) out of bounds for L={L}")

    @property
    def params(self) -> NetworkParams:
        return self.trace.params

    @property
    def in_dim(self) -> int:
        return self.params.dim_at(self.l - 1)

    @property
    def out_dim(self) -> int:
        return self.params.dim_at(self.lp) if self.lp >= self.l else self.in_dim


def _factor_apply(params, pattern, w, r, a):
    masked = pattern * (w.T @ a)
    if params.arch == ARCH_RESIDUAL and 2 <= r <= params.depth:
        return a + params.theta * masked
    return masked


def _factor_apply_t(params, pattern, w, r, a):
    masked = w @ (pattern * a)
    if params.arch == ARCH_RESIDUAL and 2 <= r <= params.depth:
        return a + params.theta * masked
    return masked


def interlayer_apply(op: InterlayerOp, a: Vector) -> Vector:
    """H_l^{l'} · a with the trace's frozen patterns."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (op.in_dim,):
        raise ShapeError(f"operand has shape {a.shape}, operator expects ({op.in_dim},)")
    params = op.params
    out = a
    for r in range(op.l, op.lp + 1):
        out = _factor_apply(params, op.trace.pattern(r), params.weights[r - 1], r, out)
    return out


def interlayer_apply_t(op: InterlayerOp, a: Vector) -> Vector:
    """Transpose application (H_l^{l'})ᵀ · a; needed for norm estimation."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (op.out_dim,):
        raise ShapeError(f"operand has shape {a.shape}, operator expects ({op.out_dim},)")
    params = op.params
    out = a
    for r in range(op.lp, op.l - 1, -1):
        out = _factor_apply_t(params, op.trace.pattern(r), params.weights[r - 1], r, out)
    return out


def interlayer_norm(op: InterlayerOp, iters: int = 500, tol: float = 1e-10,
                    restarts: int = 0) -> float:
    """Spectral norm of H_l^{l'}, matrix-free (the product is never formed).

    Frozen patterns randomize the operator enough that the deterministic
    all-ones start is safe; restarts default off since each one replays the
    whole layer chain per iteration.
    """
    est, _ = numkit.operator_norm(
        lambda vec: interlayer_apply(op, vec),
        lambda vec: interlayer_apply_t(op, vec),
        op.in_dim, iters=iters, tol=tol, restarts=restarts)
    return est


def output_via_interlayer(trace: ActivationTrace, l: int) -> float:
    """vᵀ H_{l+1}^{L+1} x_l; equals the recorded output for every split l."""
    params = trace.params
    op = InterlayerOp(trace, l + 1, params.depth + 1)
    return float(params.v @ interlayer_apply(op, trace.activation(l)))


# --- checkpoint file format -------------------------------------------------
#
# One JSON header line (UTF-8, ending in '\n') followed by the raw weight
# payload: for each layer l = 1..L+1 in order, the entries of W_l as
# little-endian float64 in row-major order.  The header carries everything
# needed to reconstruct shapes and the fixed output vector:
#
#   {"kind": "reslab-checkpoint", "version": 1, "d": ..., "L": ...,
#    "widths": [m_1, ..., m_{L+1}], "theta": ..., "arch": "residual",
#    "seed": [seed, stream] or null}

CHECKPOINT_KIND = "reslab-checkpoint"


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(params: NetworkParams, path, seed=None) -> None:
    header = {
        "kind": CHECKPOINT_KIND,
        "version": 1,
        "d": params.d,
        "L": params.depth,
        "widths": list(params.widths),
        "theta": params.theta,
        "arch": params.arch,
        "seed": list(seed) if seed is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for w in params.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line:
            raise CheckpointFormatError(f"{path}: empty file")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: bad header: {exc}") from exc
        if header.get("kind") != CHECKPOINT_KIND:
            raise CheckpointFormatError(f"{path}: not a checkpoint file")
        d = int(header["d"])
        widths = [int(m) for m in header["widths"]]
        dims = [d] + widths
        weights = []
        offset = len(line)
        for l in range(1, len(dims)):
            count = dims[l - 1] * dims[l]
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointFormatError(
                    f"{path}: truncated payload for layer {l} at byte {offset}")
            offset += len(buf)
            weights.append(np.frombuffer(buf, dtype="<f8").reshape(dims[l - 1], dims[l]).copy())
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after byte {offset}")
    return NetworkParams(tuple(weights), float(header["theta"]),
                         output_vector(widths[-1]), str(header["arch"]))
