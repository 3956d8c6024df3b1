"""Randomized spectral statistics of a curvature operator.

Everything here touches the operator only through matrix-vector products:

* per-parameter trace and squared Frobenius norm via Gaussian probes with
  entry variance 1/N, so the probe estimates Tr(H)/N directly;
* a random-projection sketch Phi H Phi^T whose shift-corrected top
  eigenvalues approximate the leading eigenvalues of H;
* step size / batch size / iteration count recommendations for the
  stochastic iHVP solver, derived from those statistics;
* an empirical check of the batch-noise bound E[Hb^2] - H^2 <= (C/|B|) Tr(H) H
  that underlies the batch size rule.

Sketch rows are regenerated on demand from ``(seed, layer, row)`` substreams,
so the projection matrix is never materialized and any row can be replayed
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MeanSe, SeededRng, derive_seed, gaussian_vector, sym_eig
from .gnh import GnhOperator, gnh_matrix_exact
from .models import Dataset, ModelSpec, ParamVector


@dataclass(frozen=True)
class SketchConfig:
    """Random-projection setup: block dimension, seed, and layout.

    ``summed`` projects the whole parameter vector to dimension d.
    ``concatenated`` keeps one d-dimensional projection per layer and stacks
    them, giving total dimension L*d from the same per-layer row streams.
    """

    d: int
    seed: int
    layout: str = "summed"

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("sketch dimension must be >= 2")
        if self.layout not in ("summed", "concatenated"):
            raise ValueError(f"unknown sketch layout {self.layout!r}")


@dataclass(frozen=True)
class SpectralStats:
    """Summary used to pick solver hyperparameters."""

    n_params: int
    trace_per_param: MeanSe
    frobenius_sq_per_param: MeanSe | None
    lambda_max: float


@dataclass(frozen=True)
class HyperParams:
    """Recommended stochastic-solver settings.

    ``t_steps`` is None when damping is zero: the contraction argument gives
    no finite step count in that case.
    """

    eta: float
    batch_size_min: int
    t_steps: int | None
    lambda_damp: float
    c_const: float
    t_multiplier: float


def estimate_trace(op, n_probes: int, rng: SeededRng) -> MeanSe:
    """Per-parameter trace Tr(H)/N from Gaussian probes g ~ N(0, I/N).

    Each probe draws a fresh stochastic operator evaluation, so with batched
    operators the estimate covers both probe and batch randomness.
    """
    if n_probes < 2:
        raise ValueError("need at least two probes")
    n = op.n_params
    samples = np.empty(n_probes)
    for i in range(n_probes):
        g = gaussian_vector(rng, n, 1.0 / n)
        samples[i] = float(g @ op.matvec(g))
    return MeanSe.from_samples(samples)


def estimate_frobenius(op, n_probes: int, rng: SeededRng) -> MeanSe:
    """Per-parameter squared Frobenius norm Tr(H^2)/N.

    Uses (Hb g)^T (Hb' g) with two independent operator draws per probe so
    the batch noise cancels in expectation.
    """
    if n_probes < 2:
        raise ValueError("need at least two probes")
    n = op.n_params
    samples = np.empty(n_probes)
    for i in range(n_probes):
        g = gaussian_vector(rng, n, 1.0 / n)
        samples[i] = float(op.matvec(g) @ op.matvec(g))
    return MeanSe.from_samples(samples)


_VAR_KEY_LAYER = 1  # substream namespace: (layer key, row key) per sketch row


def _probe_row(cfg: SketchConfig, layer: int, row: int, length: int) -> np.ndarray:
    """Row ``row`` of the layer's projection block, entries N(0, 1/d)."""
    seed = derive_seed(cfg.seed, _VAR_KEY_LAYER + layer, row)
    return SeededRng(seed).normal(length) * (1.0 / math.sqrt(cfg.d))


def _layouts(op, cfg: SketchConfig):
    segments = tuple(op.segments)
    if cfg.layout == "summed":
        total = cfg.d
    else:
        total = cfg.d * len(segments)
    return segments, total


def _probe_vector(op, cfg: SketchConfig, index: int) -> np.ndarray:
    """Probe ``index`` as a full-length parameter-space vector."""
    segments, total = _layouts(op, cfg)
    if not 0 <= index < total:
        raise ValueError("probe index out of range")
    v = np.zeros(op.n_params)
    if cfg.layout == "summed":
        for layer, (name, offset, length) in enumerate(segments):
            v[offset : offset + length] = _probe_row(cfg, layer, index, length)
    else:
        layer, row = divmod(index, cfg.d)
        name, offset, length = segments[layer]
        v[offset : offset + length] = _probe_row(cfg, layer, row, length)
    return v


def embed_vector(op_or_segments, cfg: SketchConfig, v: np.ndarray) -> np.ndarray:
    """Project a parameter-space vector with the sketch's row streams.

    Output coordinate i equals probe_i . v, so embeddings and sketches share
    one projection. Accepts either an operator or an explicit segment tuple.
    """
    segments = getattr(op_or_segments, "segments", op_or_segments)
    v = np.asarray(v, dtype=np.float64).ravel()
    n = segments[-1][1] + segments[-1][2]
    if v.size != n:
        raise ValueError("vector does not match the segmentation")
    if cfg.layout == "summed":
        out = np.zeros(cfg.d)
        for layer, (name, offset, length) in enumerate(segments):
            block = np.vstack([_probe_row(cfg, layer, i, length) for i in range(cfg.d)])
            out += block @ v[offset : offset + length]
        return out
    out = np.zeros(cfg.d * len(segments))
    for layer, (name, offset, length) in enumerate(segments):
        block = np.vstack([_probe_row(cfg, layer, i, length) for i in range(cfg.d)])
        out[layer * cfg.d : (layer + 1) * cfg.d] = block @ v[offset : offset + length]
    return out


def sketch_operator(op, cfg: SketchConfig, n_hvp_avg: int = 1, row_block: int = 64) -> np.ndarray:
    """Random sketch Phi H Phi^T computed column-by-column.

    Each probe column is pushed through the operator (optionally averaging
    ``n_hvp_avg`` stochastic evaluations), then projected back with the same
    row streams in blocks, so Phi itself is never held in memory.
    """
    if n_hvp_avg < 1:
        raise ValueError("n_hvp_avg must be >= 1")
    segments, total = _layouts(op, cfg)
    n = op.n_params
    y = np.empty((n, total))
    for j in range(total):
        probe = _probe_vector(op, cfg, j)
        acc = op.matvec(probe)
        for _ in range(n_hvp_avg - 1):
            acc = acc + op.matvec(probe)
        y[:, j] = acc / n_hvp_avg
    sketch = np.empty((total, total))
    for start in range(0, total, row_block):
        stop = min(start + row_block, total)
        rows = np.vstack([_probe_vector(op, cfg, i) for i in range(start, stop)])
        sketch[start:stop, :] = rows @ y
    return (sketch + sketch.T) / 2.0


def top_eigenvalues_from_sketch(sketch: np.ndarray, k: int = 1) -> np.ndarray:
    """Shift-corrected leading eigenvalues of a sketch.

    The random projection inflates every eigenvalue by roughly Tr(H)/d; the
    mean sketch eigenvalue tracks that inflation, so subtracting
    trace(sketch)/d recenters the bulk at zero and leaves outliers near the
    true leading eigenvalues.
    """
    sketch = np.asarray(sketch, dtype=np.float64)
    d = sketch.shape[0]
    if not 1 <= k <= d:
        raise ValueError("k must be in [1, sketch dimension]")
    w, _ = sym_eig(sketch)
    shift = float(np.trace(sketch)) / d
    return w[:k] - shift


def recommend_hyperparams(
    stats: SpectralStats,
    lambda_damp: float,
    c_const: float = 2.0,
    t_multiplier: float = 2.0,
) -> HyperParams:
    """Solver settings from spectral statistics.

    Step size saturates the contraction bound: eta = 1/(lambda_max + lambda).
    The batch size keeps the stochastic curvature noise from breaking
    second-moment convergence: |B| >= C * Tr(H) / lambda_max.  The step count
    runs a fixed multiple of the contraction time constant 1/(lambda * eta).
    """
    if stats.lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    if stats.trace_per_param.mean <= 0:
        raise ValueError("trace estimate must be positive")
    if lambda_damp < 0:
        raise ValueError("damping must be non-negative")
    if c_const <= 0 or t_multiplier <= 0:
        raise ValueError("c_const and t_multiplier must be positive")
    eta = 1.0 / (stats.lambda_max + lambda_damp)
    trace_total = stats.trace_per_param.mean * stats.n_params
    batch = max(1, math.ceil(c_const * trace_total / stats.lambda_max))
    if lambda_damp > 0:
        t_steps = max(1, math.ceil(t_multiplier / (lambda_damp * eta)))
    else:
        t_steps = None
    return HyperParams(
        eta=eta,
        batch_size_min=batch,
        t_steps=t_steps,
        lambda_damp=lambda_damp,
        c_const=c_const,
        t_multiplier=t_multiplier,
    )


def condition_c1_lhs(op_batch, op_full, n_probes: int, rng: SeededRng) -> MeanSe:
    """Probe estimate of Tr(E[Hb^2] - H^2)/N.

    Each probe compares ||Hb g||^2 (fresh stochastic draw) against ||H g||^2
    (reference operator) for the same Gaussian probe g ~ N(0, I/N).
    """
    if n_probes < 2:
        raise ValueError("need at least two probes")
    n = op_batch.n_params
    if op_full.n_params != n:
        raise ValueError("operators act on different parameter spaces")
    samples = np.empty(n_probes)
    for i in range(n_probes):
        g = gaussian_vector(rng, n, 1.0 / n)
        hb = op_batch.matvec(g)
        hf = op_full.matvec(g)
        samples[i] = float(hb @ hb) - float(hf @ hf)
    return MeanSe.from_samples(samples)


@dataclass(frozen=True)
class ConditionC1Row:
    """One batch size's noise level against the C=1 reference line."""

    batch_size: int
    lhs_trace: MeanSe
    rhs_trace: float


def check_condition_c1(
    spec: ModelSpec,
    theta: ParamVector,
    dataset: Dataset,
    batch_sizes: list[int],
    n_probes: int,
    rng: SeededRng,
) -> list[ConditionC1Row]:
    """Batch-noise profile of a model's curvature operator.

    For each batch size the probe estimate of Tr(E[Hb^2] - H^2)/N is paired
    with the reference value Tr(H)^2 / (N |B|) at C = 1 (callers compare
    against C times this).  A batch size covering the whole dataset switches
    to the deterministic full-batch operator, where the noise term is
    identically zero.
    """
    op_full = GnhOperator(spec, theta, dataset)
    H = gnh_matrix_exact(spec, theta, dataset)
    trace_h = float(np.trace(H))
    n = spec.n_params
    rows = []
    for b in batch_sizes:
        if b < 1:
            raise ValueError("batch sizes must be >= 1")
        if b >= len(dataset):
            op_b = op_full
        else:
            op_b = GnhOperator(
                spec, theta, dataset, batch_size=b, rng=rng.substream(b)
            )
        lhs = condition_c1_lhs(op_b, op_full, n_probes, rng.substream(b + 1_000_003))
        rhs = trace_h * trace_h / (n * b)
        rows.append(ConditionC1Row(batch_size=b, lhs_trace=lhs, rhs_trace=rhs))
    return rows
