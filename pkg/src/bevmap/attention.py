"""Deformable attention kernels: sinusoidal encodings, vanilla MSDA, and the
decoupled two-stage variants.

Vanilla multi-scale deformable attention samples N offset points on each of
M pyramid levels per head (M*N reads per query).  The decoupled variants
split this into a multi-scale stage (one point per level) and a multi-sample
stage (N points on the largest level), for M+N reads:

    scale_then_sample:  q1 = lin1(msda_ms(q));  out = q1 + lin2(msda_sp(q1))
    sample_then_scale:  q1 = lin1(msda_sp(q));  out = q1 + lin2(msda_ms(q1))
    parallel:           out = lin1(msda_ms(q)) + lin2(msda_sp(q))

Offsets are generated in units of cells of each level and converted to
normalized coordinates per level; attention weights are softmax-normalized
jointly over a stage's (level, point) group per head and query.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensorad as ta
from .rngutil import substream
from .synth import FeaturePyramid
from .tensorad import ContractViolation, Tensor

VARIANT_VANILLA = "vanilla"
VARIANT_SCALE_THEN_SAMPLE = "dmd_scale_then_sample"
VARIANT_SAMPLE_THEN_SCALE = "dmd_sample_then_scale"
VARIANT_PARALLEL = "dmd_parallel"
DMD_VARIANTS = (VARIANT_SCALE_THEN_SAMPLE, VARIANT_SAMPLE_THEN_SCALE, VARIANT_PARALLEL)
ALL_VARIANTS = (VARIANT_VANILLA,) + DMD_VARIANTS


# --------------------------------------------------------------------------
# Sinusoidal reference-point encoding
# --------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _pe_frequencies(half_channels: int) -> np.ndarray:
    """Angular frequencies for one coordinate axis: 2*pi * 10000^(-2i/d)."""
    i = np.arange(half_channels // 2)
    return 2.0 * math.pi * np.power(10000.0, -2.0 * i / half_channels)


def sinusoidal_pe(coords: Tensor, channels: int) -> Tensor:
    """Sinusoidal embedding of normalized 2D coordinates, (..., 2) -> (..., C).

    Each axis gets C/2 channels of interleaved (sin, cos) pairs on a
    geometric frequency ladder; the x block is concatenated before the y
    block along the channel axis.
    """
    if channels % 4 != 0:
        raise ContractViolation(f"sinusoidal_pe: channels must be divisible by 4, got {channels}")
    if coords.shape[-1] != 2:
        raise ContractViolation(f"sinusoidal_pe: coords must end in axis of size 2, got {coords.shape}")
    half = channels // 2
    lead = coords.shape[:-1]
    freqs = _pe_frequencies(half)
    freq_const = Tensor(np.broadcast_to(freqs, lead + (half // 2,)).copy())
    parts = []
    for axis_idx in range(2):
        coord = ta.slice_axis(coords, axis=-1, start=axis_idx, stop=axis_idx + 1)
        coord = ta.repeat_axis(coord, axis=-1, times=half // 2)
        phase = ta.multiply(coord, freq_const)
        s = ta.reshape(ta.sin(phase), lead + (half // 2, 1))
        c = ta.reshape(ta.cos(phase), lead + (half // 2, 1))
        parts.append(ta.reshape(ta.concat([s, c], axis=-1), lead + (half,)))
    return ta.concat(parts, axis=-1)


# Re-exported here because sampling is the attention module's lookup kernel;
# it is registered as a differentiable primitive in the tape engine.
bilinear_sample = ta.bilinear_sample


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass
class MsdaStageParams:
    """One deformable-attention stage: generators plus per-head projections."""

    num_heads: int
    num_levels: int
    num_points: int
    channels: int
    off_w: Tensor  # (C, Nh*M*N*2)
    off_b: Tensor  # (Nh*M*N*2,)
    atn_w: Tensor  # (C, Nh*M*N)
    atn_b: Tensor  # (Nh*M*N,)
    val_w: Tensor  # (Nh, C, C/Nh)
    out_w: Tensor  # (Nh, C/Nh, C)


@dataclass
class MsdaParams:
    """Cross-attention parameters for one decoder layer."""

    variant: str
    num_heads: int
    num_levels: int
    num_points: int
    channels: int
    stage: MsdaStageParams | None = None  # vanilla
    stage_ms: MsdaStageParams | None = None  # M levels x 1 point
    stage_sp: MsdaStageParams | None = None  # 1 level x N points
    lin1_w: Tensor | None = None
    lin1_b: Tensor | None = None
    lin2_w: Tensor | None = None
    lin2_b: Tensor | None = None


@dataclass
class SampledValue:
    """Per-query attention output plus the per-head sampling cost."""

    output: Tensor  # (Q, C)
    sample_count: int


def _init_stage(
    rng: np.random.Generator, num_heads: int, num_levels: int, num_points: int, channels: int, sd: float
) -> MsdaStageParams:
    if channels % num_heads != 0:
        raise ContractViolation(f"channels {channels} not divisible by heads {num_heads}")
    head_dim = channels // num_heads
    n_gen = num_heads * num_levels * num_points
    return MsdaStageParams(
        num_heads=num_heads,
        num_levels=num_levels,
        num_points=num_points,
        channels=channels,
        off_w=Tensor(rng.normal(0.0, sd, (channels, n_gen * 2))),
        off_b=Tensor(_default_offset_bias(num_heads, num_levels, num_points)),
        atn_w=Tensor(rng.normal(0.0, sd, (channels, n_gen))),
        atn_b=Tensor(np.zeros(n_gen)),
        val_w=Tensor(rng.normal(0.0, sd, (num_heads, channels, head_dim))),
        out_w=Tensor(rng.normal(0.0, sd, (num_heads, head_dim, channels))),
    )


def _default_offset_bias(num_heads: int, num_levels: int, num_points: int) -> np.ndarray:
    """Spread initial sampling offsets on a small ring per head, deformable-DETR style."""
    angles = np.arange(num_heads) * (2.0 * math.pi / num_heads)
    base = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (Nh, 2)
    bias = np.zeros((num_heads, num_levels, num_points, 2))
    for p in range(num_points):
        bias[:, :, p, :] = base[:, None, :] * (p + 1)
    return bias.reshape(-1)


def init_msda_params(
    variant: str,
    num_heads: int,
    num_levels: int,
    num_points: int,
    channels: int,
    seed: int,
    sd: float = 0.02,
) -> MsdaParams:
    if variant not in ALL_VARIANTS:
        raise ContractViolation(f"unknown attention variant {variant!r}")
    rng = substream(seed, "msda")
    params = MsdaParams(variant, num_heads, num_levels, num_points, channels)
    if variant == VARIANT_VANILLA:
        params.stage = _init_stage(rng, num_heads, num_levels, num_points, channels, sd)
    else:
        params.stage_ms = _init_stage(rng, num_heads, num_levels, 1, channels, sd)
        params.stage_sp = _init_stage(rng, num_heads, 1, num_points, channels, sd)
        params.lin1_w = Tensor(rng.normal(0.0, sd, (channels, channels)))
        params.lin1_b = Tensor(np.zeros(channels))
        params.lin2_w = Tensor(rng.normal(0.0, sd, (channels, channels)))
        params.lin2_b = Tensor(np.zeros(channels))
    return params


def named_parameters(params: MsdaParams, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}

    def stage_entries(stage: MsdaStageParams, name: str) -> None:
        for f in ("off_w", "off_b", "atn_w", "atn_b", "val_w", "out_w"):
            out[f"{prefix}{name}.{f}"] = getattr(stage, f)

    if params.stage is not None:
        stage_entries(params.stage, "stage")
    if params.stage_ms is not None:
        stage_entries(params.stage_ms, "ms")
        stage_entries(params.stage_sp, "sp")
        out[f"{prefix}lin1.w"] = params.lin1_w
        out[f"{prefix}lin1.b"] = params.lin1_b
        out[f"{prefix}lin2.w"] = params.lin2_w
        out[f"{prefix}lin2.b"] = params.lin2_b
    return out


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------


def _as_level_tensors(pyramid) -> list[Tensor]:
    if isinstance(pyramid, FeaturePyramid):
        return [Tensor(level) for level in pyramid.levels]
    return [level if isinstance(level, Tensor) else Tensor(level) for level in pyramid]


def _linear_rows(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """(T, Cin) @ (Cin, Cout) + bias."""
    y = ta.matmul(x, w)
    if b is not None:
        y = ta.add_rows(y, b)
    return y


def _msda_stage(
    tokens: Tensor,
    levels: list[Tensor],
    ref: Tensor,
    stage: MsdaStageParams,
    return_weights: bool = False,
):
    """Core deformable attention for one stage.

    tokens (T, C), ref (T, 2) normalized; returns (T, C).
    """
    t_n = tokens.shape[0]
    nh, m, n, c = stage.num_heads, stage.num_levels, stage.num_points, stage.channels
    head_dim = c // nh
    if len(levels) != m:
        raise ContractViolation(f"msda: pyramid has {len(levels)} levels, params expect {m}")
    if tokens.shape != (t_n, c):
        raise ContractViolation(f"msda: tokens shape {tokens.shape} does not match channels {c}")
    if ref.shape != (t_n, 2):
        raise ContractViolation(f"msda: ref shape {ref.shape} does not match tokens {tokens.shape}")

    off = _linear_rows(tokens, stage.off_w, stage.off_b)  # (T, Nh*M*N*2)
    off = ta.reshape(off, (t_n, nh, m, n, 2))
    atn = _linear_rows(tokens, stage.atn_w, stage.atn_b)  # (T, Nh*M*N)
    atn = ta.softmax(ta.reshape(atn, (t_n, nh, m * n)), axis=-1)
    weights = ta.reshape(atn, (t_n, nh, m, n))

    # reference points broadcast to every head/point: (T, Nh, N, 2)
    ref_e = ta.repeat_axis(ta.reshape(ref, (t_n, 1, 1, 2)), axis=1, times=nh)
    ref_e = ta.repeat_axis(ref_e, axis=2, times=n)

    per_level = []
    for lvl in range(m):
        grid = levels[lvl]
        h_l, w_l = grid.shape[1], grid.shape[2]
        off_l = ta.reshape(ta.slice_axis(off, axis=2, start=lvl, stop=lvl + 1), (t_n, nh, n, 2))
        cell = Tensor(np.broadcast_to(np.array([1.0 / h_l, 1.0 / w_l]), (t_n, nh, n, 2)).copy())
        pts = ta.add(ref_e, ta.multiply(off_l, cell))
        sampled = ta.bilinear_sample(grid, ta.reshape(pts, (t_n * nh * n, 2)))  # (T*Nh*N, C)
        per_level.append(ta.reshape(sampled, (t_n, nh, 1, n, c)))
    samples = per_level[0] if m == 1 else ta.concat(per_level, axis=2)  # (T, Nh, M, N, C)

    # per-head value projection: (Nh, T*M*N, C) @ (Nh, C, D)
    s_h = ta.reshape(ta.transpose(samples, (1, 0, 2, 3, 4)), (nh, t_n * m * n, c))
    v = ta.reshape(ta.matmul(s_h, stage.val_w), (nh, t_n, m * n, head_dim))
    # weighted sum over the (level, point) group via batched matmul
    w_h = ta.reshape(ta.transpose(weights, (1, 0, 2, 3)), (nh, t_n, 1, m * n))
    agg = ta.reshape(ta.matmul(w_h, v), (nh, t_n, head_dim))
    out = ta.reduce_sum(ta.matmul(agg, stage.out_w), axis=0)  # (T, C)
    if return_weights:
        return out, atn
    return out


def msda_vanilla(tokens: Tensor, pyramid, ref: Tensor, params: MsdaParams) -> SampledValue:
    """Vanilla multi-scale deformable attention: M*N samples per query per head."""
    if params.variant != VARIANT_VANILLA:
        raise ContractViolation(f"msda_vanilla called with variant {params.variant!r}")
    levels = _as_level_tensors(pyramid)
    out = _msda_stage(tokens, levels, ref, params.stage)
    return SampledValue(out, count_samples(params.variant, params.num_levels, params.num_points))


def msda_dmd(tokens: Tensor, pyramid, ref: Tensor, params: MsdaParams) -> SampledValue:
    """Decoupled deformable attention; all variants read M+N samples."""
    if params.variant not in DMD_VARIANTS:
        raise ContractViolation(f"msda_dmd called with variant {params.variant!r}")
    levels = _as_level_tensors(pyramid)
    largest = [levels[0]]

    def lin1(x):
        return _linear_rows(x, params.lin1_w, params.lin1_b)

    def lin2(x):
        return _linear_rows(x, params.lin2_w, params.lin2_b)

    if params.variant == VARIANT_SCALE_THEN_SAMPLE:
        q1 = lin1(_msda_stage(tokens, levels, ref, params.stage_ms))
        out = ta.add(q1, lin2(_msda_stage(q1, largest, ref, params.stage_sp)))
    elif params.variant == VARIANT_SAMPLE_THEN_SCALE:
        q1 = lin1(_msda_stage(tokens, largest, ref, params.stage_sp))
        out = ta.add(q1, lin2(_msda_stage(q1, levels, ref, params.stage_ms)))
    else:  # parallel: both stages from the same tokens, summed after their linears
        a = lin1(_msda_stage(tokens, levels, ref, params.stage_ms))
        b = lin2(_msda_stage(tokens, largest, ref, params.stage_sp))
        out = ta.add(a, b)
    return SampledValue(out, count_samples(params.variant, params.num_levels, params.num_points))


def msda(tokens: Tensor, pyramid, ref: Tensor, params: MsdaParams) -> SampledValue:
    if params.variant == VARIANT_VANILLA:
        return msda_vanilla(tokens, pyramid, ref, params)
    return msda_dmd(tokens, pyramid, ref, params)


def count_samples(variant: str, num_levels: int, num_points: int) -> int:
    """Feature reads per query per head: M*N for vanilla, M+N for decoupled."""
    if num_levels < 1 or num_points < 1:
        raise ContractViolation(f"count_samples: M={num_levels}, N={num_points} must be >= 1")
    if variant == VARIANT_VANILLA:
        return num_levels * num_points
    if variant in DMD_VARIANTS:
        return num_levels + num_points
    raise ContractViolation(f"count_samples: unknown variant {variant!r}")


def attention_weight_groups(params: MsdaParams, tokens: Tensor, pyramid, ref: Tensor) -> list[np.ndarray]:
    """Softmax-normalized weight groups per stage, each (T, Nh, group); for checks."""
    levels = _as_level_tensors(pyramid)
    groups = []
    if params.variant == VARIANT_VANILLA:
        _, w = _msda_stage(tokens, levels, ref, params.stage, return_weights=True)
        groups.append(w.values)
        return groups
    largest = [levels[0]]
    if params.variant == VARIANT_SCALE_THEN_SAMPLE:
        out1, w1 = _msda_stage(tokens, levels, ref, params.stage_ms, return_weights=True)
        q1 = _linear_rows(out1, params.lin1_w, params.lin1_b)
        _, w2 = _msda_stage(q1, largest, ref, params.stage_sp, return_weights=True)
    elif params.variant == VARIANT_SAMPLE_THEN_SCALE:
        out1, w1 = _msda_stage(tokens, largest, ref, params.stage_sp, return_weights=True)
        q1 = _linear_rows(out1, params.lin1_w, params.lin1_b)
        _, w2 = _msda_stage(q1, levels, ref, params.stage_ms, return_weights=True)
    else:
        _, w1 = _msda_stage(tokens, levels, ref, params.stage_ms, return_weights=True)
        _, w2 = _msda_stage(tokens, largest, ref, params.stage_sp, return_weights=True)
    groups.extend([w1.values, w2.values])
    return groups


# --------------------------------------------------------------------------
# Wall-clock benchmark
# --------------------------------------------------------------------------


def random_pyramid(channels: int, num_levels: int, h: int, w: int, seed: int) -> list[np.ndarray]:
    rng = substream(seed, "bench.pyramid")
    levels = []
    hh, ww = h, w
    for _ in range(num_levels):
        levels.append(rng.normal(0.0, 1.0, (channels, hh, ww)))
        hh, ww = (hh + 1) // 2, (ww + 1) // 2
    return levels


def benchmark_attention(
    variants: Sequence[str],
    repeats: int = 100,
    channels: int = 256,
    num_heads: int = 8,
    num_levels: int = 3,
    num_points: int = 4,
    queries: int = 1000,
    h: int = 200,
    w: int = 100,
    seed: int = 0,
    warmup: int = 3,
) -> list[dict]:
    """Time each cross-attention variant forward-only (no tape recording).

    Returns one row per variant: variant, M, N, queries, mean_ms, sd_ms,
    sample_count.
    """
    rng = substream(seed, "bench.inputs")
    levels = [Tensor(lvl) for lvl in random_pyramid(channels, num_levels, h, w, seed)]
    tokens = Tensor(rng.normal(0.0, 1.0, (queries, channels)))
    ref = Tensor(rng.uniform(0.05, 0.95, (queries, 2)))
    rows = []
    for variant in variants:
        params = init_msda_params(variant, num_heads, num_levels, num_points, channels, seed)
        for _ in range(warmup):
            msda(tokens, levels, ref, params)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            msda(tokens, levels, ref, params)
            times.append((time.perf_counter() - t0) * 1000.0)
        arr = np.asarray(times)
        rows.append(
            {
                "variant": variant,
                "M": num_levels,
                "N": num_points,
                "queries": queries,
                "mean_ms": float(arr.mean()),
                "sd_ms": float(arr.std(ddof=1)) if repeats > 1 else 0.0,
                "sample_count": count_samples(variant, num_levels, num_points),
            }
        )
    return rows
