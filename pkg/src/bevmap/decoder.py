"""Map-element decoder with prior reference points and iterative refinement.

Queries are hierarchical: an instance embedding plus a point embedding,
combined by broadcast addition into one token per (instance, point).  The
first `n_prior` instances start from a prior bank of clustered shapes (held
constant); the rest start from learnable logits squashed through a sigmoid.

Each layer runs, in order: a per-layer linear over the sinusoidal encoding
of the reference points (query position), decoupled self-attention (across
instances on point-averaged tokens, then across points within each
instance), deformable cross-attention into the BEV pyramid, an FFN, and
classification / point-regression heads.  Regressed offsets are added in
inverse-sigmoid space, and the refined points become both the layer's
prediction and the next layer's reference points with gradients stopped
between layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorad as ta
from .attention import (
    ALL_VARIANTS,
    MsdaParams,
    VARIANT_SCALE_THEN_SAMPLE,
    init_msda_params,
    msda,
    named_parameters,
    sinusoidal_pe,
)
from .priors import PriorBank
from .rngutil import substream
from .tensorad import ContractViolation, Tensor


class NumericalError(RuntimeError):
    """A decoder stage produced non-finite values."""


@dataclass
class DecoderConfig:
    n_instances: int = 50
    n_prior: int = 9
    n_points: int = 20
    channels: int = 256
    n_layers: int = 6
    n_heads: int = 8
    n_classes: int = 3
    ffn_dim: int = 512
    head_hidden: int = 128
    variant: str = VARIANT_SCALE_THEN_SAMPLE
    num_levels: int = 3
    num_points_attn: int = 4

    def __post_init__(self):
        if not (0 <= self.n_prior <= self.n_instances):
            raise ContractViolation(f"n_prior {self.n_prior} must be in [0, {self.n_instances}]")
        if self.n_layers < 1:
            raise ContractViolation("n_layers must be >= 1")
        if self.channels % self.n_heads != 0 or self.channels % 4 != 0:
            raise ContractViolation("channels must be divisible by n_heads and by 4")
        if self.variant not in ALL_VARIANTS:
            raise ContractViolation(f"unknown attention variant {self.variant!r}")

    @property
    def n_learnable(self) -> int:
        return self.n_instances - self.n_prior


@dataclass
class ReferencePointSet:
    coords: Tensor  # (N_I, N_P, 2) normalized
    n_prior: int

    @property
    def origin_flags(self) -> list[str]:
        n_i = self.coords.shape[0]
        return ["prior" if i < self.n_prior else "learnable" for i in range(n_i)]


@dataclass
class LayerOutput:
    class_logits: Tensor  # (N_I, n_classes)
    point_coords: Tensor  # (N_I, N_P, 2) normalized; also the refined references
    refined_reference: ReferencePointSet
    query_state: Tensor  # (N_I, N_P, C)


# --------------------------------------------------------------------------
# Parameter initialization
# --------------------------------------------------------------------------


def init_model_params(
    cfg: DecoderConfig,
    seed: int,
    init_sd: float = 0.02,
    zero_init_regression: bool = True,
) -> dict[str, Tensor]:
    """Model parameters as a flat name -> Tensor map.

    All weights are Gaussian, biases zero; the regression head's final layer
    is zero-initialized so layer 0 predicts its reference points verbatim,
    which is what makes priors visible to the first matching step.  Learnable
    reference logits are drawn so their sigmoids spread over the extent.
    """
    rng = substream(seed, "model")
    c = cfg.channels
    params: dict[str, Tensor] = {
        "q_ins": Tensor(rng.normal(0.0, init_sd, (cfg.n_instances, c))),
        "q_pts": Tensor(rng.normal(0.0, init_sd, (cfg.n_points, c))),
    }
    # Uniform positions pushed through the inverse sigmoid; rows beyond
    # n_prior are the ones actually consumed in prior mode.
    uniform = rng.uniform(0.05, 0.95, (cfg.n_instances, cfg.n_points, 2))
    logits = np.log(uniform) - np.log1p(-uniform)
    params["ref_logits"] = Tensor(logits[cfg.n_prior :])

    def linear(name: str, n_in: int, n_out: int, zero: bool = False) -> None:
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, init_sd, (n_in, n_out))
        params[f"{name}.w"] = Tensor(w)
        params[f"{name}.b"] = Tensor(np.zeros(n_out))

    def attn_block(name: str) -> None:
        for proj in ("q", "k", "v", "o"):
            linear(f"{name}.{proj}", c, c)
        params[f"{name}.ln_g"] = Tensor(np.ones(c))
        params[f"{name}.ln_b"] = Tensor(np.zeros(c))

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}"
        linear(f"{p}.pe", c, c)
        attn_block(f"{p}.self_inst")
        attn_block(f"{p}.self_pts")
        cross = init_msda_params(
            cfg.variant, cfg.n_heads, cfg.num_levels, cfg.num_points_attn, c,
            seed=int(substream(seed, f"model.cross.{layer}").integers(2**63)),
            sd=init_sd,
        )
        params.update(named_parameters(cross, prefix=f"{p}.cross."))
        params[f"{p}.cross_ln_g"] = Tensor(np.ones(c))
        params[f"{p}.cross_ln_b"] = Tensor(np.zeros(c))
        linear(f"{p}.ffn1", c, cfg.ffn_dim)
        linear(f"{p}.ffn2", cfg.ffn_dim, c)
        params[f"{p}.ffn_ln_g"] = Tensor(np.ones(c))
        params[f"{p}.ffn_ln_b"] = Tensor(np.zeros(c))
        linear(f"{p}.cls1", c, cfg.head_hidden)
        linear(f"{p}.cls2", cfg.head_hidden, cfg.n_classes)
        linear(f"{p}.reg1", c, cfg.head_hidden)
        linear(f"{p}.reg2", cfg.head_hidden, 2, zero=zero_init_regression)
    return params


def _layer_msda_params(params: dict[str, Tensor], cfg: DecoderConfig, layer: int) -> MsdaParams:
    prefix = f"layers.{layer}.cross."
    mp = MsdaParams(cfg.variant, cfg.n_heads, cfg.num_levels, cfg.num_points_attn, cfg.channels)
    from .attention import MsdaStageParams

    def stage(name: str, m: int, n: int) -> MsdaStageParams:
        return MsdaStageParams(
            cfg.n_heads, m, n, cfg.channels,
            off_w=params[f"{prefix}{name}.off_w"],
            off_b=params[f"{prefix}{name}.off_b"],
            atn_w=params[f"{prefix}{name}.atn_w"],
            atn_b=params[f"{prefix}{name}.atn_b"],
            val_w=params[f"{prefix}{name}.val_w"],
            out_w=params[f"{prefix}{name}.out_w"],
        )

    if cfg.variant == "vanilla":
        mp.stage = stage("stage", cfg.num_levels, cfg.num_points_attn)
    else:
        mp.stage_ms = stage("ms", cfg.num_levels, 1)
        mp.stage_sp = stage("sp", 1, cfg.num_points_attn)
        mp.lin1_w = params[f"{prefix}lin1.w"]
        mp.lin1_b = params[f"{prefix}lin1.b"]
        mp.lin2_w = params[f"{prefix}lin2.w"]
        mp.lin2_b = params[f"{prefix}lin2.b"]
    return mp


# --------------------------------------------------------------------------
# Query assembly and reference initialization
# --------------------------------------------------------------------------


def assemble_queries(q_ins: Tensor, q_pts: Tensor) -> Tensor:
    """Broadcast-combine instance and point embeddings: q[i, p] = q_ins[i] + q_pts[p]."""
    if q_ins.shape[-1] != q_pts.shape[-1]:
        raise ContractViolation(
            f"assemble_queries: channel mismatch {q_ins.shape} vs {q_pts.shape}"
        )
    n_i, c = q_ins.shape
    n_p = q_pts.shape[0]
    ins = ta.repeat_axis(ta.reshape(q_ins, (n_i, 1, c)), axis=1, times=n_p)
    pts = ta.repeat_axis(ta.reshape(q_pts, (1, n_p, c)), axis=0, times=n_i)
    return ta.add(ins, pts)


def init_reference_points(
    bank: PriorBank | None,
    cfg: DecoderConfig,
    params: dict[str, Tensor],
) -> ReferencePointSet:
    """Layer-0 reference points: bank shapes verbatim for the prior instances
    (constants, no gradient), sigmoid of learnable logits for the rest."""
    n_prior = cfg.n_prior if bank is not None else 0
    if n_prior > 0:
        if bank.n_pri < n_prior:
            raise ContractViolation(
                f"prior bank holds {bank.n_pri} shapes, decoder needs {n_prior}"
            )
        if bank.n_p != cfg.n_points:
            raise ContractViolation(
                f"prior bank shapes have {bank.n_p} points, decoder expects {cfg.n_points}"
            )
    logits = params["ref_logits"]
    expected = (cfg.n_instances - cfg.n_prior, cfg.n_points, 2)
    if logits.shape != expected:
        raise ContractViolation(f"ref_logits shape {logits.shape}, expected {expected}")
    learnable = ta.sigmoid(logits)
    if n_prior == 0:
        if cfg.n_prior != 0:
            raise ContractViolation("decoder configured with priors but no bank supplied")
        return ReferencePointSet(learnable, 0)
    prior = Tensor(np.stack([bank.priors[i].points for i in range(n_prior)]))
    coords = ta.concat([prior, learnable], axis=0)
    return ReferencePointSet(coords, n_prior)


# --------------------------------------------------------------------------
# Layer building blocks
# --------------------------------------------------------------------------


def _linear_nd(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Apply (Cin, Cout) weights over the trailing axis of an N-d tensor."""
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    y = ta.matmul(ta.reshape(x, (rows, x.shape[-1])), w)
    if b is not None:
        y = ta.add_rows(y, b)
    return ta.reshape(y, lead + (w.shape[-1],))


def _ln_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    normed = ta.layer_normalize(x, axis=-1)
    return ta.add_rows(ta.scale_rows(normed, gain), bias)


def _mha(
    q_in: Tensor, k_in: Tensor, v_in: Tensor, params: dict[str, Tensor], prefix: str, n_heads: int
) -> Tensor:
    """Multi-head attention over (..., T, C) token sets (2-d or 3-d input)."""
    squeeze = q_in.values.ndim == 2
    if squeeze:
        q_in = ta.reshape(q_in, (1,) + q_in.shape)
        k_in = ta.reshape(k_in, (1,) + k_in.shape)
        v_in = ta.reshape(v_in, (1,) + v_in.shape)
    b, t, c = q_in.shape
    tk = k_in.shape[1]
    d = c // n_heads

    def split(x: Tensor, length: int) -> Tensor:
        return ta.transpose(ta.reshape(x, (b, length, n_heads, d)), (0, 2, 1, 3))

    q = split(_linear_nd(q_in, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]), t)
    k = split(_linear_nd(k_in, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]), tk)
    v = split(_linear_nd(v_in, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]), tk)
    scores = ta.scale(ta.matmul(q, ta.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = ta.softmax(scores, axis=-1)
    mixed = ta.reshape(ta.transpose(ta.matmul(attn, v), (0, 2, 1, 3)), (b, t, c))
    out = _linear_nd(mixed, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])
    if squeeze:
        out = ta.reshape(out, (t, c))
    return out


def _check_finite(stage: str, x: Tensor) -> None:
    if not np.isfinite(x.values).all():
        raise NumericalError(f"non-finite values after stage {stage!r}")


# --------------------------------------------------------------------------
# Decoder layer and forward pass
# --------------------------------------------------------------------------


def decoder_layer(
    query_state: Tensor,
    reference: ReferencePointSet,
    pyramid_levels,
    params: dict[str, Tensor],
    cfg: DecoderConfig,
    layer: int,
) -> LayerOutput:
    p = f"layers.{layer}"
    n_i, n_p, c = query_state.shape
    r = reference.coords

    q_pos = _linear_nd(sinusoidal_pe(r, c), params[f"{p}.pe.w"], params[f"{p}.pe.b"])
    _check_finite("query position embedding", q_pos)
    q = query_state

    # instance-level self-attention on point-averaged tokens
    qp = ta.add(q, q_pos)
    inst_qk = ta.reduce_mean(qp, axis=1)  # (N_I, C)
    inst_v = ta.reduce_mean(q, axis=1)
    inst_out = _mha(inst_qk, inst_qk, inst_v, params, f"{p}.self_inst", cfg.n_heads)
    inst_out = ta.repeat_axis(ta.reshape(inst_out, (n_i, 1, c)), axis=1, times=n_p)
    q = _ln_affine(ta.add(q, inst_out), params[f"{p}.self_inst.ln_g"], params[f"{p}.self_inst.ln_b"])
    _check_finite("instance self-attention", q)

    # point-level self-attention within each instance (batched over instances)
    qp = ta.add(q, q_pos)
    pts_out = _mha(qp, qp, q, params, f"{p}.self_pts", cfg.n_heads)
    q = _ln_affine(ta.add(q, pts_out), params[f"{p}.self_pts.ln_g"], params[f"{p}.self_pts.ln_b"])
    _check_finite("point self-attention", q)

    # deformable cross-attention into the BEV pyramid, one reference per point
    qp = ta.add(q, q_pos)
    tokens = ta.reshape(qp, (n_i * n_p, c))
    ref_flat = ta.reshape(r, (n_i * n_p, 2))
    cross = msda(tokens, pyramid_levels, ref_flat, _layer_msda_params(params, cfg, layer))
    cross_out = ta.reshape(cross.output, (n_i, n_p, c))
    q = _ln_affine(ta.add(q, cross_out), params[f"{p}.cross_ln_g"], params[f"{p}.cross_ln_b"])
    _check_finite("cross-attention", q)

    hidden = ta.relu(_linear_nd(q, params[f"{p}.ffn1.w"], params[f"{p}.ffn1.b"]))
    ffn_out = _linear_nd(hidden, params[f"{p}.ffn2.w"], params[f"{p}.ffn2.b"])
    q = _ln_affine(ta.add(q, ffn_out), params[f"{p}.ffn_ln_g"], params[f"{p}.ffn_ln_b"])
    _check_finite("feed-forward", q)

    inst_state = ta.reduce_mean(q, axis=1)  # class per instance from pooled point states
    cls_hidden = ta.relu(_linear_nd(inst_state, params[f"{p}.cls1.w"], params[f"{p}.cls1.b"]))
    class_logits = _linear_nd(cls_hidden, params[f"{p}.cls2.w"], params[f"{p}.cls2.b"])

    reg_hidden = ta.relu(_linear_nd(q, params[f"{p}.reg1.w"], params[f"{p}.reg1.b"]))
    offsets = _linear_nd(reg_hidden, params[f"{p}.reg2.w"], params[f"{p}.reg2.b"])
    refined = ta.sigmoid(ta.add(ta.inverse_sigmoid(r), offsets))
    _check_finite("point regression", refined)

    return LayerOutput(
        class_logits=class_logits,
        point_coords=refined,
        refined_reference=ReferencePointSet(refined, reference.n_prior),
        query_state=q,
    )


def forward(
    params: dict[str, Tensor],
    bank: PriorBank | None,
    pyramid_levels,
    cfg: DecoderConfig,
    frozen_references: list[np.ndarray] | None = None,
) -> list[LayerOutput]:
    """Run all decoder layers; gradients are stopped on references between layers.

    `frozen_references` substitutes fixed arrays for the detached inter-layer
    references (entry i feeds layer i+1).  Finite-difference checks need it:
    perturbing a parameter must not leak through the stopped path, which is
    exactly what freezing the references at their base values guarantees.
    """
    reference = init_reference_points(bank, cfg, params)
    q = assemble_queries(params["q_ins"], params["q_pts"])
    outputs: list[LayerOutput] = []
    for layer in range(cfg.n_layers):
        out = decoder_layer(q, reference, pyramid_levels, params, cfg, layer)
        outputs.append(out)
        q = out.query_state
        if frozen_references is not None and layer < cfg.n_layers - 1:
            next_ref = Tensor(frozen_references[layer])
        else:
            next_ref = out.point_coords.detach()
        reference = ReferencePointSet(next_ref, reference.n_prior)
    return outputs
