"""Toy training loop: per-layer matching, combined losses, adaptive updates,
and per-step matching-stability logging.

A small trainable linear adapter sits between the synthetic BEV pyramid and
the decoder (and provides the embeddings for the discriminative loss), so
the encoder-side loss actually shapes the features cross-attention reads.
The loop is deterministic given its seed; every random choice draws from a
named substream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorad as ta
from .decoder import DecoderConfig, forward, init_model_params
from .geometry import Scene
from .losses import LossConfig, total_loss
from .matching import Assignment, CostConfig, GtTarget, gt_targets, unstable_scores
from .priors import PriorBank
from .rngutil import substream
from .synth import FeaturePyramid, InstanceMask, rasterize_instances, render_bev
from .tensorad import Tensor

PRIOR_MODE_PRIOR = "prior"
PRIOR_MODE_RANDOM = "random"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.1
    optimizer: str = "adagrad"  # momentum-free adaptive, or "sgd"
    adagrad_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    prior_mode: str = PRIOR_MODE_PRIOR
    # fresh feature noise per visit, the stand-in for sensor/augmentation
    # variability; without it a small dataset is memorized and matching
    # locks regardless of anchor quality
    feature_noise_sd: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.optimizer not in ("adagrad", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.prior_mode not in (PRIOR_MODE_PRIOR, PRIOR_MODE_RANDOM):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.feature_noise_sd < 0:
            raise ValueError("feature_noise_sd must be >= 0")


@dataclass
class TrainScene:
    scene: Scene
    pyramid: FeaturePyramid
    mask: InstanceMask
    gts: list[GtTarget]


def build_dataset(
    scenes: list[Scene],
    channels: int,
    num_levels: int,
    seed: int,
    truncation: float = 3.0,
    feature_noise_sd: float = 0.01,
) -> list[TrainScene]:
    """Precompute pyramids, instance masks, and matching targets per scene."""
    out = []
    for idx, scene in enumerate(scenes):
        pyramid = render_bev(
            scene, channels, num_levels, seed=seed + idx, truncation=truncation, noise_sd=feature_noise_sd
        )
        mask = rasterize_instances(scene)
        out.append(TrainScene(scene, pyramid, mask, gt_targets(scene.elements, scene.extent)))
    return out


def init_adapter(channels: int, grid: tuple[int, int], seed: int, sd: float = 0.02) -> dict[str, Tensor]:
    """Trainable feature adapter: a near-identity channel map for every level
    plus a zero-initialized positional surface on the finest level.

    The positional surface is what lets the discriminative loss actually
    separate same-class instances: pointwise features of two parallel
    dividers are near-identical, so instance separation needs position.
    """
    rng = substream(seed, "adapter")
    h, w = grid
    return {
        "adapter.w": Tensor(np.eye(channels) + rng.normal(0.0, sd, (channels, channels))),
        "adapter.b": Tensor(np.zeros(channels)),
        "adapter.pos": Tensor(np.zeros((channels, h, w))),
    }


def project_pyramid(levels: list[np.ndarray], params: dict[str, Tensor]) -> list[Tensor]:
    """Apply the adapter to each level: (C, h, w) -> (C, h, w)."""
    w, b = params["adapter.w"], params["adapter.b"]
    out = []
    for idx, level in enumerate(levels):
        c, h, wd = level.shape
        flat = ta.matmul(w, ta.reshape(Tensor(level), (c, h * wd)))
        biased = ta.transpose(ta.add_rows(ta.transpose(flat, (1, 0)), b), (1, 0))
        projected = ta.reshape(biased, (c, h, wd))
        if idx == 0 and "adapter.pos" in params and params["adapter.pos"].shape == projected.shape:
            projected = ta.add(projected, params["adapter.pos"])
        out.append(projected)
    return out


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    log: list[dict]
    decoder_cfg: DecoderConfig
    bank: PriorBank | None


def _training_step_loss(
    params: dict[str, Tensor],
    bank: PriorBank | None,
    item: TrainScene,
    cfg: DecoderConfig,
    loss_cfg: LossConfig,
    cost_cfg: CostConfig,
    noise_rng: np.random.Generator | None = None,
    noise_sd: float = 0.0,
) -> tuple[Tensor, dict, list[Assignment]]:
    raw = item.pyramid.levels
    if noise_rng is not None and noise_sd > 0:
        raw = [lvl + noise_rng.normal(0.0, noise_sd, lvl.shape) for lvl in raw]
    levels = project_pyramid(raw, params)
    outputs = forward(params, bank, levels, cfg)
    return total_loss(outputs, item.gts, levels[0], item.mask, loss_cfg, cost_cfg)


def train(
    params: dict[str, Tensor],
    bank: PriorBank | None,
    dataset: list[TrainScene],
    decoder_cfg: DecoderConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    cost_cfg: CostConfig | None = None,
) -> TrainResult:
    """Gradient-descent loop with per-layer matching recomputed each step.

    Logs one row per step: losses, u per layer transition, and u_t.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    loss_cfg = loss_cfg or LossConfig()
    cost_cfg = cost_cfg or CostConfig(
        lambda_cls=loss_cfg.lambda_cls,
        lambda_pts=loss_cfg.lambda_pts,
        focal_alpha=loss_cfg.focal_alpha,
        focal_gamma=loss_cfg.focal_gamma,
    )
    if "adapter.w" not in params:
        grid = dataset[0].pyramid.levels[0].shape[1:]
        params.update(init_adapter(decoder_cfg.channels, grid, train_cfg.seed))
    names = sorted(params)
    accum = {name: np.zeros(params[name].shape) for name in names}
    order_rng = substream(train_cfg.seed, "train.order")
    noise_rng = substream(train_cfg.seed, "train.featnoise")
    order: list[int] = []
    log: list[dict] = []

    for step in range(train_cfg.steps):
        if not order:
            order = list(order_rng.permutation(len(dataset)))
        item = dataset[order.pop()]

        with ta.Tape() as tape:
            loss, breakdown, assignments = _training_step_loss(
                params, bank, item, decoder_cfg, loss_cfg, cost_cfg,
                noise_rng=noise_rng, noise_sd=train_cfg.feature_noise_sd,
            )
            if not np.isfinite(loss.values).all():
                raise TrainingDiverged(step)
            grads = ta.backward(tape, loss)

        for name in names:
            g = grads.of(params[name])
            if train_cfg.optimizer == "adagrad":
                accum[name] = accum[name] + g * g
                update = train_cfg.lr * g / (np.sqrt(accum[name]) + train_cfg.adagrad_eps)
            else:
                update = train_cfg.lr * g
            params[name] = Tensor(params[name].values - update)

        stability = unstable_scores(assignments)
        row = {"step": step}
        row.update(breakdown)
        for i, u in enumerate(stability.u_per_layer, start=1):
            row[f"u_layer{i}"] = u
        row["u_t"] = stability.u_t
        log.append(row)

    return TrainResult(params, log, decoder_cfg, bank)


def setup_run(
    decoder_cfg: DecoderConfig,
    bank: PriorBank | None,
    train_cfg: TrainConfig,
    init_sd: float = 0.02,
) -> tuple[dict[str, Tensor], PriorBank | None, DecoderConfig]:
    """Model parameters plus the effective bank/config for the chosen prior mode.

    Random mode drops the bank and re-labels every instance as learnable;
    the shared learnable rows are drawn identically in both modes so the two
    runs differ only through the reference initialization path.
    """
    if train_cfg.prior_mode == PRIOR_MODE_RANDOM or bank is None:
        cfg = DecoderConfig(
            **{**decoder_cfg.__dict__, "n_prior": 0},
        )
        params = init_model_params(cfg, train_cfg.seed, init_sd=init_sd)
        return params, None, cfg
    params = init_model_params(decoder_cfg, train_cfg.seed, init_sd=init_sd)
    return params, bank, decoder_cfg


def final_epoch_mean(log: list[dict], key: str, epoch_len: int) -> float:
    """Mean of a logged column over the last epoch_len steps."""
    rows = log[-epoch_len:]
    return float(np.mean([row[key] for row in rows]))


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------


def save_checkpoint(params: dict[str, Tensor], path: str) -> None:
    np.savez(path, **{name: t.values for name, t in params.items()})


def load_checkpoint(path: str) -> dict[str, Tensor]:
    with np.load(path) as data:
        return {name: Tensor(data[name]) for name in data.files}
