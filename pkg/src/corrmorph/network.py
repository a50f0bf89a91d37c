"""Movement-transfer network.

Two hierarchical point-set encoders produce per-point features for the driven
(facial) and driver (bony) surfaces. A cross-attention stage turns those
features into a dense correspondence between the two sets, which transfers
per-point driver movement features onto the driven points. A small head maps
the transferred features to a bounded 3-vector movement per driven point.

Three variants share the movement-feature and head machinery and differ only
in how the correspondence is produced:

    attention  learned: dot products of query/key embeddings of the two
               feature sets, normalized by the driver point count
    no_corr    learned from the driven features alone: a single linear map
               straight to the score matrix (the driver features are unused)
    closest    not learned: binary nearest-driver-point assignment
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (
    NORMALIZED,
    PointSet,
    ball_query,
    closest_point_matrix,
    farthest_point_sample,
    idw_weights,
    lexicographic_start,
)

VARIANTS = ("attention", "no_corr", "closest")


@dataclass(frozen=True)
class EncoderConfig:
    """Stage layout of one hierarchical encoder.

    Four encoding stages (sample -> group -> shared MLP -> max-pool) followed
    by four decoding stages (interpolate -> concat skip -> unit MLP). Decoding
    stage i restores the point count of its mirror encoding stage.
    """

    stage_points: tuple[int, int, int, int]
    radii: tuple[float, float, float, float]
    neighbor_caps: tuple[int, int, int, int]
    enc_widths: tuple[tuple[int, ...], ...]
    dec_widths: tuple[tuple[int, ...], ...]
    interp_k: int = 3

    def __post_init__(self):
        if not (
            len(self.stage_points)
            == len(self.radii)
            == len(self.neighbor_caps)
            == len(self.enc_widths)
            == len(self.dec_widths)
            == 4
        ):
            raise ValueError("encoder config must describe exactly 4 stages")
        if any(a < b for a, b in zip(self.stage_points, self.stage_points[1:])):
            raise ValueError(f"stage point counts must be non-increasing: {self.stage_points}")

    @property
    def out_width(self) -> int:
        return self.dec_widths[-1][-1]


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int = 64
    movement_dim: int = 64
    head_widths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.embed_dim < 1 or self.movement_dim < 1:
            raise ValueError("embedding and movement dims must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    n_points: int
    encoder: EncoderConfig
    attention: AttentionConfig
    preset: str = "custom"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_points < self.encoder.stage_points[0]:
            raise ValueError(
                f"n_points={self.n_points} below first stage count "
                f"{self.encoder.stage_points[0]}"
            )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_points": self.n_points,
            "preset": self.preset,
            "encoder": {
                "stage_points": list(self.encoder.stage_points),
                "radii": list(self.encoder.radii),
                "neighbor_caps": list(self.encoder.neighbor_caps),
                "enc_widths": [list(w) for w in self.encoder.enc_widths],
                "dec_widths": [list(w) for w in self.encoder.dec_widths],
                "interp_k": self.encoder.interp_k,
            },
            "attention": {
                "embed_dim": self.attention.embed_dim,
                "movement_dim": self.attention.movement_dim,
                "head_widths": list(self.attention.head_widths),
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        enc = d["encoder"]
        att = d["attention"]
        return ModelConfig(
            variant=d["variant"],
            n_points=d["n_points"],
            preset=d.get("preset", "custom"),
            encoder=EncoderConfig(
                stage_points=tuple(enc["stage_points"]),
                radii=tuple(enc["radii"]),
                neighbor_caps=tuple(enc["neighbor_caps"]),
                enc_widths=tuple(tuple(w) for w in enc["enc_widths"]),
                dec_widths=tuple(tuple(w) for w in enc["dec_widths"]),
                interp_k=enc["interp_k"],
            ),
            attention=AttentionConfig(
                embed_dim=att["embed_dim"],
                movement_dim=att["movement_dim"],
                head_widths=tuple(att["head_widths"]),
            ),
        )


def full_config(variant: str = "attention", n_points: int = 4096) -> ModelConfig:
    """Production-scale preset: 4096 points, stage widths up to 1024."""
    return ModelConfig(
        variant=variant,
        n_points=n_points,
        preset="full",
        encoder=EncoderConfig(
            stage_points=(1024, 512, 256, 64),
            radii=(0.1, 0.2, 0.4, 0.8),
            neighbor_caps=(32, 32, 32, 32),
            enc_widths=((128,), (256,), (512,), (1024,)),
            dec_widths=((512,), (256,), (128,), (128,)),
        ),
        attention=AttentionConfig(embed_dim=64, movement_dim=64),
    )


def toy_config(variant: str = "attention", n_points: int = 256) -> ModelConfig:
    """Small preset for tests and desk-scale experiments.

    Stage point counts scale with the input size (N/4 .. N/32); grouping radii
    are widened so sparse toy clouds still form non-trivial neighborhoods.
    """
    stages = tuple(max(n_points // d, 4) for d in (4, 8, 16, 32))
    return ModelConfig(
        variant=variant,
        n_points=n_points,
        preset="toy",
        encoder=EncoderConfig(
            stage_points=stages,
            radii=(0.3, 0.5, 0.9, 1.7),
            neighbor_caps=(16, 16, 16, 16),
            enc_widths=((32,), (64,), (128,), (256,)),
            dec_widths=((128,), (64,), (32,), (32,)),
        ),
        attention=AttentionConfig(embed_dim=32, movement_dim=32),
    )


PRESETS = {"full": full_config, "toy": toy_config}


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ModelParams:
    """All trainable weights, keyed by block name in a fixed order."""

    config: ModelConfig
    blocks: dict[str, Tensor]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values for name, t in self.blocks.items()}

    def zero_grads(self) -> None:
        for t in self.blocks.values():
            t.grad = None


def _encoder_layer_dims(cfg: EncoderConfig, in_features: int = 0) -> list[tuple[str, int, int]]:
    """(layer name, fan_in, fan_out) for every linear in one encoder."""
    dims: list[tuple[str, int, int]] = []
    level_widths = [in_features]  # feature width at level 0 before encoding
    for i, widths in enumerate(cfg.enc_widths):
        w_in = level_widths[-1] + 3  # grouped features + relative coordinates
        for j, w_out in enumerate(widths):
            dims.append((f"enc{i}/lin{j}", w_in, w_out))
            w_in = w_out
        level_widths.append(widths[-1])
    # decoding: deepest level back down to level 0
    up_width = level_widths[4]
    for i, widths in enumerate(cfg.dec_widths):
        skip_level = 3 - i
        skip_width = level_widths[skip_level] if skip_level > 0 else in_features + 3
        w_in = up_width + skip_width
        for j, w_out in enumerate(widths):
            dims.append((f"dec{i}/lin{j}", w_in, w_out))
            w_in = w_out
        up_width = widths[-1]
    return dims


def _linear_block_dims(config: ModelConfig) -> list[tuple[str, int, int]]:
    enc = config.encoder
    att = config.attention
    dims: list[tuple[str, int, int]] = []
    if config.variant in ("attention", "no_corr"):
        dims += [(f"driven_enc/{n}", a, b) for n, a, b in _encoder_layer_dims(enc)]
    if config.variant == "attention":
        dims += [(f"driver_enc/{n}", a, b) for n, a, b in _encoder_layer_dims(enc)]
        dims.append(("attn/query", enc.out_width, att.embed_dim))
        dims.append(("attn/key", enc.out_width, att.embed_dim))
    elif config.variant == "no_corr":
        dims.append(("attn/score", enc.out_width, config.n_points))
    dims.append(("attn/value", 6, att.movement_dim))
    w_in = att.movement_dim
    for j, w_out in enumerate(att.head_widths):
        dims.append((f"head/lin{j}", w_in, w_out))
        w_in = w_out
    dims.append(("head/out", w_in, 3))
    return dims


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    rng = np.random.default_rng(seed)
    blocks: dict[str, Tensor] = {}
    for name, fan_in, fan_out in _linear_block_dims(config):
        bound = 1.0 / np.sqrt(fan_in)
        blocks[f"{name}/w"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True
        )
        blocks[f"{name}/b"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True
        )
    return ModelParams(config=config, blocks=blocks)


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class EncoderPlan:
    """Geometry-only precomputation for one point cloud: sampling indices,
    padded neighbor groups with relative coordinates, and interpolation
    weights. Depends only on coordinates, so it is cached per case."""

    level_coords: list[np.ndarray]
    group_idx: list[np.ndarray]  # per enc stage, (S, K) indices into previous level
    rel_coords: list[np.ndarray]  # per enc stage, (S, K, 3)
    interp: list[tuple[np.ndarray, np.ndarray]]  # per dec stage, (idx, weights)


def build_encoder_plan(coords: np.ndarray, cfg: EncoderConfig) -> EncoderPlan:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < cfg.stage_points[0]:
        raise ValueError(
            f"{coords.shape[0]} points is below the first stage count {cfg.stage_points[0]}"
        )
    levels = [coords]
    group_idx: list[np.ndarray] = []
    rel_coords: list[np.ndarray] = []
    for count, radius, cap in zip(cfg.stage_points, cfg.radii, cfg.neighbor_caps):
        prev = levels[-1]
        prev_ps = PointSet(prev, unit=NORMALIZED)
        start = lexicographic_start(prev)
        centers_idx = farthest_point_sample(prev_ps, count, start=start)
        centers = prev[centers_idx]
        groups = ball_query(PointSet(centers, unit=NORMALIZED), prev_ps, radius, cap)
        width = max(len(g) for g in groups)
        padded = np.empty((count, width), dtype=np.int64)
        for r, g in enumerate(groups):
            padded[r, : len(g)] = g
            padded[r, len(g) :] = g[0]  # repeat nearest: max-pool unaffected
        group_idx.append(padded)
        rel_coords.append(prev[padded] - centers[:, None, :])
        levels.append(centers)
    interp = []
    for i in range(4):
        src, dst = levels[4 - i], levels[3 - i]
        interp.append(idw_weights(src, dst, cfg.interp_k))
    return EncoderPlan(levels, group_idx, rel_coords, interp)


def _unit_mlp(x: Tensor, params: ModelParams, names: list[str]) -> Tensor:
    for name in names:
        x = ad.pointwise_linear(x, params.blocks[f"{name}/w"], params.blocks[f"{name}/b"])
        x = ad.relu(x)
    return x


def run_encoder(plan: EncoderPlan, cfg: EncoderConfig, params: ModelParams, prefix: str) -> Tensor:
    """Hierarchical encode/decode over a precomputed plan -> (N, out_width)."""
    feats: Tensor | None = None
    skip_feats: list[Tensor | None] = [None]
    for i in range(4):
        idx = plan.group_idx[i]
        rel = Tensor(plan.rel_coords[i])
        if feats is None:
            grouped = rel
        else:
            grouped = ad.concat([ad.gather_rows(feats, idx), rel], axis=-1)
        names = [f"{prefix}/enc{i}/lin{j}" for j in range(len(cfg.enc_widths[i]))]
        feats = ad.max_reduce(_unit_mlp(grouped, params, names), axis=1)
        skip_feats.append(feats)
    x = feats
    for i in range(4):
        idx, w = plan.interp[i]
        neighbors = ad.gather_rows(x, idx)  # (M, k, C)
        x = ad.sum_reduce(ad.mul(neighbors, Tensor(w[:, :, None])), axis=1)
        skip_level = 3 - i
        if skip_level > 0:
            skip = skip_feats[skip_level]
        else:
            skip = Tensor(plan.level_coords[0])
        x = ad.concat([x, skip], axis=-1)
        names = [f"{prefix}/dec{i}/lin{j}" for j in range(len(cfg.dec_widths[i]))]
        x = _unit_mlp(x, params, names)
    return x


def encode_pointset(ps: PointSet, cfg: EncoderConfig, params: ModelParams, prefix: str) -> Tensor:
    """Per-point features for one normalized point set; row i of the output
    corresponds to input point i."""
    if ps.unit != NORMALIZED:
        raise ValueError("point set must be normalized before encoding")
    plan = build_encoder_plan(ps.coords, cfg)
    return run_encoder(plan, cfg, params, prefix)


# ---------------------------------------------------------------------------
# Correspondence + movement transfer


def correlation_scores(f_driven: Tensor, f_driver: Tensor, params: ModelParams) -> Tensor:
    """Raw affinity matrix: query(driven features) . key(driver features)^T."""
    q = ad.pointwise_linear(f_driven, params.blocks["attn/query/w"], params.blocks["attn/query/b"])
    k = ad.pointwise_linear(f_driver, params.blocks["attn/key/w"], params.blocks["attn/key/b"])
    return ad.matmul(q, ad.transpose(k))


def correspondence_matrix(scores: Tensor) -> Tensor:
    """Normalize raw scores by the driver point count."""
    n2 = scores.shape[-1]
    return ad.affine(scores, 1.0 / n2)


def movement_features(driver_coords, driver_disp, params: ModelParams) -> Tensor:
    """Pointwise embedding of the 6-channel [position, movement] driver rows."""
    pb = np.asarray(driver_coords, dtype=np.float64)
    vb = np.asarray(driver_disp, dtype=np.float64)
    if pb.shape != vb.shape:
        raise ValueError(f"driver coords {pb.shape} and movement {vb.shape} misaligned")
    x = Tensor(np.concatenate([pb, vb], axis=1))
    return ad.pointwise_linear(x, params.blocks["attn/value/w"], params.blocks["attn/value/b"])


def transform_movement(scores: Tensor, f_vb: Tensor) -> Tensor:
    """Weighted transfer of driver movement features onto driven points:
    row i = (1/N2) * sum_j scores[i, j] * f_vb[j]."""
    n2 = f_vb.shape[0]
    return ad.affine(ad.matmul(scores, f_vb), 1.0 / n2)


def predict_movement(f_vf: Tensor, params: ModelParams) -> Tensor:
    """Head: reduce movement features to 3 channels, bounded to (-1, 1) by the
    shifted sigmoid 2*s(x) - 1."""
    x = f_vf
    cfg = params.config.attention
    for j in range(len(cfg.head_widths)):
        x = ad.pointwise_linear(x, params.blocks[f"head/lin{j}/w"], params.blocks[f"head/lin{j}/b"])
        x = ad.relu(x)
    x = ad.pointwise_linear(x, params.blocks["head/out/w"], params.blocks["head/out/b"])
    return ad.affine(ad.sigmoid(x), 2.0, -1.0)


# ---------------------------------------------------------------------------
# Full forward passes


@dataclass
class CaseCache:
    """Per-case constants that depend only on geometry, reusable across steps."""

    driven_plan: EncoderPlan | None = None
    driver_plan: EncoderPlan | None = None
    closest_r: np.ndarray | None = None


def _prepare_cache(variant, driven_coords, driver_coords, cfg: EncoderConfig, cache: CaseCache | None):
    cache = cache or CaseCache()
    if variant in ("attention", "no_corr") and cache.driven_plan is None:
        cache.driven_plan = build_encoder_plan(driven_coords, cfg)
    if variant == "attention" and cache.driver_plan is None:
        cache.driver_plan = build_encoder_plan(driver_coords, cfg)
    if variant == "closest" and cache.closest_r is None:
        cache.closest_r = closest_point_matrix(
            PointSet(driven_coords, unit=NORMALIZED), PointSet(driver_coords, unit=NORMALIZED)
        )
    return cache


def forward(
    driven_coords: np.ndarray,
    driver_coords: np.ndarray,
    driver_disp: np.ndarray,
    params: ModelParams,
    cache: CaseCache | None = None,
    record: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Predict post-movement driven points. Returns (predicted points, movement).

    All inputs are normalized-frame float64 arrays; driver_disp is index-aligned
    with driver_coords. Passing a dict as `record` captures intermediate values
    (features, scores, correspondence) for inspection.
    """
    config = params.config
    driven_coords = np.asarray(driven_coords, dtype=np.float64)
    driver_coords = np.asarray(driver_coords, dtype=np.float64)
    driver_disp = np.asarray(driver_disp, dtype=np.float64)
    if driver_coords.shape != driver_disp.shape:
        raise ValueError("driver movement must be index-aligned with driver coords")
    cache = _prepare_cache(config.variant, driven_coords, driver_coords, config.encoder, cache)
    f_vb = movement_features(driver_coords, driver_disp, params)
    if config.variant == "attention":
        f_driven = run_encoder(cache.driven_plan, config.encoder, params, "driven_enc")
        f_driver = run_encoder(cache.driver_plan, config.encoder, params, "driver_enc")
        scores = correlation_scores(f_driven, f_driver, params)
        f_vf = transform_movement(scores, f_vb)
        if record is not None:
            record.update(
                f_driven=f_driven.values, f_driver=f_driver.values, scores=scores.values
            )
    elif config.variant == "no_corr":
        if driver_coords.shape[0] != config.n_points:
            raise ValueError(
                f"no_corr score head is built for {config.n_points} driver points, "
                f"got {driver_coords.shape[0]}"
            )
        f_driven = run_encoder(cache.driven_plan, config.encoder, params, "driven_enc")
        scores = ad.pointwise_linear(
            f_driven, params.blocks["attn/score/w"], params.blocks["attn/score/b"]
        )
        f_vf = transform_movement(scores, f_vb)
        if record is not None:
            record.update(f_driven=f_driven.values, scores=scores.values)
    else:  # closest
        f_vf = ad.matmul(Tensor(cache.closest_r), f_vb)
        if record is not None:
            record.update(scores=cache.closest_r)
    movement = predict_movement(f_vf, params)
    predicted = ad.add(movement, Tensor(driven_coords))
    if record is not None:
        record.update(f_vb=f_vb.values, f_vf=f_vf.values, movement=movement.values)
    return predicted, movement
