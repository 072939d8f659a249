"""Stage 1: the two-branch motion codec with finite scalar quantization.

Upper and lower body streams are encoded separately. Each branch is a
three-layer strided 1D CNN (temporal downsample 8x) plus a two-layer MLP
down to a 5-channel latent; quantization snaps each channel onto a fixed
per-channel grid (levels [7, 5, 5, 5, 5], 4375 cells) with a
straight-through gradient; the decoder mirrors the encoder with a
two-layer MLP and three transposed convolutions.

There is no learned codebook: a code is just the mixed-radix packing of
the per-channel levels, so encode/decode of indices is a pure bijection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import motion as MO
from . import tensor as T
from .checkpoint import config_hash, load_checkpoint, restore_into, save_checkpoint
from .errors import ConfigError, InputError, OutOfRangeError, ShapeError
from .motion import BodyPartSplit, Skeleton
from .nn import Adam, Linear, Module, Rng, fan_in_uniform
from .tensor import Parameter, Tensor

KERNEL_SIZE = 4
REFINE_KERNEL = 5
DOWNSAMPLE = 8


@dataclass
class FsqConfig:
    """Quantizer grid and codec width.

    Defaults are desk scale; ``paper_scale`` selects the full-width codec.
    """

    levels: tuple = (7, 5, 5, 5, 5)
    feature_dim: int = 64

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        if any(v < 2 for v in self.levels):
            raise ConfigError(f"every quantizer level count must be >= 2, got {self.levels}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")

    @property
    def latent_dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    @classmethod
    def paper_scale(cls) -> "FsqConfig":
        return cls(levels=(7, 5, 5, 5, 5), feature_dim=512)


@dataclass
class LossConfig:
    """Weights for the value/velocity/acceleration reconstruction terms."""

    velocity_weight: float = 0.5
    accel_weight: float = 0.25


@dataclass
class CodecTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple = (0.5, 0.99)
    seed: int = 0
    # Extra unstructured clips mixed into training to widen the code
    # distribution; drawn deterministically from the seed.
    noise_clips: int = 0


# ---------------------------------------------------------------------------
# Quantizer


def fsq_quantize(z: Tensor, levels: tuple):
    """Snap each latent channel onto its grid.

    Channel i is bounded to (0, L_i - 1) by a scaled sigmoid and rounded to
    the nearest integer level. The forward value is the level; the backward
    gradient is that of the bounded (pre-rounding) path, i.e. the rounding
    step is a straight-through identity. Returns (quantized Tensor,
    integer levels ndarray).
    """
    levels = np.asarray(levels, dtype=np.float64)
    if z.shape[-1] != levels.shape[0]:
        raise ShapeError(f"latent width {z.shape[-1]} != level count {levels.shape[0]}")
    span = Tensor(levels - 1.0)
    bounded = T.sigmoid(z) * span
    ints = np.round(bounded.data)
    quant = bounded + Tensor(ints - bounded.data)
    return quant, ints.astype(np.int64)


def normalize_levels(quant: Tensor, levels: tuple) -> Tensor:
    """Map level values from [0, L-1] onto [-1, 1] for the decoder."""
    span = np.asarray(levels, dtype=np.float64) - 1.0
    return quant * Tensor(2.0 / span) - 1.0


def levels_to_index(level_rows: np.ndarray, levels: tuple) -> np.ndarray:
    """Mixed-radix packing: index = sum_i level_i * prod_{j>i} L_j."""
    levels = np.asarray(levels, dtype=np.int64)
    rows = np.asarray(level_rows, dtype=np.int64)
    if rows.shape[-1] != levels.shape[0]:
        raise ShapeError(f"level rows end in {rows.shape[-1]}, expected {levels.shape[0]}")
    if (rows < 0).any() or (rows >= levels).any():
        raise OutOfRangeError(f"levels outside their ranges {tuple(levels)}")
    weights = np.concatenate([np.cumprod(levels[::-1])[::-1][1:], [1]])
    return (rows * weights).sum(axis=-1)


def index_to_levels(indices: np.ndarray, levels: tuple) -> np.ndarray:
    """Inverse mixed-radix unpacking."""
    levels = np.asarray(levels, dtype=np.int64)
    idx = np.asarray(indices, dtype=np.int64)
    k = int(np.prod(levels))
    if (idx < 0).any() or (idx >= k).any():
        raise OutOfRangeError(f"code index outside [0, {k})")
    out = np.empty(idx.shape + (levels.shape[0],), dtype=np.int64)
    rem = idx.copy()
    for i in range(levels.shape[0] - 1, -1, -1):
        out[..., i] = rem % levels[i]
        rem = rem // levels[i]
    return out


def codebook_utilization(code_arrays, codebook_size: int) -> float:
    """Fraction of the code grid observed across the given index arrays."""
    seen = set()
    for arr in code_arrays:
        seen.update(np.unique(np.asarray(arr)).tolist())
    return len(seen) / float(codebook_size)


# ---------------------------------------------------------------------------
# Networks


NS_ITERS = 16  # Newton-Schulz sweeps for the whitening inverse sqrt


def _inverse_sqrt_psd(cov: Tensor, dim: int) -> Tensor:
    """Differentiable inverse matrix square root of a small PSD matrix.

    Coupled Newton-Schulz iteration on the trace-normalized matrix; only
    matmuls, so gradients flow without a dedicated eigendecomposition op.
    Trace normalization puts every eigenvalue in (0, 1], inside the
    iteration's convergence region.
    """
    eye = Tensor(np.eye(dim))
    trace = T.reduce_sum(cov * eye, axis=(-2, -1), keepdims=True)
    y = cov / trace
    z = eye
    for _ in range(NS_ITERS):
        mid = (eye * 3.0 - T.matmul(z, y)) * 0.5
        y = T.matmul(y, mid)
        z = T.matmul(mid, z)
    return z / T.sqrt(trace)


class ConvEncoder(Module):
    """Three stride-2 convolutions then a two-channel-mixing MLP to the latent.

    The latent is whitened per clip over its latent steps (zero mean,
    identity covariance) and rescaled by a learned gain (init 2.0). The
    scale part is load-bearing: the raw network output is far too small to
    leave the central quantizer cell, every chunk collapses onto one code,
    and training stalls in a consensus trap; with it the pre-sigmoid spread
    covers all levels from step zero and can never saturate. The rotation
    part decorrelates the channels, which is what keeps the product grid
    filled: correlated channels would concentrate mass near a diagonal and
    leave most level combinations unreachable no matter how much data is
    encoded. A one-step clip degenerates to the middle code.
    """

    def __init__(self, width: int, cfg: FsqConfig, rng: Rng):
        super().__init__()
        f = cfg.feature_dim
        self.convs = [
            _conv_params(rng.child(f"conv{i}"), KERNEL_SIZE, cin, cout)
            for i, (cin, cout) in enumerate([(width, f), (f, f), (f, f)])
        ]
        self.mlp_hidden = Linear(f, f, rng.child("mlp_hidden"))
        self.mlp_out = Linear(f, cfg.latent_dim, rng.child("mlp_out"))
        self.prequant_gain = Parameter(np.full(cfg.latent_dim, 2.0))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2] % DOWNSAMPLE != 0:
            raise ShapeError(
                f"encoder input length {x.shape[-2]} not divisible by {DOWNSAMPLE}; caller must pad"
            )
        for w, b in self.convs:
            x = T.relu(T.conv1d(x, w, b, stride=2))
        x = T.relu(self.mlp_hidden(x))
        z = self.mlp_out(x)
        mean = T.reduce_mean(z, axis=-2, keepdims=True)
        zc = z - mean
        dim = zc.shape[-1]
        perm = tuple(range(zc.ndim - 2)) + (zc.ndim - 1, zc.ndim - 2)
        cov = T.matmul(T.transpose(zc, perm), zc) * (1.0 / zc.shape[-2])
        diag_mean = T.reduce_sum(cov * Tensor(np.eye(dim)), axis=(-2, -1), keepdims=True) * (1.0 / dim)
        cov = cov + Tensor(np.eye(dim)) * (diag_mean * 1e-3 + 1e-8)
        return T.matmul(zc, _inverse_sqrt_psd(cov, dim)) * self.prequant_gain


class ConvDecoder(Module):
    """Two-layer MLP, three stride-2 transposed convolutions, then a
    residual refinement pair at full frame rate.

    The transposed convolutions only give each output frame two taps per
    layer, which is too coarse to render smooth within-chunk trajectories;
    the stride-1 refinement convs add that detail. Their last layer is
    zero-initialised so the decoder starts exactly at ``output_bias`` (the
    rest pose of its body part): decoded frames must be valid rotation data
    from step zero, since the training loss runs kinematics on them and
    degenerate 6D columns are a hard error rather than something the chain
    repairs.
    """

    def __init__(self, width: int, cfg: FsqConfig, rng: Rng, output_bias: np.ndarray | None = None):
        super().__init__()
        f = cfg.feature_dim
        self.mlp_in = Linear(cfg.latent_dim, f, rng.child("mlp_in"))
        self.mlp_hidden = Linear(f, f, rng.child("mlp_hidden"))
        self.tconvs = [
            _conv_params(
                rng.child(f"tconv{i}"), KERNEL_SIZE, cin, cout,
                gain=0.5 if i == 2 else 1.0,
            )
            for i, (cin, cout) in enumerate([(f, f), (f, f), (f, width)])
        ]
        if output_bias is not None:
            if output_bias.shape != (width,):
                raise ShapeError(f"output bias must have shape ({width},), got {output_bias.shape}")
            self.tconvs[-1][1].data = np.asarray(output_bias, dtype=np.float64).copy()
        self.refine = [
            _conv_params(rng.child("refine0"), REFINE_KERNEL, width, f),
            _conv_params(rng.child("refine1"), REFINE_KERNEL, f, width, gain=0.0),
        ]

    def __call__(self, z: Tensor) -> Tensor:
        x = T.relu(self.mlp_in(z))
        x = T.relu(self.mlp_hidden(x))
        for i, (w, b) in enumerate(self.tconvs):
            x = T.conv1d_transpose(x, w, b, stride=2)
            if i < len(self.tconvs) - 1:
                x = T.relu(x)
        r = T.relu(T.conv1d(x, self.refine[0][0], self.refine[0][1], stride=1))
        return x + T.conv1d(r, self.refine[1][0], self.refine[1][1], stride=1)


def _conv_params(rng: Rng, kernel: int, cin: int, cout: int, gain: float = 1.0):
    w = Parameter(fan_in_uniform(rng.child("weight"), (kernel, cin, cout), kernel * cin, gain))
    b = Parameter(np.zeros(cout))
    return w, b


def _rest_pose_bias(joint_count: int, with_translation: bool) -> np.ndarray:
    """Identity rotation (1,0,0,0,1,0) per joint, zero translation."""
    ident = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    parts = ([np.zeros(3)] if with_translation else []) + [ident] * joint_count
    return np.concatenate(parts)


class CodecModel(Module):
    """Both body-part branches plus the shared quantizer grid."""

    def __init__(self, cfg: FsqConfig, split: BodyPartSplit | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.split = split or BodyPartSplit.default()
        rng = Rng(seed).child("codec")
        self.upper_encoder = ConvEncoder(self.split.upper_width, cfg, rng.child("upper_encoder"))
        self.upper_decoder = ConvDecoder(
            self.split.upper_width, cfg, rng.child("upper_decoder"),
            output_bias=_rest_pose_bias(len(self.split.upper), with_translation=False),
        )
        self.lower_encoder = ConvEncoder(self.split.lower_width, cfg, rng.child("lower_encoder"))
        self.lower_decoder = ConvDecoder(
            self.split.lower_width, cfg, rng.child("lower_decoder"),
            output_bias=_rest_pose_bias(len(self.split.lower), with_translation=True),
        )

    def reconstruct(self, frames: Tensor):
        """Full differentiable pass; returns (frames_hat, upper codes, lower codes)."""
        upper, lower = MO.split_body(frames, self.split)
        qu, cu = fsq_quantize(self.upper_encoder(upper), self.cfg.levels)
        ql, cl = fsq_quantize(self.lower_encoder(lower), self.cfg.levels)
        upper_hat = self.upper_decoder(normalize_levels(qu, self.cfg.levels))
        lower_hat = self.lower_decoder(normalize_levels(ql, self.cfg.levels))
        frames_hat = MO.merge_body(upper_hat, lower_hat, self.split)
        return frames_hat, cu, cl

    def encode(self, frames: np.ndarray) -> "LatentCodeSequence":
        with T.no_grad():
            upper, lower = MO.split_body(Tensor(frames), self.split)
            _, cu = fsq_quantize(self.upper_encoder(upper), self.cfg.levels)
            _, cl = fsq_quantize(self.lower_encoder(lower), self.cfg.levels)
        return LatentCodeSequence(
            upper=levels_to_index(cu, self.cfg.levels),
            lower=levels_to_index(cl, self.cfg.levels),
            codebook_size=self.cfg.codebook_size,
        )

    def decode(self, codes: "LatentCodeSequence") -> np.ndarray:
        if codes.codebook_size != self.cfg.codebook_size:
            raise ConfigError(
                f"codes use a {codes.codebook_size}-cell grid, codec has {self.cfg.codebook_size}"
            )
        with T.no_grad():
            qu = Tensor(index_to_levels(codes.upper, self.cfg.levels).astype(np.float64))
            ql = Tensor(index_to_levels(codes.lower, self.cfg.levels).astype(np.float64))
            upper_hat = self.upper_decoder(normalize_levels(qu, self.cfg.levels))
            lower_hat = self.lower_decoder(normalize_levels(ql, self.cfg.levels))
            frames = MO.merge_body(upper_hat, lower_hat, self.split)
        return frames.data


# ---------------------------------------------------------------------------
# Latent code sequences and their file format


@dataclass
class LatentCodeSequence:
    upper: np.ndarray
    lower: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.upper = np.asarray(self.upper, dtype=np.int64)
        self.lower = np.asarray(self.lower, dtype=np.int64)
        if self.upper.shape != self.lower.shape or self.upper.ndim != 1:
            raise ShapeError(
                f"code streams must be 1-d and equal length, got {self.upper.shape} / {self.lower.shape}"
            )
        for name, arr in (("upper", self.upper), ("lower", self.lower)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.codebook_size):
                raise OutOfRangeError(
                    f"{name} codes outside [0, {self.codebook_size})"
                )

    @property
    def latent_len(self) -> int:
        return self.upper.shape[0]


CODES_FORMAT = "dancegen-codes"
CODES_VERSION = 1


def write_codes_file(path, codes: LatentCodeSequence) -> None:
    with open(path, "w") as fh:
        fh.write(f"#format {CODES_FORMAT} v{CODES_VERSION}\n")
        fh.write(f"#latent_len {codes.latent_len}\n")
        fh.write(f"#codebook_size {codes.codebook_size}\n")
        fh.write("upper " + " ".join(str(int(c)) for c in codes.upper) + "\n")
        fh.write("lower " + " ".join(str(int(c)) for c in codes.lower) + "\n")


def read_codes_file(path) -> LatentCodeSequence:
    from .motion import _header_and_rows
    from .errors import FormatError

    header, rows, body_start = _header_and_rows(path, CODES_FORMAT, CODES_VERSION)
    try:
        latent_len = int(header["latent_len"])
        k = int(header["codebook_size"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad or missing header field: {e}") from None
    streams = {}
    for i, row in enumerate(rows):
        parts = row.split()
        if not parts:
            continue
        label, values = parts[0], parts[1:]
        if label not in ("upper", "lower"):
            raise FormatError(f"{path}: line {body_start + i + 1}: unknown stream {label!r}")
        if len(values) != latent_len:
            raise FormatError(
                f"{path}: line {body_start + i + 1}: expected {latent_len} codes, got {len(values)}"
            )
        try:
            streams[label] = np.array([int(v) for v in values], dtype=np.int64)
        except ValueError as e:
            raise FormatError(f"{path}: line {body_start + i + 1}: {e}") from None
    if set(streams) != {"upper", "lower"}:
        raise FormatError(f"{path}: needs exactly one 'upper' and one 'lower' stream")
    try:
        return LatentCodeSequence(streams["upper"], streams["lower"], k)
    except OutOfRangeError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# Loss and training


def reconstruction_loss(
    frames_hat: Tensor,
    frames: Tensor,
    joints_hat: Tensor,
    joints: Tensor,
    cfg: LossConfig,
) -> Tensor:
    """L1 on values, velocities, and accelerations, on both the rotation
    representation and the joint positions; all terms mean-reduced."""

    def track(a, b):
        loss = T.l1_distance(a, b)
        loss = loss + cfg.velocity_weight * T.l1_distance(
            MO.finite_difference(a, 1), MO.finite_difference(b, 1)
        )
        loss = loss + cfg.accel_weight * T.l1_distance(
            MO.finite_difference(a, 2), MO.finite_difference(b, 2)
        )
        return loss

    return track(frames_hat, frames) + track(joints_hat, joints)


def _flatten_joints(positions: Tensor) -> Tensor:
    shape = positions.shape
    return positions.reshape(shape[:-2] + (shape[-2] * shape[-1],))


def train_codec(
    clips,
    cfg: FsqConfig | None = None,
    loss_cfg: LossConfig | None = None,
    train_cfg: CodecTrainConfig | None = None,
    skeleton: Skeleton | None = None,
):
    """Train the codec on a list of [T, 147] clips; returns (model, loss log).

    Ground-truth joint positions are precomputed once per clip. Every step
    samples a batch, runs the differentiable reconstruct pass, and applies
    one Adam update.
    """
    cfg = cfg or FsqConfig()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or CodecTrainConfig()
    skeleton = skeleton or Skeleton.default()

    clips = [np.asarray(c.frames if isinstance(c, MO.MotionSequence) else c) for c in clips]
    if not clips:
        raise InputError("codec training needs at least one clip")
    lengths = {c.shape[0] for c in clips}
    if len(lengths) != 1:
        raise ShapeError(f"all training clips must share one length, got {sorted(lengths)}")

    rng = np.random.default_rng(train_cfg.seed)
    if train_cfg.noise_clips > 0:
        from .music import random_motion_clip

        t_len = clips[0].shape[0]
        clips = clips + [
            random_motion_clip(rng, t_len).frames for _ in range(train_cfg.noise_clips)
        ]

    stack = np.stack(clips)  # [N, T, 147]
    joints = MO.forward_kinematics(stack, skeleton)  # [N, T, 24, 3]
    joints_flat = joints.reshape(joints.shape[0], joints.shape[1], -1)

    model = CodecModel(cfg, seed=train_cfg.seed)
    optim = Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
    losses = []
    n = stack.shape[0]
    batch = min(train_cfg.batch_size, n)
    for step in range(train_cfg.steps):
        idx = rng.choice(n, size=batch, replace=False)
        frames = Tensor(stack[idx])
        frames_hat, _, _ = model.reconstruct(frames)
        joints_hat = _flatten_joints(MO.forward_kinematics(frames_hat, skeleton))
        loss = reconstruction_loss(
            frames_hat, frames, joints_hat, Tensor(joints_flat[idx]), loss_cfg
        )
        optim.zero_grad()
        loss.backward()
        optim.step()
        losses.append(loss.item())
    return model, losses


# ---------------------------------------------------------------------------
# Checkpoint plumbing

CODEC_STAGE = "codec"


def codec_config_dict(cfg: FsqConfig, split: BodyPartSplit, loss_cfg: LossConfig | None = None) -> dict:
    loss_cfg = loss_cfg or LossConfig()
    return {
        "levels": list(cfg.levels),
        "feature_dim": cfg.feature_dim,
        "lower_joints": list(split.lower),
        "upper_joints": list(split.upper),
        "velocity_weight": loss_cfg.velocity_weight,
        "accel_weight": loss_cfg.accel_weight,
    }


def save_codec(path, model: CodecModel, loss_cfg: LossConfig | None = None) -> None:
    config = codec_config_dict(model.cfg, model.split, loss_cfg)
    save_checkpoint(path, CODEC_STAGE, config, model.named_parameters())


def load_codec(path) -> CodecModel:
    _, config, params, _ = load_checkpoint(path, expected_stage=CODEC_STAGE)
    cfg = FsqConfig(levels=tuple(config["levels"]), feature_dim=config["feature_dim"])
    split = BodyPartSplit(tuple(config["lower_joints"]), tuple(config["upper_joints"]))
    model = CodecModel(cfg, split)
    restore_into(model, params)
    return model
