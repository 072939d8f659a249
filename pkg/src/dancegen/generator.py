"""Stage 2: the genre-routed mixture-of-experts sequence model over codes.

Three token streams (pooled music, upper codes, lower codes) run through a
stack of MoE layers. Each layer holds one expert per genre plus one
always-on shared expert; a hard router picks the genre expert, so every
other genre's weights see exactly zero gradient. An expert applies a
selective-state-space block per stream, then concatenates the streams
along time and runs masked multi-head attention and a feed-forward, all
residual.

The attention mask is the same sliding-window pattern in all nine stream
blocks: row i sees [w(i), i], where the window start w(i) stays 0 for the
first ``autoregressive_step`` rows and afterwards advances in multiples
of ``window_step``. Generation just replays this mask: every new code is
sampled from a forward pass over the full prefix, and the mask itself
truncates old context once the window engages, which keeps inference
visibility identical to what training saw.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .codec import LatentCodeSequence
from .errors import (
    ConfigError,
    ContractError,
    InputError,
    RoutingError,
    ShapeError,
)
from .nn import Adam, Dropout, Linear, Module, Rng
from .tensor import Parameter, Tensor


@dataclass
class GadgConfig:
    """Desk-scale defaults; ``paper_scale`` selects the full-size stack."""

    model_dim: int = 128
    num_genres: int = 4
    num_layers: int = 2
    num_heads: int = 8
    ff_dim: int = 512
    dropout: float = 0.25
    state_dim: int = 16
    conv_kernel: int = 4
    expand: int = 2
    autoregressive_step: int = 22
    window_step: int = 8
    codebook_size: int = 4375
    music_dim: int = 35
    frames_per_code: int = 8
    max_positions: int = 256
    head_gain: float = 0.02

    def __post_init__(self):
        for name in ("model_dim", "num_genres", "num_layers", "num_heads", "ff_dim",
                     "state_dim", "conv_kernel", "expand", "autoregressive_step",
                     "window_step", "codebook_size", "music_dim", "frames_per_code",
                     "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def dt_rank(self) -> int:
        return max(1, self.model_dim // 16)

    @classmethod
    def paper_scale(cls) -> "GadgConfig":
        return cls(model_dim=512, num_genres=16, num_layers=6, ff_dim=2048)


@dataclass
class GeneratorTrainConfig:
    steps: int = 3000
    batch_size: int = 4
    lr: float = 3e-4
    betas: tuple = (0.9, 0.99)
    seed: int = 0


# ---------------------------------------------------------------------------
# Sliding-window attention mask


def row_window(i: int, a_step: int, s: int) -> int:
    """First visible column for row i: 0 until a_step, then the window
    start jumps forward s columns every s rows."""
    if i < a_step:
        return 0
    return ((i - a_step) // s + 1) * s


def build_sliding_mask(t_latent: int, a_step: int, s: int) -> np.ndarray:
    """[3T, 3T] additive mask of {0, -inf}, the same T x T sliding-window
    block tiled over all nine stream-pair blocks."""
    if t_latent < 1 or a_step < 1 or s < 1:
        raise ContractError(
            f"mask arguments must be >= 1, got T'={t_latent}, a_step={a_step}, s={s}"
        )
    i = np.arange(t_latent)[:, None]
    j = np.arange(t_latent)[None, :]
    w = np.where(i < a_step, 0, ((i - a_step) // s + 1) * s)
    block = np.where((j <= i) & (j >= w), 0.0, -np.inf)
    return np.tile(block, (3, 3))


# ---------------------------------------------------------------------------
# Selective state-space pieces


def _wrap(x):
    if isinstance(x, Tensor):
        return x, False
    return Tensor(np.asarray(x, dtype=np.float64)), True


def mamba_discretize(a, b, dt):
    """Zero-order-hold discretization of h' = a h + b x, elementwise.

    abar = exp(dt*a); bbar = dt * b * phi1(dt*a) with phi1(u) = (e^u - 1)/u,
    which is the exact matrix formula restricted to a diagonal state matrix.
    dt must be strictly positive.
    """
    at, pa = _wrap(a)
    bt, pb = _wrap(b)
    dtt, pd = _wrap(dt)
    if (dtt.data <= 0).any():
        raise ContractError("discretization step dt must be strictly positive")
    u = dtt * at
    abar = T.exp(u)
    bbar = dtt * bt * T.expm1_over(u)
    if pa and pb and pd:
        return abar.data, bbar.data
    return abar, bbar


def selective_scan(x, a_diag, b_seq, c_seq, dt, skip=None, parallel: bool = False):
    """y_t = c_t . h_t with h_t = abar_t h_{t-1} + bbar_t x_t, h_{-1} = 0.

    Shapes: x [T, D], a_diag [D, N], b_seq [T, N], c_seq [T, N], dt [T, D].
    The sequential recurrence is the reference; ``parallel`` switches to an
    associative doubling evaluation (forward only, no tape) that must agree
    to 1e-10.
    """
    x, _ = _wrap(x)
    a_diag, _ = _wrap(a_diag)
    b_seq, _ = _wrap(b_seq)
    c_seq, _ = _wrap(c_seq)
    dt, _ = _wrap(dt)
    t_len, d_inner = x.shape
    n = a_diag.shape[-1]
    abar, bbar = mamba_discretize(
        a_diag.reshape((1, d_inner, n)),
        b_seq.reshape((t_len, 1, n)),
        dt.reshape((t_len, d_inner, 1)),
    )
    drive = bbar * x.reshape((t_len, d_inner, 1))
    if parallel:
        h = Tensor(T.parallel_linear_recurrence(abar.data, drive.data))
    else:
        h = T.linear_recurrence(abar, drive)
    y = T.reduce_sum(h * c_seq.reshape((t_len, 1, n)), axis=-1)
    if skip is not None:
        skip, _ = _wrap(skip)
        y = y + skip * x
    return y


def _causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal conv along time: out_t = sum_k w_k x_{t-K+1+k}."""
    t_len, channels = x.shape
    kernel = weight.shape[0]
    padded = T.concat([Tensor(np.zeros((kernel - 1, channels))), x], axis=0)
    out = None
    for k in range(kernel):
        term = T.narrow(padded, 0, k, t_len) * T.narrow(weight, 0, k, 1).reshape((channels,))
        out = term if out is None else out + term
    return out + bias


class MambaBlock(Module):
    """Gated selective-SSM block: in-projection, causal depthwise conv,
    input-dependent (dt, B, C), diagonal-A scan, silu gate, out-projection."""

    def __init__(self, cfg: GadgConfig, rng: Rng):
        super().__init__()
        dim = cfg.model_dim
        d_inner = cfg.expand * dim
        n = cfg.state_dim
        self.cfg = cfg
        self.in_proj = Linear(dim, 2 * d_inner, rng.child("in_proj"))
        self.conv_weight = Parameter(
            rng.child("conv_weight").uniform((cfg.conv_kernel, d_inner), -0.5, 0.5)
            / np.sqrt(cfg.conv_kernel)
        )
        self.conv_bias = Parameter(np.zeros(d_inner))
        self.x_proj = Linear(d_inner, cfg.dt_rank + 2 * n, rng.child("x_proj"), bias=False)
        self.dt_proj = Linear(cfg.dt_rank, d_inner, rng.child("dt_proj"))
        # start each channel's step in [1e-3, 1e-1] so exp(dt*a) is neither
        # frozen at 1 nor collapsed to 0
        dt_init = np.exp(rng.child("dt_init").uniform((d_inner,), np.log(1e-3), np.log(1e-1)))
        self.dt_proj.bias.data = np.log(np.expm1(dt_init))
        # a = -exp(a_log) keeps the state matrix strictly negative however
        # a_log moves during training
        self.a_log = Parameter(np.log(np.tile(np.arange(1.0, n + 1.0), (d_inner, 1))))
        self.skip = Parameter(np.ones(d_inner))
        self.out_proj = Linear(d_inner, dim, rng.child("out_proj"))

    def __call__(self, x: Tensor) -> Tensor:
        d_inner = self.cfg.expand * self.cfg.model_dim
        n = self.cfg.state_dim
        xz = self.in_proj(x)
        xi = T.narrow(xz, 1, 0, d_inner)
        gate = T.narrow(xz, 1, d_inner, d_inner)
        xi = T.silu(_causal_depthwise_conv(xi, self.conv_weight, self.conv_bias))
        proj = self.x_proj(xi)
        dt_in = T.narrow(proj, 1, 0, self.cfg.dt_rank)
        b_seq = T.narrow(proj, 1, self.cfg.dt_rank, n)
        c_seq = T.narrow(proj, 1, self.cfg.dt_rank + n, n)
        dt = T.softplus(self.dt_proj(dt_in)) + 1e-9
        y = selective_scan(
            xi, -T.exp(self.a_log), b_seq, c_seq, dt,
            skip=self.skip, parallel=not T.grad_enabled(),
        )
        return self.out_proj(y * T.silu(gate))


# ---------------------------------------------------------------------------
# Expert blocks and hard routing


class MultiheadAttention(Module):
    def __init__(self, cfg: GadgConfig, rng: Rng):
        super().__init__()
        self.heads = cfg.num_heads
        self.head_dim = cfg.model_dim // cfg.num_heads
        self.qkv = Linear(cfg.model_dim, 3 * cfg.model_dim, rng.child("qkv"))
        self.out = Linear(cfg.model_dim, cfg.model_dim, rng.child("out"))

    def __call__(self, x: Tensor, mask: Tensor) -> Tensor:
        length, dim = x.shape
        qkv = self.qkv(x)

        def head_view(start):
            part = T.narrow(qkv, 1, start, dim)
            return T.transpose(part.reshape((length, self.heads, self.head_dim)), (1, 0, 2))

        q, k, v = head_view(0), head_view(dim), head_view(2 * dim)
        # (QK^T + M) / sqrt(C) distributed over the sum: the mask entries are
        # 0 or -inf, both fixed points of the scaling, and keeping the infs
        # out of the product spares the tape from 0 * inf in the backward pass
        scores = q @ T.transpose(k, (0, 2, 1)) * (1.0 / np.sqrt(self.head_dim)) + mask
        weights = T.softmax_lastdim(scores)
        mixed = T.transpose(weights @ v, (1, 0, 2)).reshape((length, dim))
        return self.out(mixed)


class Expert(Module):
    """One expert: per-stream SSM blocks, then joint masked attention and a
    feed-forward over the concatenated streams, every stage residual."""

    def __init__(self, cfg: GadgConfig, rng: Rng):
        super().__init__()
        self.music_mamba = MambaBlock(cfg, rng.child("music_mamba"))
        self.upper_mamba = MambaBlock(cfg, rng.child("upper_mamba"))
        self.lower_mamba = MambaBlock(cfg, rng.child("lower_mamba"))
        self.attn = MultiheadAttention(cfg, rng.child("attn"))
        self.ff_in = Linear(cfg.model_dim, cfg.ff_dim, rng.child("ff_in"))
        self.ff_out = Linear(cfg.ff_dim, cfg.model_dim, rng.child("ff_out"))
        self.drop_mid = Dropout(cfg.dropout, rng.child("drop_mid"))
        self.drop_out = Dropout(cfg.dropout, rng.child("drop_out"))

    def __call__(self, streams, mask: Tensor):
        music, upper, lower = streams
        t_len = music.shape[0]
        if upper.shape[0] != t_len or lower.shape[0] != t_len:
            raise ShapeError(
                f"stream lengths differ: {music.shape[0]}, {upper.shape[0]}, {lower.shape[0]}"
            )
        music = music + self.music_mamba(music)
        upper = upper + self.upper_mamba(upper)
        lower = lower + self.lower_mamba(lower)
        x = T.concat([music, upper, lower], axis=0)
        x = x + self.attn(x, mask)
        x = x + self.drop_out(self.ff_out(self.drop_mid(T.relu(self.ff_in(x)))))
        return (
            T.narrow(x, 0, 0, t_len),
            T.narrow(x, 0, t_len, t_len),
            T.narrow(x, 0, 2 * t_len, t_len),
        )


class MoeLayer(Module):
    """Hard routing: genre expert + shared expert, each contributing its
    residual delta once. Output = spec(x) + shared(x) - x."""

    def __init__(self, cfg: GadgConfig, rng: Rng):
        super().__init__()
        self.specialized = [Expert(cfg, rng.child(f"specialized{g}")) for g in range(cfg.num_genres)]
        self.universal = Expert(cfg, rng.child("universal"))

    def __call__(self, streams, genre_id: int, mask: Tensor):
        if not 0 <= genre_id < len(self.specialized):
            raise RoutingError(
                f"genre id {genre_id} outside [0, {len(self.specialized)})"
            )
        spec = self.specialized[genre_id](streams, mask)
        shared = self.universal(streams, mask)
        return tuple(s + u - x for s, u, x in zip(spec, shared, streams))


# ---------------------------------------------------------------------------
# Full model


class GadgModel(Module):
    """Code/genre/position/stream embeddings, MoE stack, two output heads.

    Code tables carry one extra row (index = codebook_size) used as the
    start token when no previous code exists.
    """

    def __init__(self, cfg: GadgConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = Rng(seed).child("gadg")
        k, dim = cfg.codebook_size, cfg.model_dim
        self.upper_table = Parameter(rng.child("upper_table").normal((k + 1, dim), 0.02))
        self.lower_table = Parameter(rng.child("lower_table").normal((k + 1, dim), 0.02))
        self.genre_table = Parameter(rng.child("genre_table").normal((cfg.num_genres, dim), 0.02))
        self.pos_table = Parameter(rng.child("pos_table").normal((cfg.max_positions, dim), 0.02))
        self.stream_table = Parameter(rng.child("stream_table").normal((3, dim), 0.02))
        self.music_in = Linear(cfg.music_dim, dim, rng.child("music_in"))
        self.music_out = Linear(dim, dim, rng.child("music_out"))
        self.layers = [MoeLayer(cfg, rng.child(f"layer{i}")) for i in range(cfg.num_layers)]
        # near-zero heads put the initial logits close to uniform
        self.upper_head = Linear(dim, k, rng.child("upper_head"), gain=cfg.head_gain)
        self.lower_head = Linear(dim, k, rng.child("lower_head"), gain=cfg.head_gain)

    @property
    def start_token(self) -> int:
        return self.cfg.codebook_size

    def forward(self, music_pooled, genre_id: int, upper_in: np.ndarray, lower_in: np.ndarray):
        """Logits ([T', k], [T', k]) for the next upper/lower codes.

        music_pooled is [T', music_dim] (one row per code step); upper_in
        and lower_in are the shifted input codes, start token first.
        """
        cfg = self.cfg
        if not 0 <= genre_id < cfg.num_genres:
            raise RoutingError(f"genre id {genre_id} outside [0, {cfg.num_genres})")
        music, _ = _wrap(music_pooled)
        upper_in = np.asarray(upper_in, dtype=np.int64)
        lower_in = np.asarray(lower_in, dtype=np.int64)
        t_len = upper_in.shape[0]
        if music.shape != (t_len, cfg.music_dim):
            raise ShapeError(
                f"music stream must be [{t_len}, {cfg.music_dim}], got {music.shape}"
            )
        if lower_in.shape != (t_len,):
            raise ShapeError("upper/lower input code lengths differ")
        if t_len > cfg.max_positions:
            raise ShapeError(
                f"sequence length {t_len} exceeds positional table {cfg.max_positions}"
            )
        pos = T.embedding(self.pos_table, np.arange(t_len))

        def stream_tag(idx):
            return T.embedding(self.stream_table, np.full(t_len, idx))

        genre_vec = T.embedding(self.genre_table, np.full(t_len, genre_id))
        music = self.music_out(T.relu(self.music_in(music))) + genre_vec + pos + stream_tag(0)
        upper = T.embedding(self.upper_table, upper_in) + pos + stream_tag(1)
        lower = T.embedding(self.lower_table, lower_in) + pos + stream_tag(2)

        mask = Tensor(build_sliding_mask(t_len, cfg.autoregressive_step, cfg.window_step))
        streams = (music, upper, lower)
        for layer in self.layers:
            streams = layer(streams, genre_id, mask)
        return self.upper_head(streams[1]), self.lower_head(streams[2])


# ---------------------------------------------------------------------------
# Losses and training


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level CE; the max-shift is detached so it only stabilizes."""
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ShapeError(f"targets outside [0, {k})")
    shifted = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    lse = T.log(T.reduce_sum(T.exp(shifted), axis=-1))
    picked = T.take_along_last(shifted, targets)
    return T.reduce_mean(lse - picked)


def pool_music(frames: np.ndarray, window: int) -> np.ndarray:
    """Average music features over each window of frames: [T, F] -> [T/w, F]."""
    frames = np.asarray(frames, dtype=np.float64)
    t_len = frames.shape[0]
    if t_len % window != 0:
        raise ShapeError(f"music length {t_len} not divisible by pool window {window}")
    return frames.reshape(t_len // window, window, frames.shape[1]).mean(axis=1)


def shifted_inputs(codes: LatentCodeSequence, start_token: int):
    upper = np.concatenate([[start_token], codes.upper[:-1]])
    lower = np.concatenate([[start_token], codes.lower[:-1]])
    return upper, lower


def teacher_forced_loss(model: GadgModel, music_pooled, genre_id: int,
                        codes: LatentCodeSequence) -> Tensor:
    """CE of each position's logits against the next code, both body parts."""
    upper_in, lower_in = shifted_inputs(codes, model.start_token)
    logits_u, logits_l = model.forward(music_pooled, genre_id, upper_in, lower_in)
    return cross_entropy(logits_u, codes.upper) + cross_entropy(logits_l, codes.lower)


def train_generator(dataset, cfg: GadgConfig | None = None,
                    train_cfg: GeneratorTrainConfig | None = None):
    """Teacher-forced training on (music, genre_id, codes) triples.

    Music may be a MusicFeatureSequence or a raw [T, 35] array; it is
    average-pooled to one row per code step. Returns (model, loss log).
    """
    cfg = cfg or GadgConfig()
    train_cfg = train_cfg or GeneratorTrainConfig()
    if not dataset:
        raise InputError("generator training needs at least one sequence")

    prepared = []
    for music, genre_id, codes in dataset:
        frames = getattr(music, "frames", music)
        pooled = pool_music(frames, cfg.frames_per_code)
        if pooled.shape[0] != codes.latent_len:
            raise ShapeError(
                f"music pools to {pooled.shape[0]} steps but codes have {codes.latent_len}"
            )
        if codes.codebook_size != cfg.codebook_size:
            raise ConfigError(
                f"codes use a {codes.codebook_size}-way codebook, model expects {cfg.codebook_size}"
            )
        prepared.append((pooled, int(genre_id), codes))

    model = GadgModel(cfg, seed=train_cfg.seed)
    optim = Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
    rng = np.random.default_rng(train_cfg.seed)
    losses = []
    batch = min(train_cfg.batch_size, len(prepared))
    for _ in range(train_cfg.steps):
        idx = rng.choice(len(prepared), size=batch, replace=False)
        optim.zero_grad()
        total = None
        for i in idx:
            pooled, genre_id, codes = prepared[i]
            loss = teacher_forced_loss(model, pooled, genre_id, codes)
            total = loss if total is None else total + loss
        total = total * (1.0 / batch)
        total.backward()
        optim.step()
        losses.append(total.item())
    return model, losses


# ---------------------------------------------------------------------------
# Generation


def _sample_code(logits: np.ndarray, rng, top_k, temperature: float) -> int:
    if top_k is None:
        return int(np.argmax(logits))
    if top_k < 1:
        raise InputError(f"top_k must be >= 1, got {top_k}")
    kept = np.argsort(logits)[::-1][:top_k]
    scaled = logits[kept] / temperature
    scaled = scaled - scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(kept, p=probs))


def generate(model: GadgModel, music_frames: np.ndarray, genre_id: int,
             duration_frames: int, top_k: int | None = None,
             temperature: float = 1.0, seed: int = 0) -> LatentCodeSequence:
    """Emit codes for ``duration_frames`` of motion.

    Each step runs the model on the full emitted prefix under the training
    mask and samples the next upper and lower code from the final position
    of one shared forward pass. The first ``autoregressive_step`` codes see
    everything before them; afterwards the mask's sliding window drops
    context in ``window_step`` chunks, matching the windowed long-sequence
    procedure the mask encodes. Argmax by default; ``top_k`` switches to
    seeded categorical sampling.
    """
    cfg = model.cfg
    if duration_frames <= 0:
        raise InputError("duration must be positive; nothing to generate")
    if duration_frames % cfg.frames_per_code != 0:
        raise InputError(
            f"duration {duration_frames} is not a multiple of {cfg.frames_per_code} frames per code"
        )
    t_target = duration_frames // cfg.frames_per_code
    if t_target > cfg.max_positions:
        raise InputError(
            f"{t_target} code steps exceed the model's positional range {cfg.max_positions}"
        )
    frames = np.asarray(getattr(music_frames, "frames", music_frames), dtype=np.float64)
    if frames.shape[0] < duration_frames:
        raise ShapeError(
            f"music covers {frames.shape[0]} frames, need {duration_frames}"
        )
    pooled = pool_music(frames[:duration_frames], cfg.frames_per_code)

    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    upper: list[int] = []
    lower: list[int] = []
    start = model.start_token
    try:
        with T.no_grad():
            for n in range(t_target):
                upper_in = np.array([start] + upper, dtype=np.int64)
                lower_in = np.array([start] + lower, dtype=np.int64)
                logits_u, logits_l = model.forward(pooled[: n + 1], genre_id, upper_in, lower_in)
                upper.append(_sample_code(logits_u.data[-1], rng, top_k, temperature))
                lower.append(_sample_code(logits_l.data[-1], rng, top_k, temperature))
    finally:
        model.train(was_training)
    return LatentCodeSequence(np.array(upper), np.array(lower), cfg.codebook_size)


# ---------------------------------------------------------------------------
# Checkpoint plumbing

GENERATOR_STAGE = "generator"


def save_generator(path, model: GadgModel) -> None:
    save_checkpoint(path, GENERATOR_STAGE, asdict(model.cfg), model.named_parameters())


def load_generator(path) -> GadgModel:
    _, config, params, _ = load_checkpoint(path, expected_stage=GENERATOR_STAGE)
    model = GadgModel(GadgConfig(**config))
    restore_into(model, params)
    return model
