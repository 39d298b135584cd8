"""Conditional latent denoiser: U-Net with spatial sequence mixers and cross-attention.

Each resolution level runs a residual conv block (timestep added), a sequence mixer
over the raster-flattened feature map (bidirectional Mamba, self-attention, or none)
and cross-attention onto the conditioning tokens. A ControlNet-style branch (trainable
copy of conv_in + encoder + mid, joined through zero-initialised 1x1 convs) injects the
baseline latent in the second training stage while the main network stays frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import (
    Adam,
    Conv2d,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    concat,
    hash_parameters,
    matmul,
    reshape,
    silu,
    softmax,
    swapaxes,
)
from .autograd import functional as F
from .autograd.tensor import NonFiniteError, ShapeError
from .diffusion import NoiseSchedule, eps_loss
from .phantoms import ConditioningVector
from .ssm import (
    MambaBlock,
    SelfAttention,
    SequenceLayout,
    bidirectional,
    flatten_spatial,
    unflatten_spatial,
)

COND_SCALARS = 9     # projected age, acquisition age, sex, genetic flag, 5 volumes
COND_CLASSES = 3     # disease status one-hot
COND_DIM = COND_SCALARS + COND_CLASSES
NUM_TOKENS = COND_SCALARS + 2   # + status token + timestep token
MIXERS = ("mamba", "attention", "none")


@dataclass
class UNetConfig:
    latent_channels: int = 4
    latent_size: int = 8
    base_width: int = 64
    channel_mult: tuple = (1, 2)
    blocks_per_level: int = 1
    d_state: int = 16
    token_dim: int = 64
    time_dim: int | None = None      # defaults to base_width
    mixer: str = "mamba"

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        if self.time_dim is None:
            self.time_dim = self.base_width
        if min(self.latent_channels, self.base_width, self.token_dim, self.time_dim, self.d_state) < 1:
            raise ValueError("widths must be positive")
        if len(self.channel_mult) < 2:
            raise ValueError("need at least 2 resolution levels")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if self.latent_size % 2 ** (len(self.channel_mult) - 1):
            raise ValueError("latent size must be divisible by 2^(levels-1)")
        if self.mixer not in MIXERS:
            raise ValueError(f"mixer must be one of {MIXERS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


def cond_matrix(conds) -> np.ndarray:
    """Stack conditioning vectors into ``[B, 12]``: 9 scalars then the status one-hot."""
    if isinstance(conds, np.ndarray):
        m = np.atleast_2d(conds).astype(np.float64)
    else:
        if isinstance(conds, ConditioningVector):
            conds = [conds]
        m = np.array([np.concatenate([c.scalars(), c.disease_status]) for c in conds], dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != COND_DIM:
        raise ShapeError(f"conditioning must be [B, {COND_DIM}], got {m.shape}")
    return m


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding ``[B, dim]`` with cos in the first half, sin in the second."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class CondEmbedder(Module):
    """Conditioning scalars, status and timestep -> ``[B, NUM_TOKENS, token_dim]`` tokens.

    Each scalar field gets its own affine token (value * w_i + b_i), so fields stay
    distinguishable to the attention without a separate position embedding.
    """

    def __init__(self, token_dim: int, time_dim: int, rng: np.random.Generator):
        self.token_dim, self.time_dim = token_dim, time_dim
        self.scalar_w = Parameter(rng.normal(0.0, 1.0, (COND_SCALARS, token_dim)))
        self.scalar_b = Parameter(rng.normal(0.0, 0.1, (COND_SCALARS, token_dim)))
        self.status = Linear(COND_CLASSES, token_dim, rng)
        self.time1 = Linear(time_dim, token_dim, rng)
        self.time2 = Linear(token_dim, token_dim, rng)
        self.norm = LayerNorm(token_dim)

    def forward(self, cond: np.ndarray, t) -> Tensor:
        cond = cond_matrix(cond)
        b = cond.shape[0]
        scal = Tensor(cond[:, :COND_SCALARS, None]) * self.scalar_w + self.scalar_b   # [B,9,D]
        status = reshape(self.status(Tensor(cond[:, COND_SCALARS:])), (b, 1, self.token_dim))
        temb = self.time2(silu(self.time1(Tensor(timestep_embedding(t, self.time_dim)))))
        tokens = concat([scal, status, reshape(temb, (b, 1, self.token_dim))], axis=1)
        return self.norm(tokens)


def cond_embed(embedder: CondEmbedder, cond, t) -> Tensor:
    return embedder(cond, t)


class CrossAttention(Module):
    """Pre-norm residual single-head attention from feature positions onto tokens."""

    def __init__(self, channels: int, token_dim: int, rng: np.random.Generator):
        self.channels, self.token_dim = channels, token_dim
        self.norm = LayerNorm(channels)
        self.q = Linear(channels, channels, rng, bias=False)
        self.k = Linear(token_dim, channels, rng, bias=False)
        self.v = Linear(token_dim, channels, rng, bias=False)
        self.o = Linear(channels, channels, rng)

    def forward(self, seq, tokens) -> Tensor:
        seq, tokens = as_tensor(seq), as_tensor(tokens)
        if seq.shape[-1] != self.channels:
            raise ShapeError(f"cross-attention query width {seq.shape[-1]} != {self.channels}")
        if tokens.shape[-1] != self.token_dim:
            raise ShapeError(f"cross-attention token width {tokens.shape[-1]} != {self.token_dim}")
        q = self.q(self.norm(seq))
        k, v = self.k(tokens), self.v(tokens)
        att = softmax(matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.channels)), axis=-1)
        return seq + self.o(matmul(att, v))


class TimeResBlock(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(8, c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.temb = Linear(time_dim, c_out, rng)
        self.norm2 = GroupNorm(8, c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x, temb) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        t = self.temb(temb)
        h = h + reshape(t, t.shape + (1, 1))
        h = self.conv2(silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class SpatialMixer(Module):
    """Residual sequence mixing over the raster-flattened map, both scan directions."""

    def __init__(self, channels: int, kind: str, rng: np.random.Generator, d_state: int = 16):
        self.kind = kind
        if kind == "mamba":
            self.block = MambaBlock(channels, rng, d_state=d_state)
        elif kind == "attention":
            self.norm = LayerNorm(channels)
            self.block = SelfAttention(channels, rng)
        elif kind != "none":
            raise ValueError(f"unknown mixer {kind!r}")

    def forward(self, seq) -> Tensor:
        if self.kind == "mamba":
            return bidirectional(self.block, seq)      # block carries its own residual
        if self.kind == "attention":
            return seq + self.block(self.norm(seq))
        return as_tensor(seq)


class Stage(Module):
    """ResBlock -> mixer -> cross-attention at one resolution."""

    def __init__(self, c_in: int, c_out: int, cfg: UNetConfig, rng: np.random.Generator):
        self.res = TimeResBlock(c_in, c_out, cfg.time_dim, rng)
        self.mixer = SpatialMixer(c_out, cfg.mixer, rng, cfg.d_state)
        self.xattn = CrossAttention(c_out, cfg.token_dim, rng)

    def forward(self, x, temb, tokens) -> Tensor:
        h = self.res(x, temb)
        seq = flatten_spatial(h)
        seq = self.xattn(self.mixer(seq), tokens)
        return unflatten_spatial(seq, _layout(h))


def _layout(h) -> SequenceLayout:
    return SequenceLayout(tuple(h.shape[2:]))


class Downsample(Module):
    def __init__(self, c: int, rng):
        self.conv = Conv2d(c, c, 3, rng, stride=2)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, c: int, rng):
        self.conv = Conv2d(c, c, 3, rng)

    def forward(self, x):
        return self.conv(F.upsample_nearest(x, 2))


class EncoderPath(Module):
    """conv_in, per-level stages (+downsample), and the mid block; shared by the control copy."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        widths = [cfg.base_width * m for m in cfg.channel_mult]
        self.conv_in = Conv2d(cfg.latent_channels, widths[0], 3, rng)
        self.levels = []
        self.downs = []
        c = widths[0]
        for li, w in enumerate(widths):
            blocks = []
            for _ in range(cfg.blocks_per_level):
                blocks.append(Stage(c, w, cfg, rng))
                c = w
            self.levels.append(blocks)
            if li < len(widths) - 1:
                self.downs.append(Downsample(c, rng))
        self.mid1 = Stage(c, c, cfg, rng)
        self.mid2 = TimeResBlock(c, c, cfg.time_dim, rng)

    def skip_channels(self) -> list[int]:
        return [blk.res.conv2.weight.shape[0] for blocks in self.levels for blk in blocks]

    def forward(self, x, temb, tokens, inject=None):
        """Returns (skips, mid). ``inject`` is added right after conv_in."""
        h = self.conv_in(x)
        if inject is not None:
            h = h + inject
        skips = []
        for li, blocks in enumerate(self.levels):
            for blk in blocks:
                h = blk(h, temb, tokens)
                skips.append(h)
            if li < len(self.downs):
                h = self.downs[li](h)
        mid = self.mid2(self.mid1(h, temb, tokens), temb)
        return skips, mid


class DecoderPath(Module):
    def __init__(self, cfg: UNetConfig, skip_ch: list[int], mid_ch: int, rng: np.random.Generator):
        widths = [cfg.base_width * m for m in cfg.channel_mult]
        self.levels = []
        self.ups = []
        c = mid_ch
        skip_ch = list(skip_ch)
        for li in reversed(range(len(widths))):
            blocks = []
            for _ in range(cfg.blocks_per_level):
                blocks.append(Stage(c + skip_ch.pop(), widths[li], cfg, rng))
                c = widths[li]
            self.levels.append(blocks)
            if li > 0:
                self.ups.append(Upsample(c, rng))
        self.norm_out = GroupNorm(8, c)
        self.conv_out = Conv2d(c, cfg.latent_channels, 3, rng)

    def forward(self, mid, skips, temb, tokens):
        h = mid
        skips = list(skips)
        for li, blocks in enumerate(self.levels):
            for blk in blocks:
                h = blk(concat([h, skips.pop()], axis=1), temb, tokens)
            if li < len(self.ups):
                h = self.ups[li](h)
        return self.conv_out(silu(self.norm_out(h)))


class ZeroConv(Conv2d):
    def __init__(self, c_in: int, c_out: int, rng=None):
        super().__init__(c_in, c_out, 1, rng or np.random.default_rng(0), zero=True)


class UNetDenoiser(Module):
    """``eps_hat = model(z_t[B,C,H,W], t[B], cond[B,12], control=None, hint=None)``."""

    def __init__(self, cfg: UNetConfig | None = None, rng: np.random.Generator | None = None):
        cfg = cfg or UNetConfig()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.embed = CondEmbedder(cfg.token_dim, cfg.time_dim, rng)
        self.time1 = Linear(cfg.time_dim, cfg.time_dim, rng)
        self.time2 = Linear(cfg.time_dim, cfg.time_dim, rng)
        self.encoder = EncoderPath(cfg, rng)
        skip_ch = self.encoder.skip_channels()
        mid_ch = cfg.base_width * cfg.channel_mult[-1]
        self.decoder = DecoderPath(cfg, skip_ch, mid_ch, rng)

    @property
    def latent_shape(self) -> tuple:
        return (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)

    def context(self, t, cond):
        t = np.atleast_1d(np.asarray(t))
        temb = self.time2(silu(self.time1(Tensor(timestep_embedding(t, self.cfg.time_dim)))))
        return temb, self.embed(cond, t)

    def forward(self, z_t, t, cond, control: "ControlBranch | None" = None, hint=None) -> Tensor:
        z_t = as_tensor(z_t)
        if z_t.ndim != 4 or z_t.shape[1:] != self.latent_shape:
            raise ShapeError(f"denoiser expects [B,{self.latent_shape}], got {z_t.shape}")
        cond = cond_matrix(cond)
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        if cond.shape[0] != z_t.shape[0]:
            raise ShapeError("batch sizes of z_t and cond differ")
        temb, tokens = self.context(t, cond)
        skips, mid = self.encoder(z_t, temb, tokens)
        if control is not None:
            if hint is None:
                raise ValueError("control branch needs a hint (baseline latent)")
            c_skips, c_mid = control(z_t, hint, temb, tokens)
            skips = [s + c for s, c in zip(skips, c_skips)]
            mid = mid + c_mid
        return self.decoder(mid, skips, temb, tokens)


class ControlBranch(Module):
    """Trainable copy of the denoiser's conv_in + encoder + mid, read out through zero convs.

    The hint (baseline latent) enters through a small conv stack ending in a zero conv
    added after the copied conv_in; every copied level output and the mid output pass
    through their own zero 1x1 conv before being added to the frozen network.
    """

    def __init__(self, denoiser: UNetDenoiser, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        cfg = denoiser.cfg
        w0 = cfg.base_width * cfg.channel_mult[0]
        self.stage1_hash = hash_parameters(denoiser)
        self.copy = denoiser.encoder.clone()
        self.copy.unfreeze()
        self.hint1 = Conv2d(cfg.latent_channels, w0, 3, rng)
        self.hint2 = Conv2d(w0, w0, 3, rng)
        self.zero_in = ZeroConv(w0, w0)
        self.zero_skips = [ZeroConv(c, c) for c in self.copy.skip_channels()]
        mid_ch = cfg.base_width * cfg.channel_mult[-1]
        self.zero_mid = ZeroConv(mid_ch, mid_ch)

    def forward(self, z_t, hint, temb, tokens):
        h = self.zero_in(self.hint2(silu(self.hint1(as_tensor(hint)))))
        skips, mid = self.copy(z_t, temb, tokens, inject=h)
        return [zc(s) for zc, s in zip(self.zero_skips, skips)], self.zero_mid(mid)


def build_control_branch(denoiser: UNetDenoiser, rng: np.random.Generator | None = None) -> ControlBranch:
    """Freeze ``denoiser`` and attach a fresh control branch initialised from it."""
    denoiser.freeze()
    return ControlBranch(denoiser, rng)


def encode_baseline(gate, images: np.ndarray) -> np.ndarray:
    """Baseline latents from a frozen GATE encoder (deterministic)."""
    if getattr(gate, "trained", True) is False:
        raise ValueError("GATE must be trained before encoding baselines")
    return gate.encode_array(np.asarray(images, dtype=np.float64))


@dataclass
class StepCond:
    """What the sampler threads through to the model: covariates and optional hint."""

    cond: np.ndarray
    hint: np.ndarray | None = None

    def take(self, idx) -> "StepCond":
        return StepCond(self.cond[idx], None if self.hint is None else self.hint[idx])


class ConditionalDenoiser:
    """Binds a denoiser (and optional control branch) to the ``model(z, t, cond)`` protocol."""

    def __init__(self, unet: UNetDenoiser, control: ControlBranch | None = None):
        self.unet, self.control = unet, control

    def __call__(self, z_t, t, cond: StepCond):
        if self.control is None:
            return self.unet(z_t, t, cond.cond)
        return self.unet(z_t, t, cond.cond, control=self.control, hint=cond.hint)


@dataclass
class PairData:
    """Training pairs in latent space: baseline latent, target latent, covariates."""

    z_base: np.ndarray
    z_target: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        n = len(self.z_target)
        if len(self.z_base) != n or len(self.cond) != n:
            raise ValueError("pair arrays differ in length")
        if n == 0:
            raise ValueError("empty pair dataset")

    def __len__(self) -> int:
        return len(self.z_target)


@dataclass
class DiffusionTrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 1e-4


class DiffusionTrainer:
    """Stage 1 trains the whole denoiser; stage 2 trains only the control branch."""

    def __init__(self, stage: int, unet: UNetDenoiser, sched: NoiseSchedule, cfg: DiffusionTrainConfig,
                 rng: np.random.Generator, control: ControlBranch | None = None):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if stage == 2:
            if control is None:
                raise ValueError("stage 2 needs a control branch built from a stage-1 denoiser")
            if any(p.requires_grad for p in unet.parameters()):
                raise ValueError("stage 2 requires the stage-1 denoiser to be frozen")
            if hash_parameters(unet) != control.stage1_hash:
                raise ValueError("control branch was built from a different stage-1 checkpoint")
        self.stage, self.unet, self.sched, self.cfg, self.rng = stage, unet, sched, cfg, rng
        self.control = control if stage == 2 else None
        trainable = (self.control if stage == 2 else unet).trainable_parameters()
        self.opt = Adam(trainable, lr=cfg.lr)
        self.model = ConditionalDenoiser(unet, self.control)
        self.step = 0
        self.history: list[dict] = []

    def batch(self, data: PairData):
        idx = self.rng.integers(0, len(data), size=self.cfg.batch_size)
        t = self.rng.integers(0, self.sched.T, size=self.cfg.batch_size)
        eps = self.rng.standard_normal(data.z_target[idx].shape)
        return idx, t, eps

    def loss(self, data: PairData, idx, t, eps) -> Tensor:
        sc = StepCond(data.cond[idx], data.z_base[idx] if self.stage == 2 else None)
        return eps_loss(self.model, data.z_target[idx], t, eps, sc, self.sched)

    def train_step(self, data: PairData) -> dict:
        idx, t, eps = self.batch(data)
        try:
            loss = self.loss(data, idx, t, eps)
            self.opt.zero_grad()
            loss.backward()
        except NonFiniteError as e:
            raise NonFiniteError(f"diffusion stage {self.stage} diverged at step {self.step}: {e}") from e
        self.opt.step()
        rec = {"step": self.step, "loss": loss.item()}
        self.history.append(rec)
        self.step += 1
        return rec

    def state(self) -> tuple[dict, dict]:
        module = self.control if self.stage == 2 else self.unet
        tensors = {f"model.{k}": v for k, v in module.state_dict().items()}
        tensors.update(self.opt.state_arrays("adam"))
        meta = {"stage": self.stage, "step": self.step, "adam_t": self.opt.state.t,
                "rng": self.rng.bit_generator.state, "history": self.history,
                "unet_config": self.unet.cfg.to_dict()}
        if self.stage == 2:
            meta["stage1_hash"] = self.control.stage1_hash
        return tensors, meta

    def load_state(self, tensors: dict, meta: dict) -> None:
        if int(meta["stage"]) != self.stage:
            raise ValueError("checkpoint stage does not match the trainer")
        if self.stage == 2 and meta.get("stage1_hash") != self.control.stage1_hash:
            raise ValueError("stage-2 checkpoint belongs to a different stage-1 model")
        module = self.control if self.stage == 2 else self.unet
        module.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.opt.load_state_arrays(tensors, meta["adam_t"], "adam")
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])
        self.history = list(meta["history"])


def train_diffusion(stage: int, data: PairData, unet: UNetDenoiser, sched: NoiseSchedule,
                    cfg: DiffusionTrainConfig, rng: np.random.Generator, control: ControlBranch | None = None,
                    callback=None) -> tuple[DiffusionTrainer, list[dict]]:
    trainer = DiffusionTrainer(stage, unet, sched, cfg, rng, control)
    while trainer.step < cfg.iterations:
        trainer.train_step(data)
        if callback is not None:
            callback(trainer)
    return trainer, trainer.history
