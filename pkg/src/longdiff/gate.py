"""Gaussian-aligned deterministic autoencoder and its training objectives.

The latent is pushed toward N(0, I) by comparing sorted 1-D projections of latent
samples against equally many prior draws (empirical sliced p-Wasserstein), instead
of a KL term with reparameterised sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .autograd import (
    Adam,
    Conv2d,
    ConvTranspose2d,
    GroupNorm,
    Module,
    Tensor,
    abs_,
    as_tensor,
    leaky_relu,
    matmul,
    mean,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softplus,
    square,
    transpose,
)
from .autograd import functional as F
from .autograd.tensor import NonFiniteError, ShapeError


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, groups: int = 8):
        self.norm1 = GroupNorm(groups, c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.norm2 = GroupNorm(groups, c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x):
        h = self.conv1(silu(self.norm1(x)))
        h = self.conv2(silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class Encoder(Module):
    """[B,1,H,W] -> [B,C_z,H/4,W/4]."""

    def __init__(self, latent_channels: int, width: int, rng: np.random.Generator):
        w2 = 2 * width
        self.conv_in = Conv2d(1, width, 3, rng)
        self.res1 = ResBlock(width, width, rng)
        self.down1 = Conv2d(width, w2, 3, rng, stride=2)
        self.res2 = ResBlock(w2, w2, rng)
        self.down2 = Conv2d(w2, w2, 3, rng, stride=2)
        self.res3 = ResBlock(w2, w2, rng)
        self.norm_out = GroupNorm(8, w2)
        self.conv_out = Conv2d(w2, latent_channels, 3, rng)

    def forward(self, x):
        h = self.res1(self.conv_in(x))
        h = self.res2(self.down1(h))
        h = self.res3(self.down2(h))
        return self.conv_out(silu(self.norm_out(h)))


class Decoder(Module):
    """[B,C_z,h,w] -> [B,1,4h,4w], sigmoid head."""

    def __init__(self, latent_channels: int, width: int, rng: np.random.Generator):
        w2 = 2 * width
        self.conv_in = Conv2d(latent_channels, w2, 3, rng)
        self.res1 = ResBlock(w2, w2, rng)
        self.up1 = ConvTranspose2d(w2, w2, rng)
        self.res2 = ResBlock(w2, w2, rng)
        self.up2 = ConvTranspose2d(w2, width, rng)
        self.res3 = ResBlock(width, width, rng)
        self.norm_out = GroupNorm(8, width)
        self.conv_out = Conv2d(width, 1, 3, rng)

    def forward(self, z):
        h = self.res1(self.conv_in(z))
        h = self.res2(self.up1(h))
        h = self.res3(self.up2(h))
        return sigmoid(self.conv_out(silu(self.norm_out(h))))


class GateModel(Module):
    def __init__(self, image_size: int = 32, latent_channels: int = 4, width: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if image_size % 4:
            raise ValueError("image size must be divisible by 4")
        self.image_size, self.latent_channels = image_size, latent_channels
        self.encoder = Encoder(latent_channels, width, rng)
        self.decoder = Decoder(latent_channels, width, rng)

    @property
    def latent_shape(self) -> tuple:
        s = self.image_size // 4
        return (self.latent_channels, s, s)

    def encode(self, x) -> Tensor:
        x = as_tensor(x)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        if x.shape[1:] != (1, self.image_size, self.image_size):
            raise ShapeError(f"encoder expects [B,1,{self.image_size},{self.image_size}], got {x.shape}")
        z = self.encoder(x)
        return reshape(z, z.shape[1:]) if single else z

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        single = z.ndim == 3
        if single:
            z = reshape(z, (1,) + z.shape)
        if z.shape[1:] != self.latent_shape:
            raise ShapeError(f"decoder expects [B,{self.latent_shape}], got {z.shape}")
        x = self.decoder(z)
        return reshape(x, x.shape[1:]) if single else x

    def forward(self, x) -> Tensor:
        return self.decode(self.encode(x))

    def encode_array(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.encode(x[i:i + batch]).data for i in range(0, len(x), batch)])

    def decode_array(self, z: np.ndarray, batch: int = 64) -> np.ndarray:
        with no_grad():
            return np.concatenate([self.decode(z[i:i + batch]).data for i in range(0, len(z), batch)])


class PatchDiscriminator(Module):
    """Image -> patch logits ``[B,1,H/4,W/4]``."""

    def __init__(self, width: int = 16, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(1)
        self.c1 = Conv2d(1, width, 3, rng, stride=2)
        self.c2 = Conv2d(width, 2 * width, 3, rng, stride=2)
        self.c3 = Conv2d(2 * width, 1, 3, rng)

    def forward(self, x):
        h = leaky_relu(self.c1(x))
        h = leaky_relu(self.c2(h))
        return self.c3(h)


class RandomFeatureExtractor(Module):
    """Frozen random conv features; a fixed stand-in for a pretrained perceptual net."""

    def __init__(self, seed: int = 1234, width: int = 8):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.c1 = Conv2d(1, width, 3, rng)
        self.c2 = Conv2d(width, 2 * width, 3, rng, stride=2)
        for conv, fan_in in ((self.c1, 9), (self.c2, 9 * width)):
            conv.weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=conv.weight.shape)
            conv.bias.data = rng.normal(0.0, 0.1, size=conv.bias.shape)
        self.freeze()

    def features(self, x) -> Tensor:
        return relu(self.c2(relu(self.c1(x))))

    def forward(self, x) -> Tensor:
        return self.features(x)

    def features_array(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.features(np.asarray(x, dtype=np.float64)).data


@dataclass
class GateLossWeights:
    rec: float = 1.0
    sd: float = 0.05
    perc: float = 0.1
    adv: float = 0.0

    def __post_init__(self):
        if min(self.rec, self.sd, self.perc, self.adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rec <= 0:
            raise ValueError("the reconstruction weight must be positive")


@dataclass
class SlicedAlignConfig:
    num_projections: int = 64
    p: float = 2.0

    def __post_init__(self):
        if self.num_projections < 1 or self.p < 1:
            raise ValueError("need K >= 1 and p >= 1")


def recon_loss(x, x_hat) -> Tensor:
    return F.mse_loss(x, x_hat)


def sample_directions(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """K directions uniform on the unit sphere in R^d (normalised Gaussian draws)."""
    if K < 1 or d < 1:
        raise ValueError("need K >= 1 and d >= 1")
    w = rng.standard_normal((K, d))
    norms = np.linalg.norm(w, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        w[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(w, axis=1)
    return w / norms[:, None]


def latent_samples(z) -> Tensor:
    """One C_z-dim sample per spatial position: ``[B,C,H,W] -> [B*H*W, C]``."""
    z = as_tensor(z)
    c = z.shape[1]
    return reshape(transpose(z, (0, 2, 3, 1)), (-1, c))


def sliced_cdf_loss(z_samples, prior_samples, dirs, p: float = 2.0) -> Tensor:
    """Mean over directions and order statistics of ``|s_(i) - r_(i)|^p``."""
    z = as_tensor(z_samples)
    r = as_tensor(prior_samples)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if z.shape[0] != r.shape[0]:
        raise ValueError(f"sample counts differ: {z.shape[0]} vs {r.shape[0]}")
    if dirs.shape[0] == 0:
        raise ValueError("need at least one projection direction")
    v = Tensor(dirs.T)
    s_sorted, _ = F.sort(transpose(matmul(z, v)), axis=-1)     # [K, n]
    r_sorted, _ = F.sort(transpose(matmul(r, v)), axis=-1)
    diff = s_sorted - r_sorted
    if p == 2:
        return mean(square(diff))
    return mean(power(abs_(diff), p))


def perceptual_loss(x, x_hat, phi: RandomFeatureExtractor) -> Tensor:
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError("perceptual_loss: shapes differ")
    return F.mse_loss(phi(x), phi(x_hat))


def adversarial_losses(x, x_hat, disc: PatchDiscriminator) -> tuple[Tensor, Tensor]:
    """(discriminator loss, non-saturating generator loss) from logits.

    loss_disc = -E[log D(x)] - E[log(1 - D(x_hat))]; loss_gen = -E[log D(x_hat)].
    """
    l_real = disc(x)
    l_fake = disc(x_hat)
    if not (np.isfinite(l_real.data).all() and np.isfinite(l_fake.data).all()):
        raise NonFiniteError("discriminator produced non-finite logits")
    loss_disc = mean(softplus(-l_real)) + mean(softplus(l_fake))
    loss_gen = mean(softplus(-l_fake))
    return loss_disc, loss_gen


def gate_total_loss(parts: dict, weights: GateLossWeights) -> Tensor:
    total = as_tensor(parts["rec"]) * weights.rec
    for key, w in (("sd", weights.sd), ("perc", weights.perc), ("adv", weights.adv)):
        if w != 0.0 and key in parts:
            total = total + as_tensor(parts[key]) * w
    return total


def latent_ks_statistics(samples: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Kolmogorov-Smirnov distance to N(0,1) of the projections along each direction."""
    proj = np.asarray(samples) @ np.asarray(dirs).T
    return np.array([stats.kstest(proj[:, k], "norm").statistic for k in range(proj.shape[1])])


@dataclass
class GateTrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    checkpoint_every: int = 500
    weights: GateLossWeights = field(default_factory=GateLossWeights)
    sliced: SlicedAlignConfig = field(default_factory=SlicedAlignConfig)


class GateTrainer:
    """Stateful GATE training loop; everything needed to resume lives in ``state()``."""

    def __init__(self, model: GateModel, cfg: GateTrainConfig, rng: np.random.Generator,
                 disc: PatchDiscriminator | None = None, phi: RandomFeatureExtractor | None = None):
        self.model, self.cfg, self.rng = model, cfg, rng
        self.disc = disc or PatchDiscriminator(rng=np.random.default_rng(rng.integers(2 ** 31)))
        self.phi = phi or RandomFeatureExtractor()
        self.opt = Adam(model.trainable_parameters(), lr=cfg.lr)
        self.opt_disc = Adam(self.disc.trainable_parameters(), lr=cfg.lr)
        self.step = 0
        self.history: list[dict] = []

    def train_step(self, images: np.ndarray) -> dict:
        try:
            rec = self._step(images)
        except NonFiniteError as e:
            raise NonFiniteError(f"GATE training diverged at step {self.step}: {e}") from e
        self.history.append(rec)
        self.step += 1
        return rec

    def _step(self, images: np.ndarray) -> dict:
        cfg, w = self.cfg, self.cfg.weights
        idx = self.rng.integers(0, len(images), size=cfg.batch_size)
        x = Tensor(images[idx])
        rec: dict = {"step": self.step}
        if w.adv > 0:
            with no_grad():
                x_fake = self.model(x).data
            loss_d, _ = adversarial_losses(x, Tensor(x_fake), self.disc)
            self.opt_disc.zero_grad()
            loss_d.backward()
            self.opt_disc.step()
            rec["disc"] = loss_d.item()
        z = self.model.encode(x)
        x_hat = self.model.decode(z)
        parts = {"rec": recon_loss(x, x_hat)}
        if w.sd > 0:
            samples = latent_samples(z)
            prior = self.rng.standard_normal(samples.shape)
            dirs = sample_directions(cfg.sliced.num_projections, samples.shape[1], self.rng)
            parts["sd"] = sliced_cdf_loss(samples, prior, dirs, cfg.sliced.p)
        if w.perc > 0:
            parts["perc"] = perceptual_loss(x, x_hat, self.phi)
        if w.adv > 0:
            self.disc.freeze()
            _, parts["adv"] = adversarial_losses(x, x_hat, self.disc)
            self.disc.unfreeze()
        total = gate_total_loss(parts, w)
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        rec.update({k: v.item() for k, v in parts.items()})
        rec["total"] = total.item()
        return rec

    def state(self) -> tuple[dict, dict]:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
        tensors.update(self.opt.state_arrays("adam"))
        tensors.update(self.opt_disc.state_arrays("adam_disc"))
        meta = {"step": self.step, "adam_t": self.opt.state.t, "adam_disc_t": self.opt_disc.state.t,
                "rng": self.rng.bit_generator.state, "history": self.history}
        return tensors, meta

    def load_state(self, tensors: dict, meta: dict) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.disc.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc.")})
        self.opt.load_state_arrays(tensors, meta["adam_t"], "adam")
        self.opt_disc.load_state_arrays(tensors, meta["adam_disc_t"], "adam_disc")
        self.rng.bit_generator.state = meta["rng"]
        self.step = int(meta["step"])
        self.history = list(meta["history"])


def train_gate(images: np.ndarray, model: GateModel, cfg: GateTrainConfig, rng: np.random.Generator,
               disc: PatchDiscriminator | None = None, callback=None) -> tuple[GateModel, list[dict]]:
    """Train for ``cfg.iterations`` steps; ``callback(trainer)`` runs after every step."""
    if len(images) == 0:
        raise ValueError("empty training set")
    trainer = GateTrainer(model, cfg, rng, disc)
    while trainer.step < cfg.iterations:
        trainer.train_step(images)
        if callback is not None:
            callback(trainer)
    return model, trainer.history
