"""Finite-difference gradient suite: one randomized case per differentiable operation.

Each case builder takes an rng and returns ``(loss_fn, leaves)``; inputs are drawn away
from kinks (abs, relu, max, sort ties) so central differences are well defined.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, check_gradients
from .autograd import functional as F
from .gate import (
    GateLossWeights,
    PatchDiscriminator,
    RandomFeatureExtractor,
    ResBlock,
    adversarial_losses,
    gate_total_loss,
    perceptual_loss,
    recon_loss,
    sample_directions,
    sliced_cdf_loss,
)
from .ssm import (
    MambaBlock,
    SelfAttention,
    SsmLayer,
    bidirectional,
    causal_depthwise_conv1d,
    selective_scan,
    ssm_scan_recurrent,
)
from .unet import CondEmbedder, CrossAttention, TimeResBlock, UNetConfig, UNetDenoiser

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    data = rng.standard_normal(shape) if lo is None else rng.uniform(lo, hi, shape)
    return Tensor(data, requires_grad=True)


def _away(rng, shape, gap=0.1) -> Tensor:
    """Values with |x| >= gap (no kink at 0)."""
    mag = rng.uniform(gap, 2.0, shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], shape), requires_grad=True)


def _distinct(rng, shape) -> Tensor:
    """Entries separated by at least 0.05 (no ties for max/sort)."""
    n = int(np.prod(shape))
    grid = np.arange(n) * 0.1 + rng.uniform(-0.02, 0.02, n)
    return Tensor(rng.permutation(grid).reshape(shape) - n * 0.05, requires_grad=True)


def _lin(rng, shape):
    """Fixed random linear functional so the loss probes every output element."""
    r = rng.standard_normal(shape)
    return lambda out: ag.tsum(out * r)


def _unary(op, domain="any"):
    def build(rng):
        shape = (3, 4)
        x = {"any": lambda: _leaf(rng, shape), "pos": lambda: _leaf(rng, shape, 0.2, 2.0),
             "away": lambda: _away(rng, shape), "distinct": lambda: _distinct(rng, shape)}[domain]()
        f = _lin(rng, op(x).shape)
        return (lambda: f(op(x))), [x]
    return build


def _binary(op, pos_b=False):
    def build(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (4,), 0.5, 2.0) if pos_b else _leaf(rng, (4,))   # broadcast operand
        f = _lin(rng, op(a, b).shape)
        return (lambda: f(op(a, b))), [a, b]
    return build


def _case_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    f = _lin(rng, (2, 3, 5))
    return (lambda: f(ag.matmul(a, b))), [a, b]


def _case_getitem(rng):
    x = _leaf(rng, (5, 4))
    idx = np.array([0, 2, 2, 4])
    f = _lin(rng, (4, 2))
    return (lambda: f(ag.getitem(x, (idx, slice(1, 3))))), [x]


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    f = _lin(rng, (2, 5))
    return (lambda: f(ag.concat([a, b], axis=1))), [a, b]


def _case_stack(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    f = _lin(rng, (2, 2, 3))
    return (lambda: f(ag.stack([a, b], axis=1))), [a, b]


def _case_where(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    cond = rng.random((3, 4)) < 0.5
    f = _lin(rng, (3, 4))
    return (lambda: f(ag.where(cond, a, b))), [a, b]


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    x, w, b = _leaf(rng, (2, 3, 6, 6)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
    out = F.conv2d(x, w, b, stride=stride, pad=1)
    f = _lin(rng, out.shape)
    return (lambda: f(F.conv2d(x, w, b, stride=stride, pad=1))), [x, w, b]


def _case_conv_t(rng):
    x, w, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (3, 2, 4, 4)), _leaf(rng, (2,))
    f = _lin(rng, (2, 2, 8, 8))
    return (lambda: f(F.conv_transpose2d(x, w, b))), [x, w, b]


def _case_sort(rng):
    x = _distinct(rng, (3, 6))
    f = _lin(rng, (3, 6))
    return (lambda: f(F.sort(x, axis=-1)[0])), [x]


def _case_layer_norm(rng):
    x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (5,)), _leaf(rng, (5,))
    f = _lin(rng, (3, 5))
    return (lambda: f(F.layer_norm(x, w, b))), [x, w, b]


def _case_group_norm(rng):
    x, w, b = _leaf(rng, (2, 4, 3, 3)), _leaf(rng, (4,)), _leaf(rng, (4,))
    f = _lin(rng, (2, 4, 3, 3))
    return (lambda: f(F.group_norm(x, 2, w, b))), [x, w, b]


def _case_bce(rng):
    x = _leaf(rng, (3, 4))
    y = (rng.random((3, 4)) < 0.5).astype(float)
    return (lambda: F.bce_with_logits(x, y)), [x]


def _case_mse(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return (lambda: F.mse_loss(a, b)), [a, b]


def _case_upsample(rng):
    x = _leaf(rng, (1, 2, 3, 3))
    f = _lin(rng, (1, 2, 6, 6))
    return (lambda: f(F.upsample_nearest(x, 2))), [x]


def _case_selective_scan(rng):
    bt, L, M, N = 2, 5, 3, 4
    x, d = _leaf(rng, (bt, L, M)), _leaf(rng, (bt, L, M), 0.1, 1.0)
    A = Tensor(-rng.uniform(0.5, 2.0, (M, N)), requires_grad=True)
    B, C, D = _leaf(rng, (bt, L, N)), _leaf(rng, (bt, L, N)), _leaf(rng, (M,))
    f = _lin(rng, (bt, L, M))
    return (lambda: f(selective_scan(x, d, A, B, C, D))), [x, d, A, B, C, D]


def _case_depthwise(rng):
    x, w, b = _leaf(rng, (2, 6, 3)), _leaf(rng, (3, 4)), _leaf(rng, (3,))
    f = _lin(rng, (2, 6, 3))
    return (lambda: f(causal_depthwise_conv1d(x, w, b))), [x, w, b]


def _layer_leaves(layer) -> list[Tensor]:
    return layer.parameters()


def _case_ssm_layer(selective: bool):
    def build(rng):
        layer = SsmLayer(3, 4, rng, selective=selective, dt_range=(0.3, 1.0))
        x = _leaf(rng, (2, 6, 3))
        f = _lin(rng, (2, 6, 3))
        return (lambda: f(ssm_scan_recurrent(x, layer))), [x] + _layer_leaves(layer)
    return build


def _case_mamba(rng):
    block = MambaBlock(4, rng, d_state=3, expand=2, dt_range=(0.5, 1.0))
    x = _leaf(rng, (2, 6, 4))
    f = _lin(rng, (2, 6, 4))
    return (lambda: f(bidirectional(block, x))), [x] + block.parameters()


def _case_self_attention(rng):
    attn = SelfAttention(4, rng)
    x = _leaf(rng, (2, 5, 4))
    f = _lin(rng, (2, 5, 4))
    return (lambda: f(attn(x))), [x] + attn.parameters()


def _case_cross_attention(rng):
    xa = CrossAttention(4, 3, rng)
    x, tok = _leaf(rng, (2, 5, 4)), _leaf(rng, (2, 6, 3))
    f = _lin(rng, (2, 5, 4))
    return (lambda: f(xa(x, tok))), [x, tok] + xa.parameters()


def _case_time_resblock(rng):
    blk = TimeResBlock(4, 16, 5, rng)      # 8 groups of 2 so channel shifts do not cancel
    for gn in (blk.norm1, blk.norm2):      # perturb affine params so their grads are generic
        gn.weight.data = rng.uniform(0.5, 1.5, gn.weight.shape)
    x, temb = _leaf(rng, (2, 4, 4, 4)), _leaf(rng, (2, 5))
    f = _lin(rng, (2, 16, 4, 4))
    # the 3x3 kernels are covered by the conv2d case; checking them here only costs time
    leaves = [p for n, p in blk.named_parameters() if not n.endswith(("conv1.weight", "conv2.weight"))]
    return (lambda: f(blk(x, temb))), [x, temb] + leaves


def _case_gate_resblock(rng):
    blk = ResBlock(4, 4, rng, groups=2)
    x = _leaf(rng, (2, 4, 4, 4))
    f = _lin(rng, (2, 4, 4, 4))
    return (lambda: f(blk(x))), [x] + blk.parameters()


def _case_cond_embed(rng):
    emb = CondEmbedder(4, 6, rng)
    cond = rng.standard_normal((2, 12))
    t = rng.integers(0, 1000, 2)
    f = _lin(rng, (2, 11, 4))
    return (lambda: f(emb(cond, t))), emb.parameters()


def _case_unet(rng):
    cfg = UNetConfig(latent_channels=2, latent_size=4, base_width=8, channel_mult=(1, 2), d_state=2,
                     token_dim=4, mixer="attention")
    net = UNetDenoiser(cfg, rng)
    z = _leaf(rng, (2, 2, 4, 4))
    cond = rng.standard_normal((2, 12))
    t = rng.integers(0, 1000, 2)
    f = _lin(rng, (2, 2, 4, 4))
    return (lambda: f(net(z, t, cond))), [z]


def _case_recon(rng):
    x, y = _leaf(rng, (2, 1, 4, 4), 0, 1), _leaf(rng, (2, 1, 4, 4), 0, 1)
    return (lambda: recon_loss(x, y)), [x, y]


def _case_sliced(rng):
    n, d = 12, 3
    z = _distinct(rng, (n, d))
    prior = rng.standard_normal((n, d))
    dirs = sample_directions(5, d, rng)
    p = float(rng.choice([1.5, 2.0, 3.0]))
    # tie-free projections keep the sort permutation locally constant
    return (lambda: sliced_cdf_loss(z, prior, dirs, p)), [z]


def _case_perceptual(rng):
    phi = RandomFeatureExtractor(seed=int(rng.integers(1 << 30)), width=2)
    x, y = _leaf(rng, (1, 1, 6, 6), 0, 1), _leaf(rng, (1, 1, 6, 6), 0, 1)
    return (lambda: perceptual_loss(x, y, phi)), [x, y]


def _case_adv(which: int):
    def build(rng):
        disc = PatchDiscriminator(width=2, rng=rng)
        x, y = _leaf(rng, (1, 1, 8, 8), 0, 1), _leaf(rng, (1, 1, 8, 8), 0, 1)
        return (lambda: adversarial_losses(x, y, disc)[which]), [x, y] + disc.parameters()
    return build


def _case_total(rng):
    parts = [_leaf(rng, ()) for _ in range(4)]
    w = GateLossWeights(*rng.uniform(0.1, 2.0, 4))
    return (lambda: gate_total_loss(dict(zip(("rec", "sd", "perc", "adv"), parts)), w)), parts


CASES: dict[str, Case] = {
    "add": _binary(ag.add), "sub": _binary(ag.sub), "mul": _binary(ag.mul), "div": _binary(ag.div, pos_b=True),
    "neg": _unary(ag.neg), "power": _unary(lambda x: ag.power(x, 2.5), "pos"), "square": _unary(ag.square),
    "exp": _unary(ag.exp), "log": _unary(ag.log, "pos"), "sqrt": _unary(ag.sqrt, "pos"),
    "abs": _unary(ag.abs_, "away"), "sigmoid": _unary(ag.sigmoid), "softplus": _unary(ag.softplus),
    "logsigmoid": _unary(ag.logsigmoid), "silu": _unary(ag.silu), "tanh": _unary(ag.tanh),
    "relu": _unary(ag.relu, "away"), "leaky_relu": _unary(ag.leaky_relu, "away"),
    "sum": _unary(lambda x: ag.tsum(x, axis=1)), "mean": _unary(lambda x: ag.mean(x, axis=0)),
    "amax": _unary(lambda x: ag.amax(x, axis=1), "distinct"),
    "reshape": _unary(lambda x: ag.reshape(x, (2, 6))), "transpose": _unary(ag.transpose),
    "swapaxes": _unary(lambda x: ag.swapaxes(x, 0, 1)), "flip": _unary(lambda x: ag.flip(x, 1)),
    "pad": _unary(lambda x: ag.pad(x, ((1, 0), (0, 2)))),
    "broadcast_to": _unary(lambda x: ag.broadcast_to(x, (2, 3, 4))),
    "softmax": _unary(lambda x: ag.softmax(x, axis=-1)),
    "getitem": _case_getitem, "concat": _case_concat, "stack": _case_stack, "where": _case_where,
    "matmul": _case_matmul, "conv2d": _case_conv2d, "conv_transpose2d": _case_conv_t, "sort": _case_sort,
    "layer_norm": _case_layer_norm, "group_norm": _case_group_norm, "bce_with_logits": _case_bce,
    "mse_loss": _case_mse, "upsample_nearest": _case_upsample,
    "selective_scan": _case_selective_scan, "causal_depthwise_conv1d": _case_depthwise,
    "ssm_scan_lti": _case_ssm_layer(False), "ssm_scan_selective": _case_ssm_layer(True),
    "mamba_block_bidirectional": _case_mamba, "self_attention": _case_self_attention,
    "cross_attention": _case_cross_attention, "time_resblock": _case_time_resblock,
    "gate_resblock": _case_gate_resblock, "cond_embed": _case_cond_embed, "unet_denoiser": _case_unet,
    "recon_loss": _case_recon, "sliced_cdf_loss": _case_sliced, "perceptual_loss": _case_perceptual,
    "adversarial_disc": _case_adv(0), "adversarial_gen": _case_adv(1), "gate_total_loss": _case_total,
}


def run_case(name: str, instances: int = 10, seed: int = 0) -> float:
    """Worst relative error over ``instances`` random draws of case ``name``."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(instances):
        loss_fn, leaves = CASES[name](rng)
        worst = max(worst, check_gradients(loss_fn, leaves))
    return worst


def run_suite(instances: int = 10, seed: int = 0, names=None) -> dict:
    out = {}
    t0 = time.perf_counter()
    for name in names or CASES:
        out[name] = run_case(name, instances, seed)
    return {"max_rel_err": out, "seconds": time.perf_counter() - t0, "instances": instances}
