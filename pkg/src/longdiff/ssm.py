"""Diagonal state-space layers, the Mamba-style block, and sequence flattening.

Three execution modes share one parameterisation:

* recurrent LTI scan (fixed B, C, delta)
* convolution with the materialised kernel ``K[l] = C . Abar**l . Bbar`` (LTI only)
* selective scan, where B, C and delta are linear functions of the current input
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    LayerNorm,
    Linear,
    Module,
    NonFiniteError,
    Parameter,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    exp,
    flip,
    make_op,
    matmul,
    reshape,
    silu,
    softmax,
    softplus,
    swapaxes,
)

SERIES_THRESHOLD = 1e-8


def discretize(a, b, delta):
    """Zero-order-hold discretisation of a diagonal system, elementwise.

    Returns ``(exp(delta*a), (exp(delta*a) - 1)/a * b)``; below ``|delta*a| < 1e-8`` the
    second term uses its series ``delta*(1 + delta*a/2)*b``, which tends to ``delta*b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size delta must be positive")
    u = delta * a
    a_bar = np.exp(u)
    small = np.abs(u) < SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(small, delta * (1.0 + 0.5 * u), np.expm1(u) / np.where(small, 1.0, a))
    return a_bar, coef * b


def _zoh_coef(u: np.ndarray, a: np.ndarray, delta: np.ndarray, em1: np.ndarray | None = None) -> np.ndarray:
    """(exp(delta*a) - 1)/a, switching to the series ``delta*(1 + u/2)`` where ``|u| < 1e-8``."""
    em1 = np.expm1(u) if em1 is None else em1
    small = np.abs(u) < SERIES_THRESHOLD
    if not small.any():
        return em1 / a
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(small, delta * (1.0 + 0.5 * u), em1 / np.where(small, 1.0, a))


def _psi(u: np.ndarray, a_bar: np.ndarray, em1: np.ndarray) -> np.ndarray:
    """(u e^u - (e^u - 1)) / u^2, with its Taylor series near 0."""
    small = np.abs(u) < 1e-3
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = (u * a_bar - em1) / (u * u)
    if small.any():
        us = u[small]
        out[small] = 0.5 + us / 3.0 + us * us / 8.0
    return out


def _zoh_coef_da(u: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """d/da of (exp(delta*a) - 1)/a, written as delta**2 * psi(u)."""
    return delta * delta * _psi(u, np.exp(u), np.expm1(u))


def selective_scan(x, delta, A, B, C, D) -> Tensor:
    """Fused diagonal scan with exact backward.

    Shapes: ``x, delta: [Bt, L, M]``; ``A: [M, N]`` (negative); ``B, C: [Bt, L, N]``;
    ``D: [M]``. Computes ``h_t = Abar_t h_{t-1} + Bbar_t x_t`` from ``h_0 = 0`` and
    ``y_t = C_t . h_t + D x_t``.
    """
    x, delta, A, B, C, D = (as_tensor(t) for t in (x, delta, A, B, C, D))
    xd, dd, Ad, Bd, Cd, Dd = x.data, delta.data, A.data, B.data, C.data, D.data
    bt, L, M = xd.shape
    if np.any(Ad >= 0):
        raise ValueError("selective_scan: A must be strictly negative")
    u = dd[..., None] * Ad                      # [Bt, L, M, N]
    a_bar = np.exp(u)
    em1 = np.expm1(u)
    coef = _zoh_coef(u, Ad, dd[..., None], em1)
    cb = coef * Bd[:, :, None, :]
    bx = cb * xd[..., None]
    hs = bx.copy()
    tmp = np.empty_like(hs[:, 0])
    for t in range(1, L):
        np.multiply(a_bar[:, t], hs[:, t - 1], out=tmp)
        hs[:, t] += tmp
    if not np.isfinite(hs).all():
        raise NonFiniteError("selective_scan: state diverged")
    y = np.einsum("blmn,bln->blm", hs, Cd) + Dd * xd

    def bw(gy):
        gh = gy[..., None] * Cd[:, :, None, :]                # becomes dL/dh_t
        for t in range(L - 2, -1, -1):
            np.multiply(a_bar[:, t + 1], gh[:, t + 1], out=tmp)
            gh[:, t] += tmp
        t1 = gh * (hs - bx)                                   # dL/dAbar * Abar
        gx = np.einsum("blmn,blmn->blm", gh, cb) + Dd * gy
        g_cb = gh * xd[..., None]
        gB = np.einsum("blmn,blmn->bln", g_cb, coef)
        g_coef = g_cb * Bd[:, :, None, :]
        gC = np.einsum("blm,blmn->bln", gy, hs)
        gD = (gy * xd).sum(axis=(0, 1))
        g_delta = np.einsum("blmn,mn->blm", t1, Ad) + np.einsum("blmn,blmn->blm", g_coef, a_bar)
        g_coef *= _psi(u, a_bar, em1)
        gA = np.einsum("blmn,blm->mn", t1, dd) + np.einsum("blmn,blm->mn", g_coef, dd * dd)
        return gx, g_delta, gA, gB, gC, gD

    return make_op("selective_scan", y, (x, delta, A, B, C, D), bw)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmLayer(Module):
    """Diagonal SSM over ``channels`` inputs with a ``state_size``-dim state per channel.

    ``A = -exp(A_log)``, initialised to ``-(n+1)``. In selective mode B, C and delta are
    produced per step by ``proj_B``, ``proj_C`` and ``softplus(proj_delta(x))``; in LTI
    mode they are fixed parameters.
    """

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator, selective: bool = True,
                 dt_range: tuple[float, float] = (1e-3, 1e-1)):
        self.channels, self.state_size, self.selective = channels, state_size, selective
        self.A_log = Parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1))))
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), size=channels))
        if selective:
            self.proj_B = Linear(channels, state_size, rng, bias=False)
            self.proj_C = Linear(channels, state_size, rng, bias=False)
            self.proj_delta = Linear(channels, channels, rng)
            self.proj_delta.weight.data *= 0.1
            self.proj_delta.bias.data = _inv_softplus(dt)
        else:
            self.B = Parameter(rng.normal(size=state_size) / np.sqrt(state_size))
            self.C = Parameter(rng.normal(size=state_size) / np.sqrt(state_size))
            self.delta_raw = Parameter(_inv_softplus(dt))
        self.D_skip = Parameter(np.ones(channels))

    @classmethod
    def lti(cls, A, B, C, delta, D=None) -> "SsmLayer":
        """LTI layer from explicit values; ``A[M,N]`` negative, ``B, C [N]``, ``delta [M]``."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        M, N = A.shape
        layer = cls(M, N, np.random.default_rng(0), selective=False)
        if np.any(A >= 0):
            raise ValueError("A must be strictly negative")
        layer.A_log.data = np.log(-A)
        layer.B.data = np.asarray(B, dtype=np.float64).reshape(N).copy()
        layer.C.data = np.asarray(C, dtype=np.float64).reshape(N).copy()
        layer.delta_raw.data = _inv_softplus(np.broadcast_to(np.asarray(delta, dtype=np.float64), (M,)).copy())
        layer.D_skip.data = np.zeros(M) if D is None else np.broadcast_to(np.asarray(D, dtype=np.float64), (M,)).copy()
        return layer

    def A(self) -> Tensor:
        return -exp(self.A_log)

    def step_params(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(delta [Bt,L,M], B [Bt,L,N], C [Bt,L,N]) for a batched input ``x[Bt,L,M]``."""
        bt, L, M = x.shape
        if self.selective:
            return softplus(self.proj_delta(x)), self.proj_B(x), self.proj_C(x)
        N = self.state_size
        delta = broadcast_to(reshape(softplus(self.delta_raw), (1, 1, M)), (bt, L, M))
        B = broadcast_to(reshape(self.B, (1, 1, N)), (bt, L, N))
        C = broadcast_to(reshape(self.C, (1, 1, N)), (bt, L, N))
        return delta, B, C

    def forward(self, x) -> Tensor:
        return ssm_scan_recurrent(x, self, self.selective)


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected a [L,M] or [Bt,L,M] sequence, got shape {x.shape}")
    return x, False


def ssm_scan_recurrent(x, layer: SsmLayer, selective: bool | None = None) -> Tensor:
    """Run the recurrence step by step over ``x[L,M]`` (or ``[Bt,L,M]``)."""
    if selective is None:
        selective = layer.selective
    if selective != layer.selective:
        raise ValueError(f"layer was built with selective={layer.selective}")
    xb, squeeze = _batched(x)
    if xb.shape[-1] != layer.channels:
        raise ValueError(f"layer has {layer.channels} channels, input has {xb.shape[-1]}")
    delta, B, C = layer.step_params(xb)
    y = selective_scan(xb, delta, layer.A(), B, C, layer.D_skip)
    return reshape(y, y.shape[1:]) if squeeze else y


def ssm_kernel(layer: SsmLayer, length: int) -> np.ndarray:
    """Materialised convolution kernel ``K[l, m] = sum_n C_n Abar_mn**l Bbar_mn``."""
    if layer.selective:
        raise ValueError("the convolution kernel exists only for LTI layers")
    A = -np.exp(layer.A_log.data)
    delta = np.logaddexp(0.0, layer.delta_raw.data)
    a_bar, b_bar = discretize(A, layer.B.data[None, :], delta[:, None])
    powers = a_bar[None] ** np.arange(length)[:, None, None]       # [L, M, N]
    return np.einsum("lmn,mn,n->lm", powers, b_bar, layer.C.data)


def ssm_kernel_conv(x, layer: SsmLayer) -> Tensor:
    """Causal convolution of ``x`` with :func:`ssm_kernel` plus the skip term.

    Forward-only (no gradient); used as the parallel LTI execution mode.
    """
    if layer.selective:
        raise ValueError("ssm_kernel_conv requires an LTI layer; selective parameters have no fixed kernel")
    xd = as_tensor(x).data
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    L = xd.shape[1]
    K = ssm_kernel(layer, L)
    n = 1 << int(np.ceil(np.log2(2 * L)))
    y = np.fft.irfft(np.fft.rfft(xd, n, axis=1) * np.fft.rfft(K, n, axis=0)[None], n, axis=1)[:, :L]
    y = y + layer.D_skip.data * xd
    return Tensor(y[0] if squeeze else y)


def causal_depthwise_conv1d(x, weight, bias) -> Tensor:
    """Per-channel causal conv over the sequence axis: ``x[Bt,L,E]``, ``weight[E,k]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    bt, L, E = x.shape
    k = weight.shape[1]
    xp = np.concatenate([np.zeros((bt, k - 1, E)), x.data], axis=1)
    wd = weight.data
    out = bias.data + sum(xp[:, j:j + L] * wd[:, j] for j in range(k))

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, j:j + L] += g * wd[:, j]
            gw[:, j] = (g * xp[:, j:j + L]).sum(axis=(0, 1))
        return gxp[:, k - 1:], gw, g.sum(axis=(0, 1))

    return make_op("causal_conv1d", out, (x, weight, bias), bw)


class MambaBlock(Module):
    """Pre-norm residual block: in_proj -> (short conv, silu, selective SSM) x silu gate -> out_proj."""

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16, expand: int = 2,
                 d_conv: int = 4, zero_out: bool = False, dt_range: tuple[float, float] = (1e-3, 1e-1)):
        self.d_model, self.d_inner = d_model, expand * d_model
        E = self.d_inner
        self.norm = LayerNorm(d_model)
        self.in_proj = Linear(d_model, 2 * E, rng)
        self.conv_weight = Parameter(rng.uniform(-1, 1, size=(E, d_conv)) / np.sqrt(d_conv))
        self.conv_bias = Parameter(np.zeros(E))
        self.ssm = SsmLayer(E, d_state, rng, selective=True, dt_range=dt_range)
        self.out_proj = Linear(E, d_model, rng, zero=zero_out)

    def forward(self, seq) -> Tensor:
        xb, squeeze = _batched(seq)
        E = self.d_inner
        xz = self.in_proj(self.norm(xb))
        u = silu(causal_depthwise_conv1d(xz[..., :E], self.conv_weight, self.conv_bias))
        y = ssm_scan_recurrent(u, self.ssm) * silu(xz[..., E:])
        out = xb + self.out_proj(y)
        return reshape(out, out.shape[1:]) if squeeze else out


def mamba_block_forward(seq, block: MambaBlock) -> Tensor:
    return block(seq)


class SelfAttention(Module):
    """Single-head scaled dot-product self-attention (quadratic-cost reference mixer)."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        self.q = Linear(d_model, d_model, rng, bias=False)
        self.k = Linear(d_model, d_model, rng, bias=False)
        self.v = Linear(d_model, d_model, rng, bias=False)
        self.o = Linear(d_model, d_model, rng, bias=False)

    def forward(self, seq) -> Tensor:
        seq = as_tensor(seq)
        q, k, v = self.q(seq), self.k(seq), self.v(seq)
        att = softmax(matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d_model)), axis=-1)
        return self.o(matmul(att, v))


def naive_self_attention(seq, attn: SelfAttention) -> Tensor:
    return attn(seq)


@dataclass(frozen=True)
class SequenceLayout:
    """Raster (row-major) flattening of a ``(C, H, W)`` or ``(C, D, H, W)`` grid."""

    spatial_shape: tuple
    order: str = "forward"

    def __post_init__(self):
        if self.order not in ("forward", "backward"):
            raise ValueError(f"unknown scan order {self.order!r}")


def flatten_spatial(x, layout: SequenceLayout | None = None) -> Tensor:
    """``[C,*S]`` -> ``[L,C]`` or ``[B,C,*S]`` -> ``[B,L,C]`` in raster order."""
    x = as_tensor(x)
    if layout is None:
        layout = SequenceLayout(tuple(x.shape[1:]) if x.ndim == 3 else tuple(x.shape[2:]))
    n_sp = len(layout.spatial_shape)
    if tuple(x.shape[-n_sp:]) != tuple(layout.spatial_shape):
        raise ValueError(f"layout {layout.spatial_shape} does not match input {x.shape}")
    batched = x.ndim == n_sp + 2
    if not batched and x.ndim != n_sp + 1:
        raise ValueError(f"cannot flatten shape {x.shape} with layout {layout.spatial_shape}")
    lead = x.shape[:-n_sp]
    L = int(np.prod(layout.spatial_shape))
    seq = swapaxes(reshape(x, lead + (L,)), -1, -2)
    if layout.order == "backward":
        seq = flip(seq, -2)
    return seq


def unflatten_spatial(seq, layout: SequenceLayout) -> Tensor:
    seq = as_tensor(seq)
    if layout.order == "backward":
        seq = flip(seq, -2)
    L = int(np.prod(layout.spatial_shape))
    if seq.shape[-2] != L:
        raise ValueError(f"sequence length {seq.shape[-2]} does not match layout {layout.spatial_shape}")
    grid = swapaxes(seq, -1, -2)
    return reshape(grid, grid.shape[:-1] + tuple(layout.spatial_shape))


def bidirectional(mixer, seq) -> Tensor:
    """Average of the mixer run forward and over the reversed sequence (re-reversed).

    Batched ``[B,L,C]`` input runs both directions as one ``2B`` batch through the mixer.
    """
    seq = as_tensor(seq)
    if seq.ndim != 3:
        fwd = mixer(seq)
        bwd = flip(mixer(flip(seq, -2)), -2)
        return (fwd + bwd) * 0.5
    b = seq.shape[0]
    both = mixer(concat([seq, flip(seq, -2)], axis=0))
    return (both[:b] + flip(both[b:], -2)) * 0.5


__all__ = [
    "MambaBlock",
    "SelfAttention",
    "SequenceLayout",
    "SsmLayer",
    "bidirectional",
    "causal_depthwise_conv1d",
    "discretize",
    "flatten_spatial",
    "mamba_block_forward",
    "naive_self_attention",
    "selective_scan",
    "ssm_kernel",
    "ssm_kernel_conv",
    "ssm_scan_recurrent",
    "unflatten_spatial",
]
