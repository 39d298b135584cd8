"""Inference-time scaling of the sequence mixers: wall time and peak allocation vs length."""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import astuple, dataclass, fields

import numpy as np

from .autograd import Tensor, no_grad
from .ssm import SelfAttention, SsmLayer, naive_self_attention, ssm_kernel_conv, ssm_scan_recurrent

LENGTHS = (256, 512, 1024, 2048)
MODES = ("selective_scan", "lti_kernel_conv", "self_attention")


@dataclass
class BenchRow:
    mode: str
    L: int
    M: int
    N: int
    wall_ms: float
    peak_bytes: int


def _runner(mode: str, M: int, N: int, rng: np.random.Generator):
    if mode == "selective_scan":
        layer = SsmLayer(M, N, rng, selective=True)
        return lambda x: ssm_scan_recurrent(x, layer)
    if mode == "lti_kernel_conv":
        layer = SsmLayer(M, N, rng, selective=False)
        return lambda x: ssm_kernel_conv(x, layer)
    if mode == "self_attention":
        attn = SelfAttention(M, rng)
        return lambda x: naive_self_attention(x, attn)
    raise ValueError(f"unknown bench mode {mode!r}")


def measure(mode: str, L: int, M: int = 16, N: int = 16, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Best-of-``repeats`` wall time, then one traced run for the peak allocation."""
    rng = np.random.default_rng(seed)
    fn = _runner(mode, M, N, rng)
    x = Tensor(rng.standard_normal((1, L, M)))
    with no_grad():
        fn(x)                                   # warm-up
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(x)
            best = min(best, time.perf_counter() - t0)
        tracemalloc.start()
        try:
            fn(x)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    return BenchRow(mode, L, M, N, best * 1e3, int(peak))


def bench_scaling(lengths=LENGTHS, modes=MODES, M: int = 16, N: int = 16, repeats: int = 5,
                  seed: int = 0) -> list[BenchRow]:
    return [measure(mode, L, M, N, repeats, seed) for mode in modes for L in lengths]


def loglog_fit(x, y) -> tuple[float, float]:
    """Slope and R^2 of a least-squares line through ``(log x, log y)``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def trend_summary(rows: list[BenchRow]) -> dict:
    """Per mode: time ratio t(2L)/t(L) at the two largest lengths, memory log-log slope and R^2."""
    out = {}
    for mode in sorted({r.mode for r in rows}):
        rs = sorted((r for r in rows if r.mode == mode), key=lambda r: r.L)
        slope, r2 = loglog_fit([r.L for r in rs], [r.peak_bytes for r in rs])
        out[mode] = {"time_ratio": rs[-1].wall_ms / rs[-2].wall_ms, "mem_slope": slope, "mem_r2": r2,
                     "lengths": [r.L for r in rs]}
    return out


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(BenchRow)])
    for r in rows:
        w.writerow(astuple(r))
    return buf.getvalue()


def rows_from_csv(text: str) -> list[BenchRow]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [BenchRow(r["mode"], int(r["L"]), int(r["M"]), int(r["N"]), float(r["wall_ms"]),
                     int(r["peak_bytes"])) for r in rows]
