"""Forecast evaluation against the true follow-up and the identity-copy baseline."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, SamplerConfig, sample_latent
from .metrics import SSIM_SIGMA, SSIM_WINDOW, mse, psnr_from_mse, random_perceptual_distance, ssim
from .phantoms import ZScoreStats, progress_covariates, render_phantom
from .unet import ConditionalDenoiser, StepCond, cond_matrix, encode_baseline

METRICS = ("mse", "ssim", "psnr", "rpd")


@dataclass
class PairRecord:
    subject: int
    baseline_age: float
    target_age: float
    mse: float
    ssim: float
    psnr: float
    rpd: float
    copy_mse: float
    copy_ssim: float
    copy_psnr: float
    copy_rpd: float

    @property
    def gap(self) -> float:
        return self.target_age - self.baseline_age


def _agg(values) -> dict:
    v = np.array(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    if len(finite) == 0:
        return {"mean": math.nan, "std": math.nan}
    return {"mean": float(finite.mean()), "std": float(finite.std())}


@dataclass
class EvalReport:
    records: list[PairRecord]
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def aggregates(self) -> dict:
        """Means/stds per metric for the pipeline and the copy baseline (finite PSNR only)."""
        out = {}
        for prefix, label in (("", "pipeline"), ("copy_", "copy")):
            out[label] = {m: _agg([getattr(r, prefix + m) for r in self.records]) for m in METRICS}
        return out

    def win_fraction(self) -> float:
        """Share of pairs where the pipeline SSIM beats the copy baseline's."""
        if not self.records:
            return math.nan
        return float(np.mean([r.ssim > r.copy_ssim for r in self.records]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in fields(PairRecord)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(getattr(r, n)) for n in names])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, header: dict | None = None) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0]
        recs = []
        for row in rows[1:]:
            vals = dict(zip(names, row))
            recs.append(PairRecord(int(vals.pop("subject")), **{k: float(v) for k, v in vals.items()}))
        return cls(recs, dict(header or {}))

    def to_json(self) -> str:
        return json.dumps({"header": self.header, "records": [asdict(r) for r in self.records],
                           "aggregates": self.aggregates(), "win_fraction": self.win_fraction()},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([PairRecord(**r) for r in d["records"]], d.get("header", {}))

    def save(self, out_dir: str | Path) -> None:
        from .autograd.checkpoint import atomic_write_bytes
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "report.csv", self.to_csv().encode())
        atomic_write_bytes(out / "report.json", self.to_json().encode())
        atomic_write_bytes(out / "summary.txt", self.summary_table().encode())

    def summary_table(self) -> str:
        agg = self.aggregates()
        spi = self.header.get("seconds_per_image", math.nan)
        lines = [f"{'method':<16}{'MSE':>12}{'SSIM':>10}{'PSNR':>10}{'RPD':>10}{'s/image':>10}"]
        for label, name, sec in (("pipeline", "pipeline", spi), ("copy", "copy-baseline", 0.0)):
            a = agg[label]
            lines.append(f"{name:<16}{a['mse']['mean']:>12.3e}{a['ssim']['mean']:>10.4f}"
                         f"{a['psnr']['mean']:>10.2f}{a['rpd']['mean']:>10.4f}{sec:>10.3f}")
        lines.append(f"pairs={len(self)}  pipeline SSIM > copy on {self.win_fraction():.1%}  "
                     f"(SSIM {SSIM_WINDOW}x{SSIM_WINDOW} Gaussian, sigma {SSIM_SIGMA}; RPD is not LPIPS)")
        return "\n".join(lines) + "\n"


def score(pred: np.ndarray, truth: np.ndarray, phi) -> dict:
    m = mse(pred, truth)
    return {"mse": m, "ssim": ssim(pred[0], truth[0]), "psnr": psnr_from_mse(m),
            "rpd": random_perceptual_distance(pred, truth, phi)}


def forecast(pairs, gate, unet, control, sched: NoiseSchedule, sampler: SamplerConfig,
             stats: ZScoreStats | None, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Predicted follow-up images for ``(subject, baseline_age, target_age)`` pairs.

    Returns (predicted images, baseline images), both ``[P,1,H,W]``.
    """
    base = np.stack([render_phantom(s, a, size).image for s, a, _ in pairs])
    cond = cond_matrix([progress_covariates(s, b, stats, acquisition_age=a, size=size) for s, a, b in pairs])
    hint = encode_baseline(gate, base)
    model = ConditionalDenoiser(unet, control)
    rng = np.random.default_rng(sampler.seed)
    z = sample_latent(model, StepCond(cond, hint if control is not None else None), sched, sampler, rng,
                      shape=(len(pairs),) + tuple(unet.latent_shape))
    return gate.decode_array(z), base


def evaluate_pipeline(pairs, gate, unet, control, sched: NoiseSchedule, sampler: SamplerConfig,
                      stats: ZScoreStats | None, phi, size: int = 32, header: dict | None = None) -> EvalReport:
    if not pairs:
        raise ValueError("no evaluation pairs")
    t0 = time.perf_counter()
    preds, base = forecast(pairs, gate, unet, control, sched, sampler, stats, size)
    elapsed = time.perf_counter() - t0
    recs = []
    for (s, a, b), pred, xb in zip(pairs, preds, base):
        truth = render_phantom(s, b, size).image
        p = score(pred, truth, phi)
        c = score(xb, truth, phi)          # copy baseline, independent of the models
        recs.append(PairRecord(int(s.id), float(a), float(b), **p, **{f"copy_{k}": v for k, v in c.items()}))
    hdr = {"ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "num_ddim_steps": sampler.num_ddim_steps,
           "num_latent_samples": sampler.num_latent_samples, "eta": sampler.eta, "seed": sampler.seed,
           "seconds_per_image": elapsed / len(pairs)}
    hdr.update(header or {})
    return EvalReport(recs, hdr)
