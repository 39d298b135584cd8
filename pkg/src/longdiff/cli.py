"""Command-line entry points.

Every verb works inside one run directory (``output_dir`` of the config, or ``--out``)::

    config.json                 the config every artifact below was produced with
    data/manifest.json          cohort, splits, z-score stats; data/images/*.pgm
    gate/checkpoint.ckpt        + history.csv, recon_*.pgm grids
    stage1/checkpoint.ckpt      + history.csv, samples_*.pgm grids
    stage2/checkpoint.ckpt      + history.csv, samples_*.pgm grids
    eval/                       report.csv, report.json, summary.txt
    bench/                      bench.csv, trend.json

Failures print one JSON object on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autograd.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import SamplerConfig, sample_latent
from .pgm import image_grid, read_pgm, write_pgm
from .phantoms import STATUSES, STRUCTURES, ConditioningVector, ToySubject, ZScoreStats, one_hot
from . import pipeline as P
from .unet import ConditionalDenoiser, StepCond, cond_matrix, encode_baseline

Z_WARN = 3.0


class CliError(RuntimeError):
    """An expected failure with a message meant for the user."""


class MissingArtifact(CliError):
    pass


class HashMismatch(CliError):
    pass


# ---------------------------------------------------------------- run directory

class Run:
    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg, self.force = cfg, force
        self.root = Path(cfg.output_dir)
        self.hash = cfg.config_hash()

    @property
    def manifest_path(self) -> Path:
        return self.root / "data" / "manifest.json"

    def ckpt(self, stage: str) -> Path:
        return self.root / stage / "checkpoint.ckpt"

    def sync_config(self) -> None:
        """Persist the config; an existing one with another hash is refused unless forced."""
        path = self.root / "config.json"
        if path.exists() and not self.force:
            old = RunConfig.from_dict(json.loads(path.read_text()))
            if old.config_hash() != self.hash:
                raise HashMismatch(f"{path} has config hash {old.config_hash()}, this run has {self.hash}; "
                                   "use --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, (json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    def check_hash(self, meta: dict, what: str) -> None:
        if meta.get("config_hash") != self.hash and not self.force:
            raise HashMismatch(f"{what} was written with config hash {meta.get('config_hash')}, "
                               f"this run has {self.hash}; use --force to proceed anyway")

    def load_dataset(self) -> P.Dataset:
        if not self.manifest_path.exists():
            raise MissingArtifact(f"dataset manifest not found: {self.manifest_path} (run gen-data first)")
        m = json.loads(self.manifest_path.read_text())
        self.check_hash(m, str(self.manifest_path))
        cohort = [ToySubject.from_dict(d) for d in m["subjects"]]
        return P.dataset_from_subjects(cohort, m["splits"], ZScoreStats.from_dict(m["zscore"]), m["image_size"])

    def load_complete(self, stage: str, iterations: int) -> tuple[dict, dict]:
        path = self.ckpt(stage)
        if not path.exists():
            raise MissingArtifact(f"{stage} checkpoint not found: {path}")
        tensors, meta = load_checkpoint(path)
        self.check_hash(meta, str(path))
        if meta["step"] < iterations:
            raise MissingArtifact(f"{stage} checkpoint {path} is incomplete "
                                  f"({meta['step']}/{iterations} steps); rerun its training command")
        return tensors, meta

    def gate(self):
        tensors, _ = self.load_complete("gate", self.cfg.gate.iterations)
        gate = P.make_gate(self.cfg)
        gate.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        return gate.freeze()

    def unet(self):
        tensors, _ = self.load_complete("stage1", self.cfg.diffusion.stage1_iterations)
        unet = P.make_unet(self.cfg)
        unet.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        return unet

    def control(self, unet):
        tensors, _ = self.load_complete("stage2", self.cfg.diffusion.stage2_iterations)
        control = P.make_control(self.cfg, unet)
        control.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        return control


def history_csv(history: list[dict]) -> str:
    keys = ["step"] + sorted({k for rec in history for k in rec} - {"step"})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for rec in history:
        w.writerow([repr(rec[k]) if isinstance(rec.get(k), float) else rec.get(k, "") for k in keys])
    return buf.getvalue()


def _train_loop(run: Run, stage: str, trainer, step_fn, iterations: int, every: int, stop_after: int | None,
                on_checkpoint) -> dict:
    path = run.ckpt(stage)
    if path.exists():
        tensors, meta = load_checkpoint(path)
        run.check_hash(meta, str(path))
        trainer.load_state(tensors, meta)
    target = iterations if stop_after is None else min(iterations, stop_after)

    def save():
        tensors, meta = trainer.state()
        meta["config_hash"] = run.hash
        meta["iterations"] = iterations
        save_checkpoint(path, tensors, meta)
        atomic_write_bytes(path.parent / "history.csv", history_csv(trainer.history).encode())
        on_checkpoint(trainer)

    resumed_at = trainer.step
    while trainer.step < target:
        step_fn()
        if trainer.step % every == 0 or trainer.step == target:
            save()
    if trainer.step == resumed_at and not path.exists():
        save()
    return {"stage": stage, "step": trainer.step, "iterations": iterations, "resumed_at": resumed_at,
            "complete": trainer.step >= iterations, "checkpoint": str(path)}


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, args) -> dict:
    run.sync_config()
    ds = P.build_dataset(run.cfg)
    img_dir = run.root / "data" / "images"
    split_of = {s.id: name for name in ("train", "val", "test") for s in ds.split(name)}
    images = []
    for s in ds.cohort:
        for k, a in enumerate(s.visit_ages):
            rel = f"images/s{s.id:04d}_v{k}.pgm"
            write_pgm(run.root / "data" / rel, P.baseline_image(s, a, ds.size))
            images.append({"subject": s.id, "visit": k, "age": a, "split": split_of[s.id], "file": rel})
    manifest = {"config_hash": run.hash, "seed": run.cfg.seed, "image_size": ds.size,
                "subjects": [s.to_dict() for s in ds.cohort],
                "splits": {n: [s.id for s in ds.split(n)] for n in ("train", "val", "test")},
                "zscore": ds.stats.to_dict(), "images": images}
    atomic_write_bytes(run.manifest_path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return {"manifest": str(run.manifest_path), "subjects": len(ds.cohort), "images": len(images),
            "image_dir": str(img_dir)}


def cmd_train_gate(run: Run, args) -> dict:
    run.sync_config()
    ds = run.load_dataset()
    images = P.visit_images(ds.train, ds.size)
    preview = P.visit_images(ds.val, ds.size)[:16]
    trainer = P.gate_trainer(run.cfg)

    def grid(tr):
        recon = tr.model.decode_array(tr.model.encode_array(preview))
        write_pgm(run.root / "gate" / f"recon_{tr.step:06d}.pgm",
                  image_grid(np.concatenate([preview, recon]), cols=len(preview)))

    g = run.cfg.gate
    return _train_loop(run, "gate", trainer, lambda: trainer.train_step(images), g.iterations,
                       g.checkpoint_every, args.stop_after, grid)


def _preview_pairs(ds: P.Dataset, n: int = 4):
    pairs = P.eval_pairs(ds.val, 0.0) or P.visit_pairs(ds.val)
    return pairs[:n]


def cmd_train_diffusion(run: Run, args) -> dict:
    run.sync_config()
    cfg, stage = run.cfg, args.stage
    P.check_latent_shapes(cfg)
    ds = run.load_dataset()
    gate = run.gate()
    if stage == 1:
        unet, control = P.make_unet(cfg), None
    else:
        unet = run.unet()
        control = P.make_control(cfg, unet)
    data = P.pair_data(ds.train, gate, ds.stats, ds.size)
    trainer = P.diffusion_trainer(cfg, stage, unet, control)
    preview = _preview_pairs(ds)
    fast = replace(cfg.sampler, num_latent_samples=1)

    def grid(tr):
        from .evaluation import forecast
        pred, base = forecast(preview, gate, unet, control, P.make_sched(cfg), fast, ds.stats, ds.size)
        write_pgm(run.root / f"stage{stage}" / f"samples_{tr.step:06d}.pgm",
                  image_grid(np.concatenate([base, pred]), cols=len(preview)))

    d = cfg.diffusion
    iters = d.stage1_iterations if stage == 1 else d.stage2_iterations
    return _train_loop(run, f"stage{stage}", trainer, lambda: trainer.train_step(data), iters,
                       d.checkpoint_every, args.stop_after, grid)


def _covariates_from_json(path: str, stats: ZScoreStats) -> ConditioningVector:
    d = json.loads(Path(path).read_text())
    status = d.get("disease_status", "CN")
    if isinstance(status, str):
        if status not in STATUSES:
            raise CliError(f"disease_status must be one of {STATUSES}, got {status!r}")
        status = one_hot(status)
    vols = d["volumes"]
    if isinstance(vols, dict):
        vols = [vols[k] for k in STRUCTURES]
    cv = ConditioningVector(float(d["projected_age"]), float(d["acquisition_age"]), int(d.get("sex", 0)),
                            tuple(status), int(d.get("genetic_flag", 0)), tuple(float(v) for v in vols),
                            bool(d.get("normalized", False)))
    if cv.normalized:
        return cv
    z = lambda v, m, s: (v - m) / s
    return ConditioningVector(z(cv.projected_age, stats.age_mean, stats.age_std),
                              z(cv.acquisition_age, stats.age_mean, stats.age_std), cv.sex, cv.disease_status,
                              cv.genetic_flag,
                              tuple(z(v, m, s) for v, m, s in zip(cv.volumes, stats.volume_mean, stats.volume_std)),
                              True)


def cmd_sample(run: Run, args) -> dict:
    cfg = run.cfg
    ds = run.load_dataset()
    gate, unet = run.gate(), run.unet()
    control = run.control(unet)
    if args.baseline is not None:
        if args.covariates is None:
            raise CliError("--baseline needs --covariates")
        base = read_pgm(args.baseline)
        if base.shape != (ds.size, ds.size):
            raise CliError(f"baseline image is {base.shape}, the model expects {(ds.size, ds.size)}")
        base = base[None]
        cv = _covariates_from_json(args.covariates, ds.stats)
        source = {"baseline_file": str(args.baseline), "covariates_file": str(args.covariates)}
    else:
        if args.subject is None or args.baseline_age is None or args.target_age is None:
            raise CliError("give --subject, --baseline-age and --target-age, or --baseline and --covariates")
        by_id = {s.id: s for s in ds.cohort}
        if args.subject not in by_id:
            raise CliError(f"unknown subject id {args.subject}")
        s = by_id[args.subject]
        base = P.baseline_image(s, args.baseline_age, ds.size)
        cv = P.progress_covariates(s, args.target_age, ds.stats, acquisition_age=args.baseline_age, size=ds.size)
        source = {"subject": s.id, "baseline_age": args.baseline_age, "target_age": args.target_age}
    zvals = np.concatenate([[cv.projected_age, cv.acquisition_age], cv.volumes])
    out_of_range = bool(np.any(np.abs(zvals) > Z_WARN))
    if out_of_range:
        warnings.warn(f"covariates outside +/-{Z_WARN} z-score range: {np.round(zvals, 2).tolist()}")
    sampler = cfg.sampler if args.seed is None else replace(cfg.sampler, seed=args.seed)
    hint = encode_baseline(gate, base[None])
    model = ConditionalDenoiser(unet, control)
    z = sample_latent(model, StepCond(cond_matrix([cv]), hint), P.make_sched(cfg), sampler,
                      np.random.default_rng(sampler.seed), shape=(1,) + tuple(unet.latent_shape))
    img = gate.decode_array(z)[0, 0]
    out = Path(args.output)
    write_pgm(out, img)
    meta = {"config_hash": run.hash, "seed": sampler.seed, "num_ddim_steps": sampler.num_ddim_steps,
            "num_latent_samples": sampler.num_latent_samples, "eta": sampler.eta,
            "covariates": cv.to_dict(), "covariates_out_of_range": out_of_range, "output": str(out), **source}
    atomic_write_bytes(out.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return meta


def cmd_evaluate(run: Run, args) -> dict:
    cfg = run.cfg
    ds = run.load_dataset()
    if not ds.split(args.split):
        raise MissingArtifact(f"the dataset has no {args.split} split")
    gate, unet = run.gate(), run.unet()
    control = None if args.no_control else run.control(unet)
    report = P.evaluate(cfg, ds, gate, unet, control, args.split,
                        header={"config_hash": run.hash, "split": args.split, "control": control is not None})
    out = run.root / "eval"
    report.save(out)
    agg = report.aggregates()
    return {"report_dir": str(out), "pairs": len(report), "win_fraction": report.win_fraction(),
            "mean_ssim": agg["pipeline"]["ssim"]["mean"], "copy_mean_ssim": agg["copy"]["ssim"]["mean"]}


def cmd_bench_scan(run: Run, args) -> dict:
    from .bench import bench_scaling, rows_to_csv, trend_summary
    lengths = tuple(args.lengths) if args.lengths else (256, 512, 1024, 2048)
    rows = bench_scaling(lengths, repeats=args.repeats, seed=run.cfg.seed)
    out = run.root / "bench"
    atomic_write_bytes(out / "bench.csv", rows_to_csv(rows).encode())
    trend = trend_summary(rows)
    atomic_write_bytes(out / "trend.json", (json.dumps(trend, indent=2, sort_keys=True) + "\n").encode())
    return {"csv": str(out / "bench.csv"), "trend": trend}


def cmd_grad_check(run: Run, args) -> dict:
    from .gradsuite import run_suite
    res = run_suite(instances=args.instances, seed=run.cfg.seed)
    worst = max(res["max_rel_err"].values())
    res.update({"tolerance": args.tol, "worst": worst, "passed": worst < args.tol})
    out = run.root / "gradcheck.json"
    atomic_write_bytes(out, (json.dumps(res, indent=2, sort_keys=True) + "\n").encode())
    if not res["passed"]:
        bad = {k: v for k, v in res["max_rel_err"].items() if v >= args.tol}
        raise CliError(f"gradient check failed for {sorted(bad)}: {bad}")
    return res


COMMANDS = {"gen-data": cmd_gen_data, "train-gate": cmd_train_gate, "train-diffusion": cmd_train_diffusion,
            "sample": cmd_sample, "evaluate": cmd_evaluate, "bench-scan": cmd_bench_scan,
            "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="longdiff", description="Toy longitudinal latent-diffusion pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (default: <out>/config.json, else built-in defaults)")
    common.add_argument("--out", help="run directory, overrides output_dir of the config")
    common.add_argument("--seed", type=int, help="override the config seed (sample: the sampler seed)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 gives bit-exact reruns")
    common.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the phantom cohort and write the manifest")
    for name in ("train-gate", "train-diffusion"):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} (resumes from its checkpoint)")
        p.add_argument("--stop-after", type=int, help="checkpoint and stop once this many steps are done")
        if name == "train-diffusion":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p = sub.add_parser("sample", parents=[common], help="forecast one follow-up image")
    p.add_argument("--subject", type=int)
    p.add_argument("--baseline-age", type=float)
    p.add_argument("--target-age", type=float)
    p.add_argument("--baseline", help="baseline PGM instead of a cohort subject")
    p.add_argument("--covariates", help="covariate JSON to go with --baseline")
    p.add_argument("--output", required=True, help="output PGM; metadata goes next to it as .json")
    p = sub.add_parser("evaluate", parents=[common], help="score forecasts against truth and the copy baseline")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--no-control", action="store_true", help="evaluate the stage-1 denoiser alone")
    p = sub.add_parser("bench-scan", parents=[common], help="time and memory scaling of the sequence mixers")
    p.add_argument("--lengths", type=int, nargs="+")
    p.add_argument("--repeats", type=int, default=5)
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_json(args.config)
    elif args.out and (Path(args.out) / "config.json").exists():
        cfg = RunConfig.from_json(Path(args.out) / "config.json")
    else:
        cfg = RunConfig()
    if args.out:
        cfg = replace(cfg, output_dir=str(args.out))
    if args.seed is not None and args.command != "sample":
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            run = Run(resolve_config(args), force=args.force)
            result = COMMANDS[args.command](run, args)
    except (CliError, ValueError, TypeError, KeyError, OSError, RuntimeError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
