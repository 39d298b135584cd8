"""Glue between a RunConfig and the models: data, construction, training stages, evaluation.

Every random stream derives from ``cfg.seed`` with a fixed offset, so a persisted config
re-runs to the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .diffusion import NoiseSchedule, make_schedule
from .evaluation import EvalReport, evaluate_pipeline
from .gate import GateModel, GateTrainConfig, GateTrainer, RandomFeatureExtractor
from .phantoms import (
    ToySubject,
    ZScoreStats,
    fit_zscore,
    generate_cohort,
    make_splits,
    progress_covariates,
    render_phantom,
    visit_images,
    visit_pairs,
)
from .unet import (
    ControlBranch,
    DiffusionTrainConfig,
    DiffusionTrainer,
    PairData,
    UNetDenoiser,
    build_control_branch,
    cond_matrix,
    encode_baseline,
)

# offsets of the independent random streams
SEED_SPLIT, SEED_GATE_INIT, SEED_GATE_TRAIN = 1, 2, 3
SEED_UNET_INIT, SEED_STAGE1, SEED_CONTROL_INIT, SEED_STAGE2, SEED_PHI = 4, 5, 6, 7, 8


@dataclass
class Dataset:
    cohort: list[ToySubject]
    train: list[ToySubject]
    val: list[ToySubject]
    test: list[ToySubject]
    stats: ZScoreStats
    size: int

    def split(self, name: str) -> list[ToySubject]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def build_dataset(cfg: RunConfig) -> Dataset:
    cohort = generate_cohort(cfg.data.n_subjects, np.random.default_rng(cfg.seed))
    train, val, test = make_splits(cohort, cfg.data.split_ratios, np.random.default_rng(cfg.seed + SEED_SPLIT))
    return Dataset(cohort, train, val, test, fit_zscore(train, cfg.data.image_size), cfg.data.image_size)


def dataset_from_subjects(cohort, split_ids: dict, stats: ZScoreStats, size: int) -> Dataset:
    by_id = {s.id: s for s in cohort}
    parts = [[by_id[i] for i in split_ids[k]] for k in ("train", "val", "test")]
    return Dataset(list(cohort), *parts, stats, size)


def make_gate(cfg: RunConfig) -> GateModel:
    return GateModel(cfg.data.image_size, cfg.gate.latent_channels, cfg.gate.width,
                     rng=np.random.default_rng(cfg.seed + SEED_GATE_INIT))


def make_phi(cfg: RunConfig) -> RandomFeatureExtractor:
    return RandomFeatureExtractor(seed=cfg.seed + SEED_PHI)


def gate_trainer(cfg: RunConfig, gate: GateModel | None = None) -> GateTrainer:
    g = cfg.gate
    tcfg = GateTrainConfig(g.iterations, g.batch_size, g.lr, g.checkpoint_every, g.weights, g.sliced)
    return GateTrainer(gate or make_gate(cfg), tcfg, np.random.default_rng(cfg.seed + SEED_GATE_TRAIN),
                       phi=make_phi(cfg))


def make_sched(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def make_unet(cfg: RunConfig) -> UNetDenoiser:
    return UNetDenoiser(cfg.unet, np.random.default_rng(cfg.seed + SEED_UNET_INIT))


def check_latent_shapes(cfg: RunConfig) -> None:
    s = cfg.data.image_size // 4
    if (cfg.unet.latent_channels, cfg.unet.latent_size) != (cfg.gate.latent_channels, s):
        raise ValueError(f"denoiser latent {cfg.unet.latent_channels}x{cfg.unet.latent_size}^2 does not match "
                         f"GATE latent {cfg.gate.latent_channels}x{s}^2")


def pair_data(subjects: list[ToySubject], gate: GateModel, stats: ZScoreStats, size: int = 32) -> PairData:
    """All ordered visit pairs (identity pairs included) encoded by the frozen GATE."""
    lat = encode_baseline(gate, visit_images(subjects, size))
    index, k = {}, 0
    for s in subjects:
        for a in s.visit_ages:
            index[(s.id, a)] = k
            k += 1
    pairs = visit_pairs(subjects, include_identity=True)
    zb = lat[[index[(s.id, a)] for s, a, _ in pairs]]
    zt = lat[[index[(s.id, b)] for s, _, b in pairs]]
    cond = cond_matrix([progress_covariates(s, b, stats, acquisition_age=a, size=size) for s, a, b in pairs])
    return PairData(zb, zt, cond)


def diffusion_trainer(cfg: RunConfig, stage: int, unet: UNetDenoiser, control: ControlBranch | None = None
                      ) -> DiffusionTrainer:
    d = cfg.diffusion
    iters = d.stage1_iterations if stage == 1 else d.stage2_iterations
    seed = cfg.seed + (SEED_STAGE1 if stage == 1 else SEED_STAGE2)
    return DiffusionTrainer(stage, unet, make_sched(cfg), DiffusionTrainConfig(iters, d.batch_size, d.lr),
                            np.random.default_rng(seed), control)


def make_control(cfg: RunConfig, unet: UNetDenoiser) -> ControlBranch:
    return build_control_branch(unet, np.random.default_rng(cfg.seed + SEED_CONTROL_INIT))


def eval_pairs(subjects: list[ToySubject], min_gap: float):
    return [p for p in visit_pairs(subjects, include_identity=False) if p[2] - p[1] >= min_gap]


def evaluate(cfg: RunConfig, ds: Dataset, gate: GateModel, unet: UNetDenoiser, control: ControlBranch | None,
             split: str = "test", header: dict | None = None) -> EvalReport:
    pairs = eval_pairs(ds.split(split), cfg.data.min_gap)
    if not pairs:
        raise ValueError(f"no {split} pairs with an age gap >= {cfg.data.min_gap}")
    return evaluate_pipeline(pairs, gate, unet, control, make_sched(cfg), cfg.sampler, ds.stats,
                             make_phi(cfg), ds.size, header)


def baseline_image(subject: ToySubject, age: float, size: int = 32) -> np.ndarray:
    return render_phantom(subject, age, size).image
