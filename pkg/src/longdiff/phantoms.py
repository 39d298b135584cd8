"""Synthetic longitudinal brain phantoms with analytically known region areas.

Each subject is a set of nested ellipses (skull, CSF gap, gray matter, white matter,
ventricles) plus two pairs of small discs (hippocampus, amygdala). Areas evolve
linearly with elapsed time at diagnosis- and genotype-dependent rates; the rendered
image is an 8x8-supersampled rasterisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

STRUCTURES = ("gray_matter", "hippocampus", "amygdala", "white_matter", "ventricles")
STATUSES = ("CN", "MCI", "AD")

# fractional change of each baseline area per toy-year, before multipliers
BASE_RATES = {
    "gray_matter": 0.012,
    "hippocampus": 0.0225,
    "amygdala": 0.018,
    "white_matter": 0.006,
    "ventricles": 0.0525,
}
STATUS_MULT = {"CN": 1.0, "MCI": 1.8, "AD": 3.0}
GENETIC_MULT = 1.2
RATE_JITTER = 0.1

# cumulative hippocampal loss (fraction of baseline area) that advances the diagnosis
CN_TO_MCI_LOSS = 0.10
MCI_TO_AD_LOSS = 0.12  # further loss after entering MCI

AGE_RANGE = (55.0, 90.0)
MAX_ELAPSED = 15.0
# linear change stays geometric-valid only while losses and ventricle growth are bounded
MAX_LOSS = 0.6
MAX_GROWTH = 2.0

INTENSITY = {
    "background": 0.0,
    "skull": 0.95,
    "csf": 0.12,
    "gray_matter": 0.5,
    "white_matter": 0.78,
    "ventricles": 0.06,
    "hippocampus": 0.32,
    "amygdala": 0.38,
}
_LABELS = ("background", "skull", "csf", "gray_matter", "white_matter", "ventricles",
           "hippocampus", "amygdala")


@dataclass
class ToySubject:
    id: int
    sex: int
    genetic_flag: int
    disease_status: str
    baseline_age: float
    atrophy_rate: dict
    visit_ages: list
    shape_seed: int

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.visit_ages, self.visit_ages[1:])):
            raise ValueError("visit ages must be strictly increasing")
        if any(r < 0 for r in self.atrophy_rate.values()):
            raise ValueError("atrophy rates must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySubject":
        return cls(**d)


@dataclass
class CohortParams:
    status_probs: tuple = (0.35, 0.40, 0.25)
    genetic_prob: float = 0.3
    baseline_age: tuple = (55.0, 78.0)
    visits: tuple = (2, 5)
    visit_gap: tuple = (1.5, 4.0)


@dataclass
class Geometry:
    """Per-subject baseline shape in pixel units (phantom frame, centred)."""

    center: tuple
    angle: float
    skull: tuple          # outer semi-axes
    skull_thickness: float
    brain: tuple          # baseline outer gray-matter semi-axes
    white: tuple          # baseline white-matter semi-axes
    ventricles: tuple     # baseline ventricle semi-axes
    hippo_pos: tuple      # (x, y) of the right disc; the left one is mirrored
    hippo_r: float
    amyg_pos: tuple
    amyg_r: float


def subject_geometry(subject: ToySubject, size: int = 32) -> Geometry:
    rng = np.random.default_rng(subject.shape_seed)
    u = size / 32.0
    scale = u * rng.uniform(0.93, 1.02) * (1.03 if subject.sex == 1 else 1.0)
    aspect = rng.uniform(0.86, 0.96)
    center = (size / 2 + rng.uniform(-0.6, 0.6) * u, size / 2 + rng.uniform(-0.6, 0.6) * u)
    angle = rng.uniform(-0.14, 0.14)
    skull = (14.2 * aspect * scale, 14.6 * scale)
    thick = 1.5 * scale
    brain = (skull[0] - thick - 0.6 * scale, skull[1] - thick - 0.6 * scale)
    white = (brain[0] * rng.uniform(0.74, 0.8), brain[1] * rng.uniform(0.74, 0.8))
    vent = (rng.uniform(2.6, 3.0) * scale, rng.uniform(1.5, 1.8) * scale)
    return Geometry(
        center=center, angle=angle, skull=skull, skull_thickness=thick, brain=brain, white=white,
        ventricles=vent,
        hippo_pos=(rng.uniform(4.6, 5.0) * scale, rng.uniform(3.6, 4.0) * scale),
        hippo_r=rng.uniform(1.45, 1.65) * scale,
        amyg_pos=(rng.uniform(3.8, 4.2) * scale, -rng.uniform(4.3, 4.7) * scale),
        amyg_r=rng.uniform(1.15, 1.3) * scale,
    )


def generate_cohort(n_subjects: int, rng: np.random.Generator, params: CohortParams | None = None) -> list[ToySubject]:
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    p = params or CohortParams()
    if abs(sum(p.status_probs) - 1.0) > 1e-9:
        raise ValueError("status probabilities must sum to 1")
    cohort = []
    for i in range(n_subjects):
        status = STATUSES[rng.choice(3, p=p.status_probs)]
        sex = int(rng.random() < 0.5)
        genetic = int(rng.random() < p.genetic_prob)
        age0 = float(rng.uniform(*p.baseline_age))
        mult = STATUS_MULT[status] * (GENETIC_MULT if genetic else 1.0)
        rates = {k: float(v * mult * rng.uniform(1 - RATE_JITTER, 1 + RATE_JITTER))
                 for k, v in BASE_RATES.items()}
        span = horizon(rates)
        n_vis = int(rng.integers(p.visits[0], p.visits[1] + 1))
        ages = [age0]
        for _ in range(n_vis - 1):
            nxt = ages[-1] + float(rng.uniform(*p.visit_gap))
            if nxt - age0 > span or nxt > AGE_RANGE[1]:
                break
            ages.append(nxt)
        cohort.append(ToySubject(i, sex, genetic, status, age0, rates, ages,
                                 int(rng.integers(2 ** 31))))
    return cohort


def horizon(rates: dict) -> float:
    """Longest elapsed time for which linear atrophy keeps every structure valid."""
    limits = [MAX_ELAPSED - 1.0, MAX_GROWTH / rates["ventricles"]]
    limits += [MAX_LOSS / rates[k] for k in STRUCTURES if k != "ventricles" and rates[k] > 0]
    return float(min(limits))


def _check_age(subject: ToySubject, age: float) -> float:
    tau = age - subject.baseline_age
    if tau < -1e-9:
        raise ValueError(f"age {age} precedes baseline age {subject.baseline_age}")
    if tau > min(MAX_ELAPSED, horizon(subject.atrophy_rate) + 1.0) or age > AGE_RANGE[1] + MAX_ELAPSED:
        raise ValueError(f"age {age} outside the modelled range")
    return max(tau, 0.0)


@dataclass
class Anatomy:
    """Semi-axes/radii at a given age plus the five analytic region areas."""

    brain: tuple
    white: tuple
    ventricles: tuple
    hippo_r: float
    amyg_r: float
    areas: dict = field(default_factory=dict)


def anatomy_at(subject: ToySubject, age: float, size: int = 32) -> Anatomy:
    g = subject_geometry(subject, size)
    tau = _check_age(subject, age)
    r = subject.atrophy_rate
    e_w0 = np.pi * g.white[0] * g.white[1]
    gm0 = np.pi * g.brain[0] * g.brain[1] - e_w0
    e_w = e_w0 * (1.0 - r["white_matter"] * tau)
    gm = gm0 * (1.0 - r["gray_matter"] * tau)
    s_w = np.sqrt(e_w / e_w0)
    s_b = np.sqrt((e_w + gm) / (e_w0 + gm0))
    s_v = np.sqrt(1.0 + r["ventricles"] * tau)
    vent = (g.ventricles[0] * s_v, g.ventricles[1] * s_v)
    hr = g.hippo_r * np.sqrt(1.0 - r["hippocampus"] * tau)
    ar = g.amyg_r * np.sqrt(1.0 - r["amygdala"] * tau)
    v_area = np.pi * vent[0] * vent[1]
    h_area = 2 * np.pi * hr * hr
    a_area = 2 * np.pi * ar * ar
    areas = {
        "gray_matter": float(gm),
        "hippocampus": float(h_area),
        "amygdala": float(a_area),
        "white_matter": float(e_w - v_area - h_area - a_area),
        "ventricles": float(v_area),
    }
    return Anatomy((g.brain[0] * s_b, g.brain[1] * s_b), (g.white[0] * s_w, g.white[1] * s_w),
                   vent, float(hr), float(ar), areas)


@dataclass
class Phantom:
    image: np.ndarray           # [1, size, size] in [0, 1]
    areas: dict                 # analytic areas, pixel units
    rendered_areas: dict        # supersampled label coverage, pixel units


def _label_map(subject: ToySubject, age: float, size: int, supersample: int) -> tuple[np.ndarray, Anatomy]:
    g = subject_geometry(subject, size)
    an = anatomy_at(subject, age, size)
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    X, Y = np.meshgrid(coords, coords)
    dx, dy = X - g.center[0], Y - g.center[1]
    c, s = np.cos(g.angle), np.sin(g.angle)
    qx, qy = c * dx + s * dy, -s * dx + c * dy

    def inside(ax):
        return (qx / ax[0]) ** 2 + (qy / ax[1]) ** 2 <= 1.0

    def disc(pos, rad):
        return ((np.abs(qx) - pos[0]) ** 2 + (qy - pos[1]) ** 2) <= rad * rad

    lab = np.zeros((n, n), dtype=np.int8)
    inner = (g.skull[0] - g.skull_thickness, g.skull[1] - g.skull_thickness)
    lab[inside(g.skull)] = _LABELS.index("skull")
    lab[inside(inner)] = _LABELS.index("csf")
    lab[inside(an.brain)] = _LABELS.index("gray_matter")
    lab[inside(an.white)] = _LABELS.index("white_matter")
    lab[inside(an.ventricles)] = _LABELS.index("ventricles")
    lab[disc(g.hippo_pos, an.hippo_r)] = _LABELS.index("hippocampus")
    lab[disc(g.amyg_pos, an.amyg_r)] = _LABELS.index("amygdala")
    return lab, an


def render_phantom(subject: ToySubject, age: float, size: int = 32, supersample: int = 8) -> Phantom:
    lab, an = _label_map(subject, age, size, supersample)
    lut = np.array([INTENSITY[k] for k in _LABELS])
    k = supersample
    img = lut[lab].reshape(size, k, size, k).mean(axis=(1, 3))
    counts = {name: float((lab == _LABELS.index(name)).sum()) / (k * k) for name in _LABELS}
    rendered = {
        "gray_matter": counts["gray_matter"],
        "hippocampus": counts["hippocampus"],
        "amygdala": counts["amygdala"],
        "white_matter": counts["white_matter"],
        "ventricles": counts["ventricles"],
    }
    return Phantom(np.clip(img, 0.0, 1.0)[None], an.areas, rendered)


def status_at(subject: ToySubject, age: float) -> str:
    """Diagnosis after applying the hippocampal-loss thresholds to the baseline status."""
    tau = _check_age(subject, age)
    loss = subject.atrophy_rate["hippocampus"] * tau
    level = STATUSES.index(subject.disease_status)
    if level == 0 and loss >= CN_TO_MCI_LOSS:
        level, loss = 1, loss - CN_TO_MCI_LOSS
    if level == 1 and loss >= MCI_TO_AD_LOSS:
        level = 2
    return STATUSES[level]


@dataclass
class ZScoreStats:
    age_mean: float
    age_std: float
    volume_mean: list
    volume_std: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreStats":
        return cls(**d)


@dataclass
class ConditioningVector:
    projected_age: float
    acquisition_age: float
    sex: int
    disease_status: tuple       # one-hot over (CN, MCI, AD)
    genetic_flag: int
    volumes: tuple              # in STRUCTURES order
    normalized: bool = False

    def __post_init__(self):
        if abs(sum(self.disease_status) - 1.0) > 1e-12 or len(self.disease_status) != 3:
            raise ValueError("disease_status must be a one-hot over 3 classes")
        if len(self.volumes) != len(STRUCTURES):
            raise ValueError(f"need {len(STRUCTURES)} volumes")

    def scalars(self) -> np.ndarray:
        """Scalar fields in token order: ages, sex, genetic flag, then volumes."""
        return np.array([self.projected_age, self.acquisition_age, float(self.sex),
                         float(self.genetic_flag), *self.volumes], dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disease_status"] = list(self.disease_status)
        d["volumes"] = list(self.volumes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConditioningVector":
        d = dict(d)
        d["disease_status"] = tuple(d["disease_status"])
        d["volumes"] = tuple(d["volumes"])
        return cls(**d)


def one_hot(status: str) -> tuple:
    return tuple(1.0 if s == status else 0.0 for s in STATUSES)


def fit_zscore(subjects: list[ToySubject], size: int = 32) -> ZScoreStats:
    ages, vols = [], []
    for s in subjects:
        for a in s.visit_ages:
            ages.append(a)
            areas = anatomy_at(s, a, size).areas
            vols.append([areas[k] for k in STRUCTURES])
    vols = np.array(vols)
    return ZScoreStats(float(np.mean(ages)), float(np.std(ages) + 1e-8),
                       vols.mean(axis=0).tolist(), (vols.std(axis=0) + 1e-8).tolist())


def progress_covariates(subject: ToySubject, target_age: float, stats: ZScoreStats | None = None,
                        acquisition_age: float | None = None, size: int = 32) -> ConditioningVector:
    """Analytic covariates at ``target_age`` (the stand-in for a learned progression model).

    ``acquisition_age`` is the age of the baseline scan (defaults to the subject's
    first visit). With ``stats`` every continuous field is z-scored.
    """
    acq = subject.baseline_age if acquisition_age is None else acquisition_age
    areas = anatomy_at(subject, target_age, size).areas
    vols = [areas[k] for k in STRUCTURES]
    proj, acq_v = float(target_age), float(acq)
    normalized = stats is not None
    if normalized:
        proj = (proj - stats.age_mean) / stats.age_std
        acq_v = (acq_v - stats.age_mean) / stats.age_std
        vols = [(v - m) / s for v, m, s in zip(vols, stats.volume_mean, stats.volume_std)]
    return ConditioningVector(proj, acq_v, subject.sex, one_hot(status_at(subject, target_age)),
                              subject.genetic_flag, tuple(float(v) for v in vols), normalized)


def make_splits(cohort: list[ToySubject], ratios=(0.80, 0.05, 0.15), rng: np.random.Generator | None = None):
    """Subject-level train/val/test partition."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    rng = rng or np.random.default_rng(0)
    n = len(cohort)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"cohort of {n} is too small for non-empty splits")
    order = rng.permutation(n)
    pick = lambda idx: [cohort[i] for i in sorted(idx)]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def visit_images(subjects: list[ToySubject], size: int = 32) -> np.ndarray:
    """All visit phantoms stacked as ``[n, 1, size, size]``."""
    return np.stack([render_phantom(s, a, size).image for s in subjects for a in s.visit_ages])


def visit_pairs(subjects: list[ToySubject], include_identity: bool = True) -> list[tuple[ToySubject, float, float]]:
    """(subject, baseline age, target age) for every ordered visit pair."""
    out = []
    for s in subjects:
        for i, a in enumerate(s.visit_ages):
            for b in s.visit_ages[i if include_identity else i + 1:]:
                out.append((s, a, b))
    return out
