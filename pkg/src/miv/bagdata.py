"""Polyp views, query/bag exemplars, patient-level splits and a synthetic generator.

Each polyp owns five views: 1 first partial, 2 first full, 3 best full,
4 last full, 5 last partial. Queries are always full views (2-4).
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompletePolypError, InsufficientDataError, ParameterError
from .numerics import make_rng

VIEWS = (1, 2, 3, 4, 5)
QUERY_VIEWS = (2, 3, 4)
BAG_SIZE = 4

# patients with 1, 2, 3, 4 and 5+ polyps among the 754 fully-exported patients
CLINICAL_POLYP_COUNTS = (263, 204, 113, 77, 97)
# the 97 patients in the 5+ bucket carry 1912 - 1318 = 594 polyps
CLINICAL_FIVE_PLUS_MEAN = 594 / 97


@dataclass(frozen=True)
class InstanceRecord:
    patient_id: str
    polyp_id: str
    view_index: int
    embedding: np.ndarray = field(compare=False, repr=False)

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.patient_id, self.polyp_id, self.view_index)


@dataclass(frozen=True)
class Exemplar:
    query: np.ndarray = field(compare=False, repr=False)
    bag: np.ndarray = field(compare=False, repr=False)
    label: bool
    query_key: tuple[str, str, int]
    bag_keys: tuple[tuple[str, str, int], ...]

    @property
    def patient_id(self) -> str:
        return self.query_key[0]

    @property
    def patients(self) -> set[str]:
        return {self.query_key[0]} | {k[0] for k in self.bag_keys}


def _sorted_records(records):
    return sorted(records, key=lambda r: r.key)


def group_polyps(records) -> dict[tuple[str, str], dict[int, InstanceRecord]]:
    """``(patient, polyp) -> {view_index: record}`` in canonical order."""
    polyps: dict[tuple[str, str], dict[int, InstanceRecord]] = {}
    for r in _sorted_records(records):
        if r.view_index not in VIEWS:
            raise ParameterError(f"view index {r.view_index} outside 1..5 for {r.key}")
        views = polyps.setdefault((r.patient_id, r.polyp_id), {})
        if r.view_index in views:
            raise IncompletePolypError(f"duplicate view {r.key}")
        views[r.view_index] = r
    return polyps


def _complete_polyps(records):
    polyps = group_polyps(records)
    bad = [k for k, v in polyps.items() if sorted(v) != list(VIEWS)]
    if bad:
        raise IncompletePolypError(f"polyps without exactly five views: {bad}")
    return polyps


def _make_exemplar(query: InstanceRecord, bag: list[InstanceRecord], label: bool) -> Exemplar:
    return Exemplar(
        query=query.embedding,
        bag=np.stack([r.embedding for r in bag]),
        label=label,
        query_key=query.key,
        bag_keys=tuple(r.key for r in bag),
    )


def build_positive_exemplars(records, policy: str = "one-per-polyp", rng=None,
                             query_view: int | None = None) -> list[Exemplar]:
    """One query view from {2, 3, 4} per polyp, the other four views as the bag.

    ``policy="all-three"`` emits an exemplar for each eligible query view;
    ``query_view`` pins the query view for every polyp.
    """
    if policy not in ("one-per-polyp", "all-three"):
        raise ParameterError(f"unknown positive policy {policy!r}")
    if query_view is not None and query_view not in QUERY_VIEWS:
        raise ParameterError(f"query view must be one of {QUERY_VIEWS}, got {query_view}")
    if rng is None:
        rng = make_rng(0)
    out = []
    for views in _complete_polyps(records).values():
        if query_view is not None:
            qvs = [query_view]
        elif policy == "all-three":
            qvs = list(QUERY_VIEWS)
        else:
            qvs = [int(rng.choice(QUERY_VIEWS))]
        for qv in qvs:
            bag = [views[v] for v in VIEWS if v != qv]
            out.append(_make_exemplar(views[qv], bag, True))
    return out


def build_negative_exemplars(records, ratio: float = 1.0, rng=None) -> list[Exemplar]:
    """Query from one polyp, bag of four views that never show that polyp.

    Patients with several polyps supply the bag from their own other polyps
    (sampled at image level, so polyps may mix); single-polyp patients get a
    bag drawn from one randomly chosen other patient. ``round(ratio * P)``
    negatives are emitted for ``P`` polyps: every polyp serves as query
    ``floor(ratio)`` times, the remainder is spread over randomly chosen
    polyps.
    """
    if ratio < 0:
        raise ParameterError("ratio must be non-negative")
    if rng is None:
        rng = make_rng(0)
    polyps = _complete_polyps(records)
    keys = list(polyps)
    if len(keys) < 2:
        raise InsufficientDataError("negative exemplars need at least two polyps")
    by_patient: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for k in keys:
        by_patient[k[0]].append(k)
    patients = sorted(by_patient)

    total = int(round(ratio * len(keys)))
    reps, rem = divmod(total, len(keys))
    chosen = [k for k in keys for _ in range(reps)]
    if rem:
        extra = rng.choice(len(keys), size=rem, replace=False)
        chosen += [keys[i] for i in sorted(extra)]

    out = []
    for key in chosen:
        patient = key[0]
        query = polyps[key][int(rng.choice(QUERY_VIEWS))]
        others = [k for k in by_patient[patient] if k != key]
        if not others:
            candidates = [p for p in patients if p != patient]
            other_patient = candidates[int(rng.integers(len(candidates)))]
            others = by_patient[other_patient]
        pool = [polyps[k][v] for k in others for v in VIEWS]
        pick = rng.choice(len(pool), size=BAG_SIZE, replace=False)
        out.append(_make_exemplar(query, [pool[i] for i in pick], False))
    return out


def build_exemplars(records, rng=None, policy: str = "one-per-polyp", ratio: float = 1.0):
    if rng is None:
        rng = make_rng(0)
    return build_positive_exemplars(records, policy, rng) + build_negative_exemplars(records, ratio, rng)


# ----------------------------------------------------------------------------
# patient-level splits


@dataclass(frozen=True)
class SplitPlan:
    test_patients: frozenset
    folds: tuple
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_patients(self, fold: int) -> frozenset:
        return frozenset().union(*(f for i, f in enumerate(self.folds) if i != fold))

    def group_of(self, patient: str):
        """``"test"``, a fold index, or ``None`` for unassigned patients."""
        if patient in self.test_patients:
            return "test"
        for i, f in enumerate(self.folds):
            if patient in f:
                return i
        return None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_patients": sorted(self.test_patients),
            "folds": [sorted(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(frozenset(d["test_patients"]), tuple(frozenset(f) for f in d["folds"]),
                   int(d["seed"]))


def make_split(patients, test_frac: float = 0.2, k: int = 10, seed: int = 0) -> SplitPlan:
    """Draw ``floor(test_frac * n)`` test patients, then deal the rest into ``k`` folds.

    Fold sizes differ by at most one; the first ``(n - n_test) % k`` folds
    take the extra patient.
    """
    if not 0.0 <= test_frac < 1.0:
        raise ParameterError(f"test_frac must lie in [0, 1), got {test_frac}")
    ids = sorted(set(patients))
    n_test = math.floor(test_frac * len(ids) + 1e-9)
    if k < 1 or k > len(ids) - n_test:
        raise ParameterError(f"cannot form {k} non-empty folds from {len(ids) - n_test} patients")
    perm = make_rng(seed).permutation(len(ids))
    test = frozenset(ids[i] for i in perm[:n_test])
    folds = tuple(frozenset(ids[i] for i in chunk) for chunk in np.array_split(perm[n_test:], k))
    return SplitPlan(test, folds, seed)


@dataclass
class SplitReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "split ok: no violations"
        return f"{len(self.violations)} violation(s):\n" + "\n".join(self.violations)


def validate_split(plan: SplitPlan, exemplars=(), patients=None) -> SplitReport:
    """Check the leakage contract of ``plan`` against ``exemplars``.

    Reports test/fold overlaps, patients shared by two folds, patients that
    belong nowhere, and any exemplar whose bag draws on a patient from a
    different group than its query patient (such an exemplar would cross a
    train/validation or train/test boundary).
    """
    report = SplitReport()
    for i, fold in enumerate(plan.folds):
        for p in sorted(fold & plan.test_patients):
            report.violations.append(f"patient {p} is in the test set and in fold {i}")
    for i in range(plan.k):
        for j in range(i + 1, plan.k):
            for p in sorted(plan.folds[i] & plan.folds[j]):
                report.violations.append(f"patient {p} is in folds {i} and {j}")
    known = set(patients or ())
    for e in exemplars:
        known |= e.patients
    for p in sorted(known):
        if plan.group_of(p) is None:
            report.violations.append(f"patient {p} is in neither the test set nor any fold")
    for n, e in enumerate(exemplars):
        g = plan.group_of(e.patient_id)
        for p in sorted({k[0] for k in e.bag_keys}):
            gp = plan.group_of(p)
            if gp != g:
                report.violations.append(
                    f"exemplar {n}: query patient {e.patient_id} ({_group_name(g)}) "
                    f"draws bag patient {p} ({_group_name(gp)})")
    return report


def _group_name(g) -> str:
    return g if isinstance(g, str) or g is None else f"fold {g}"


@dataclass
class SplitExemplars:
    test: list
    folds: list

    def train(self, fold: int) -> list:
        return [e for i, f in enumerate(self.folds) if i != fold for e in f]

    def all(self) -> list:
        return self.test + [e for f in self.folds for e in f]


def build_split_exemplars(records, plan: SplitPlan, rng=None, policy: str = "one-per-polyp",
                          ratio: float = 1.0) -> SplitExemplars:
    """Build exemplars separately inside the test set and inside each fold.

    Cross-patient negatives therefore never reach across a split boundary.
    """
    if rng is None:
        rng = make_rng(plan.seed)
    by_patient = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)

    def group(patients):
        recs = [r for p in sorted(patients) for r in by_patient.get(p, ())]
        return build_exemplars(recs, rng, policy, ratio) if recs else []

    test = group(plan.test_patients)
    folds = [group(f) for f in plan.folds]
    return SplitExemplars(test, folds)


# ----------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic polyp-view generator.

    Every polyp gets a latent vector, partly shared with the other polyps of
    the same patient (``patient_share``). Full views (2-4) are the latent
    plus Gaussian noise. Partial views (1, 5) are blended toward a
    patient-level background vector by ``partial_corruption``. Distractor
    views are pure background plus noise; ``distractor_fraction`` is the
    expected share of bag instances that are distractors, drawn from the
    partial views first (probability ``min(1, 2f)`` each) and from the full
    views only beyond ``f = 0.5`` (probability ``2f - 1`` each).
    """

    n_patients: int = 754
    polyp_probs: tuple = tuple(c / 754 for c in CLINICAL_POLYP_COUNTS)
    five_plus_mean: float = CLINICAL_FIVE_PLUS_MEAN
    latent_dim: int = 256
    view_noise: float = 0.5
    partial_corruption: float = 0.5
    distractor_fraction: float = 0.0
    patient_share: float = 0.3
    seed: int = 0

    def __post_init__(self):
        probs = np.asarray(self.polyp_probs, dtype=np.float64)
        if probs.shape != (5,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ParameterError("polyp_probs must be five non-negative values summing to 1")
        if self.five_plus_mean < 5:
            raise ParameterError("five_plus_mean must be at least 5")
        if self.n_patients < 1 or self.latent_dim < 1:
            raise ParameterError("n_patients and latent_dim must be positive")
        if self.view_noise < 0:
            raise ParameterError("view_noise must be non-negative")
        for name in ("partial_corruption", "distractor_fraction", "patient_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")


def polyp_counts(config: SynthConfig, rng) -> np.ndarray:
    bucket = rng.choice(5, size=config.n_patients, p=np.asarray(config.polyp_probs))
    counts = bucket + 1
    big = bucket == 4
    counts[big] = 5 + rng.poisson(config.five_plus_mean - 5, size=int(big.sum()))
    return counts


def synth_generate(config: SynthConfig) -> list[InstanceRecord]:
    """Five single-precision views per polyp, deterministic given ``config.seed``."""
    rng = make_rng(config.seed)
    d, sigma = config.latent_dim, config.view_noise
    c, f, a = config.partial_corruption, config.distractor_fraction, config.patient_share
    p_partial, p_full = min(1.0, 2 * f), max(0.0, 2 * f - 1)
    counts = polyp_counts(config, rng)
    width = len(str(config.n_patients - 1))
    records = []
    for pi, n_polyps in enumerate(counts):
        pid = f"P{pi:0{width}d}"
        background = rng.standard_normal(d)
        shared = rng.standard_normal(d)
        for k in range(n_polyps):
            latent = math.sqrt(1 - a) * rng.standard_normal(d) + math.sqrt(a) * shared
            noise = rng.standard_normal((5, d)) * sigma
            flips = rng.random(5)
            for v in VIEWS:
                partial = v in (1, 5)
                if flips[v - 1] < (p_partial if partial else p_full):
                    x = background + noise[v - 1]
                elif partial:
                    x = (1 - c) * latent + c * background + noise[v - 1]
                else:
                    x = latent + noise[v - 1]
                records.append(InstanceRecord(pid, str(k), v, x.astype(np.float32)))
    return records


def patients_of(records) -> list[str]:
    return sorted({r.patient_id for r in records})


def embedding_matrix(records) -> np.ndarray:
    return np.stack([r.embedding for r in records]) if records else np.zeros((0, 0), np.float32)
