"""Synthetic longitudinal cohorts with planted, known token-outcome effects.

Every patient's learning period is fixed at generation time (the same
uniform visit-prefix rule the pipeline applies to controls), the true
log-odds is computed from planted tokens visible in that period, and only
then is the label drawn. Scores from the generative model are therefore
Bayes-optimal for anything trained on these records: no signal exists
outside the retained events.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (MODALITY_DIAG, MODALITY_MED, ClinicalEvent, PatientRecord,
                   Vocabulary)
from .rng import Rng

_MAX_ATTEMPTS = 60


@dataclass(frozen=True)
class PlantedEffect:
    """One token -> outcome association with optional context dependence.

    year_flip = (threshold, beta_before, beta_after): beta_before applies
    when the token's first occurrence year is <= threshold. age_decay
    shrinks beta by exp(-rate * years past age 50) at first occurrence.
    paired_med prescribes a medication to carriers with prescribe_prob;
    the medication itself contributes med_beta when present.
    """

    token: str
    beta: float = 0.0
    year_flip: tuple[int, float, float] | None = None
    age_decay: float | None = None
    paired_med: str | None = None
    prescribe_prob: float = 0.0
    med_beta: float = 0.0

    def effective_beta(self, year: int, age_months: int) -> float:
        if self.year_flip is not None:
            threshold, before, after = self.year_flip
            b = before if year <= threshold else after
        else:
            b = self.beta
        if self.age_decay is not None:
            b *= math.exp(-self.age_decay * max(0.0, age_months / 12.0 - 50.0))
        return b


@dataclass
class GeneratorConfig:
    n_patients: int
    disease_vocab_size: int = 60
    med_vocab_size: int = 40
    visit_min: int = 5
    visit_mean_extra: float = 14.0      # visits = visit_min + Poisson(this)
    events_mean_extra: float = 2.0      # events per visit = 1 + Poisson(this)
    visit_gap_months: tuple[int, int] = (2, 6)
    start_year_range: tuple[int, int] = (1986, 2008)
    age_extra_years: tuple[int, int] = (30, 62)  # start age = 16 + this
    target_prevalence: float = 0.13
    b0: float | None = None             # None: calibrate on the realized cohort
    outcome_code: str = "D_OUT"
    plant_prob: float = 0.3
    repeat_prob: float = 0.3
    zipf_exponent: float = 1.1
    med_fraction: float = 0.55          # background events drawn as medications
    effects: list[PlantedEffect] = field(default_factory=list)

    def disease_codes(self) -> list[str]:
        return [f"D{i:03d}" for i in range(self.disease_vocab_size)]

    def med_codes(self) -> list[str]:
        return [f"M{i:03d}" for i in range(self.med_vocab_size)]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.disease_codes() + [self.outcome_code], self.med_codes())


@dataclass
class GroundTruth:
    b0: float
    r: dict[str, float]
    p_true: dict[str, float]
    applied: dict[str, dict[str, float]]  # patient -> token -> beta applied


def plant_standard_suite(config: GeneratorConfig) -> GeneratorConfig:
    """Add the six-effect verification suite to a config.

    Risk +1.5, protective -1.0, null 0, a year-flip (+1.2 through 2000,
    -0.8 after), an age-attenuating risk (0.05/year past 50), and a
    disease->medication pair prescribed at 0.75 with a mildly protective
    medication.
    """
    if config.disease_vocab_size < 7 or config.med_vocab_size < 2:
        raise ValueError("vocabulary too small for the standard suite")
    effects = list(config.effects) + [
        PlantedEffect("D001", beta=1.5),
        PlantedEffect("D002", beta=-1.0),
        PlantedEffect("D003", beta=0.0),
        PlantedEffect("D004", year_flip=(2000, 1.2, -0.8)),
        PlantedEffect("D005", beta=1.3, age_decay=0.05),
        PlantedEffect("D006", beta=1.0, paired_med="M001",
                      prescribe_prob=0.75, med_beta=-0.5),
    ]
    return replace(config, effects=effects)


def plant_background_effects(config: GeneratorConfig, n: int = 10,
                             beta_scale: float = 1.0,
                             start_index: int = 10) -> GeneratorConfig:
    """Add n alternating risk/protective filler tokens (D<start_index>...).

    These enrich the cohort's signal so the Bayes-optimal AUROC lands near
    0.9 without touching the fixed verification suite.
    """
    if start_index + n > config.disease_vocab_size:
        raise ValueError("vocabulary too small for background effects")
    magnitudes = (1.3, 1.0, 1.5, 0.9, 1.2)
    effects = list(config.effects)
    for i in range(n):
        beta = magnitudes[i % len(magnitudes)] * beta_scale * (1 if i % 2 == 0 else -1)
        effects.append(PlantedEffect(f"D{start_index + i:03d}", beta=beta))
    return replace(config, effects=effects)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def calibrate_intercept(r_values: np.ndarray, target: float) -> float:
    """Solve mean(sigmoid(b0 + r)) = target by bisection."""
    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + r_values).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _background_pools(config: GeneratorConfig):
    planted = {e.token for e in config.effects}
    planted |= {e.paired_med for e in config.effects if e.paired_med}
    diseases = [c for c in config.disease_codes() if c not in planted]
    meds = [c for c in config.med_codes() if c not in planted]
    if not diseases or not meds:
        raise ValueError("no background codes left after planting")

    def zipf(k):
        w = np.arange(1, k + 1, dtype=float) ** (-config.zipf_exponent)
        return w / w.sum()

    return diseases, zipf(len(diseases)), meds, zipf(len(meds))


_CAP_MONTH = 2014 * 12 + 9  # leave room for an outcome event within 2015


def _build_patient(config, rng, diseases, p_dis, meds, p_med):
    """One attempt at a patient's learning period. Returns None on a
    constraint miss (resampled by the caller)."""
    n_visits = config.visit_min + int(rng.poisson(config.visit_mean_extra))
    start_year = int(rng.integers(config.start_year_range[0], config.start_year_range[1] + 1))
    start_month = start_year * 12 + int(rng.integers(0, 12))
    age_extra = int(rng.integers(config.age_extra_years[0], config.age_extra_years[1] + 1))
    start_age = 192 + age_extra * 12 + int(rng.integers(0, 12))

    gaps = rng.integers(config.visit_gap_months[0], config.visit_gap_months[1] + 1,
                        size=n_visits)
    gaps[0] = 0
    months = start_month + np.cumsum(gaps)
    if months[-1] > _CAP_MONTH:
        return None

    # (visit, modality, code) triples; per-visit background then planted
    triples: list[tuple[int, str, str]] = []
    for v in range(n_visits):
        for _ in range(1 + int(rng.poisson(config.events_mean_extra))):
            if rng.random() < config.med_fraction:
                triples.append((v, MODALITY_MED, meds[int(rng.choice(len(meds), p=p_med))]))
            else:
                triples.append((v, MODALITY_DIAG, diseases[int(rng.choice(len(diseases), p=p_dis))]))
    for eff in config.effects:
        if rng.random() >= config.plant_prob:
            continue
        v = int(rng.integers(0, n_visits))
        triples.append((v, MODALITY_DIAG, eff.token))
        if v < n_visits - 1 and rng.random() < config.repeat_prob:
            triples.append((int(rng.integers(v + 1, n_visits)), MODALITY_DIAG, eff.token))
        if eff.paired_med is not None and rng.random() < eff.prescribe_prob:
            triples.append((int(rng.integers(v, n_visits)), MODALITY_MED, eff.paired_med))
    triples.sort(key=lambda t: t[0])

    # learning period: uniform visit prefix of at least five visits
    cut = int(rng.integers(5, n_visits + 1))
    kept = [t for t in triples if t[0] < cut]

    if cut < 10:
        return None
    span = int(months[cut - 1] - months[0])
    if span < 36:
        return None
    if len({(m, c) for _, m, c in kept}) < 10:
        return None

    events = [ClinicalEvent(code=c, modality=m,
                            age_months=int(start_age + months[v] - months[0]),
                            year=int(months[v] // 12), visit=v)
              for v, m, c in kept]
    last_month = int(months[cut - 1])

    # true log-odds from first occurrences within the learning period
    applied: dict[str, float] = {}
    first_seen: dict[str, ClinicalEvent] = {}
    for e in events:
        if e.code not in first_seen:
            first_seen[e.code] = e
    r = 0.0
    for eff in config.effects:
        hit = first_seen.get(eff.token)
        if hit is not None:
            b = eff.effective_beta(hit.year, hit.age_months)
            applied[eff.token] = b
            r += b
        if eff.paired_med is not None and eff.paired_med in first_seen:
            applied[eff.paired_med] = eff.med_beta
            r += eff.med_beta
    return events, last_month, r, applied


def generate(config: GeneratorConfig, seed: int) -> tuple[list[PatientRecord], GroundTruth]:
    """Produce a cohort plus its ground truth. Deterministic in (config, seed).

    Emitted records already are learning periods; cases additionally carry
    one outcome event at least seven months after their last event, so the
    standard case truncation strips exactly that event.
    """
    if config.visit_min + config.visit_mean_extra < 10:
        raise ValueError("mean visit count below the prediction-cohort filter; "
                         "raise visit_min or visit_mean_extra")
    known = set(config.disease_codes()) | set(config.med_codes())
    for eff in config.effects:
        if eff.token not in known:
            raise ValueError(f"planted token {eff.token!r} not in vocabulary")
        if eff.paired_med is not None and eff.paired_med not in known:
            raise ValueError(f"paired med {eff.paired_med!r} not in vocabulary")
        if not 0.0 <= eff.prescribe_prob <= 1.0:
            raise ValueError("prescribe_prob must be in [0, 1]")

    diseases, p_dis, meds, p_med = _background_pools(config)
    base = Rng(seed)
    built = []
    for i in range(config.n_patients):
        pid = f"P{i:06d}"
        result = None
        for attempt in range(_MAX_ATTEMPTS):
            rng = base.split(f"{pid}:{attempt}")
            result = _build_patient(config, rng, diseases, p_dis, meds, p_med)
            if result is not None:
                break
        if result is None:
            raise ValueError(f"could not satisfy cohort constraints for {pid}; "
                             "config is too tight")
        built.append((pid, *result))

    r_values = np.array([r for _, _, _, r, _ in built])
    b0 = config.b0 if config.b0 is not None else calibrate_intercept(
        r_values, config.target_prevalence)
    p_true = _sigmoid(b0 + r_values)

    records = []
    gt_r, gt_p, gt_applied = {}, {}, {}
    for (pid, events, last_month, r, applied), p in zip(built, p_true):
        label = int(base.split(f"label:{pid}").random() < p)
        gt_r[pid] = float(r)
        gt_p[pid] = float(p)
        gt_applied[pid] = applied
        if label == 1:
            last = events[-1]
            gap = 7 + int(base.split(f"outcome:{pid}").integers(0, 7))
            outcome = ClinicalEvent(code=config.outcome_code, modality=MODALITY_DIAG,
                                    age_months=last.age_months + gap,
                                    year=(last_month + gap) // 12,
                                    visit=last.visit + 1)
            records.append(PatientRecord(pid, 1, events + [outcome],
                                         first_outcome_index=len(events)))
        else:
            records.append(PatientRecord(pid, 0, events, None))
    return records, GroundTruth(b0=float(b0), r=gt_r, p_true=gt_p, applied=gt_applied)


def bayes_scores(records: list[PatientRecord], ground_truth: GroundTruth) -> np.ndarray:
    """The generator's true outcome probability per record."""
    return np.array([ground_truth.p_true[r.patient_id] for r in records])


def write_ground_truth(path, ground_truth: GroundTruth) -> None:
    payload = {
        "b0": ground_truth.b0,
        "patients": {pid: {"r": ground_truth.r[pid], "p_true": ground_truth.p_true[pid]}
                     for pid in ground_truth.r},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def write_effects_manifest(path, config: GeneratorConfig, ground_truth: GroundTruth) -> None:
    payload = {
        "b0": ground_truth.b0,
        "target_prevalence": config.target_prevalence,
        "effects": [{
            "token": e.token, "beta": e.beta, "year_flip": e.year_flip,
            "age_decay": e.age_decay, "paired_med": e.paired_med,
            "prescribe_prob": e.prescribe_prob, "med_beta": e.med_beta,
        } for e in config.effects],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
