"""Longitudinal patient records: cohort filters, tokenization, splits, JSONL I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng

MODALITY_DIAG = "diag"
MODALITY_MED = "med"

MIN_AGE_MONTHS = 192   # records start at 16 years of age
MAX_AGE_MONTHS = 1200
MIN_YEAR = 1985
MAX_YEAR = 2015

OUTCOME_GAP_MONTHS = 6  # learning period ends this far before the first outcome

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
N_SPECIAL = 5
SPECIAL_NAMES = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


@dataclass(frozen=True)
class ClinicalEvent:
    """One coded clinical event at a visit."""

    code: str
    modality: str
    age_months: int
    year: int
    visit: int

    def __post_init__(self):
        if not self.code:
            raise ValueError("event code must be nonempty")
        if self.modality not in (MODALITY_DIAG, MODALITY_MED):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.age_months < MIN_AGE_MONTHS:
            raise ValueError(f"age_months {self.age_months} below minimum {MIN_AGE_MONTHS}")
        if not MIN_YEAR <= self.year <= MAX_YEAR:
            raise ValueError(f"year {self.year} outside [{MIN_YEAR}, {MAX_YEAR}]")


@dataclass
class PatientRecord:
    """A patient's time-ordered events plus the incident-outcome label.

    Raw case records point first_outcome_index at the first outcome-code
    event; learning-period truncation removes outcome events and clears
    the index.
    """

    patient_id: str
    label: int
    events: list[ClinicalEvent]
    first_outcome_index: int | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        prev = None
        for i, e in enumerate(self.events):
            if prev is not None and (e.age_months < prev.age_months or e.year < prev.year):
                raise ValueError(f"patient {self.patient_id}: events not time-sorted at index {i}")
            prev = e
        if self.first_outcome_index is not None:
            if not 0 <= self.first_outcome_index < len(self.events):
                raise ValueError("first_outcome_index out of range")

    @property
    def outcome_code(self) -> str | None:
        if self.first_outcome_index is None:
            return None
        return self.events[self.first_outcome_index].code


def infer_visit_ids(events: list[ClinicalEvent]) -> list[ClinicalEvent]:
    """Assign visit ids by change of (age_months, year) for data lacking them."""
    out = []
    vid = -1
    prev = None
    for e in events:
        key = (e.age_months, e.year)
        if key != prev:
            vid += 1
            prev = key
        out.append(replace(e, visit=vid))
    return out


def visit_spans(events: list[ClinicalEvent]) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive events sharing a visit id."""
    spans = []
    start = 0
    for i in range(1, len(events) + 1):
        if i == len(events) or events[i].visit != events[start].visit:
            spans.append((start, i))
            start = i
    return spans


def visit_count(record: PatientRecord) -> int:
    return len(visit_spans(record.events))


def filter_cohort_a(records: list[PatientRecord]) -> list[PatientRecord]:
    """Keep patients with at least five visits."""
    return [r for r in records if visit_count(r) >= 5]


def filter_cohort_b(records: list[PatientRecord]) -> list[PatientRecord]:
    """Keep patients with >=10 visits, >=36 months of records, >=10 unique codes.

    Unique codes count both modalities.
    """
    out = []
    for r in records:
        if not r.events:
            continue
        if visit_count(r) < 10:
            continue
        if r.events[-1].age_months - r.events[0].age_months < 36:
            continue
        if len({(e.modality, e.code) for e in r.events}) < 10:
            continue
        out.append(r)
    return out


def truncate_learning_period(
    record: PatientRecord, rng: Rng, control_policy: str = "random"
) -> PatientRecord | None:
    """Reduce a record to its learning period.

    Cases keep events up to six months before the first outcome and lose
    every outcome-code event; a case emptied by this returns None so the
    caller can flag it. Controls keep a uniformly chosen visit prefix of
    at least five visits (control_policy="keep" leaves them untouched,
    for inputs whose learning period was already fixed upstream).
    """
    if control_policy not in ("random", "keep"):
        raise ValueError(f"unknown control_policy {control_policy!r}")
    if record.label == 1:
        if record.first_outcome_index is None:
            raise ValueError(f"case {record.patient_id} lacks first_outcome_index")
        outcome = record.events[record.first_outcome_index]
        limit = outcome.age_months - OUTCOME_GAP_MONTHS
        kept = [e for e in record.events
                if e.age_months <= limit and e.code != outcome.code]
        if not kept:
            return None
        return PatientRecord(record.patient_id, 1, kept, None)

    spans = visit_spans(record.events)
    n_visits = len(spans)
    if control_policy == "keep" or n_visits <= 5:
        return PatientRecord(record.patient_id, 0, list(record.events), None)
    cut = int(rng.integers(5, n_visits + 1))  # prefix length in visits
    end = spans[cut - 1][1]
    return PatientRecord(record.patient_id, 0, record.events[:end], None)


def build_learning_cohort(
    records: list[PatientRecord], seed: int, control_policy: str = "random"
) -> tuple[list[PatientRecord], list[str]]:
    """Truncate every record deterministically; returns (kept, excluded ids)."""
    base = Rng(seed)
    kept, excluded = [], []
    for r in records:
        out = truncate_learning_period(r, base.split(r.patient_id), control_policy)
        if out is None:
            excluded.append(r.patient_id)
        else:
            kept.append(out)
    return kept, excluded


class Vocabulary:
    """Code <-> index mapping over a shared token space.

    Indices 0..4 are PAD/UNK/CLS/SEP/MASK; disease codes follow, then
    medication codes. Unknown codes encode to UNK.
    """

    def __init__(self, disease_codes: list[str], med_codes: list[str]):
        if len(set(disease_codes)) != len(disease_codes):
            raise ValueError("duplicate disease codes")
        if len(set(med_codes)) != len(med_codes):
            raise ValueError("duplicate medication codes")
        self.disease_codes = list(disease_codes)
        self.med_codes = list(med_codes)
        self._index = {}
        for i, code in enumerate(self.disease_codes):
            self._index[(MODALITY_DIAG, code)] = N_SPECIAL + i
        for i, code in enumerate(self.med_codes):
            self._index[(MODALITY_MED, code)] = N_SPECIAL + len(self.disease_codes) + i

    @classmethod
    def from_records(cls, records: list[PatientRecord]) -> "Vocabulary":
        diseases, meds = set(), set()
        for r in records:
            for e in r.events:
                (diseases if e.modality == MODALITY_DIAG else meds).add(e.code)
        return cls(sorted(diseases), sorted(meds))

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.disease_codes) + len(self.med_codes)

    def encode(self, code: str, modality: str) -> int:
        return self._index.get((modality, code), UNK)

    def decode(self, idx: int) -> tuple[str, str | None]:
        """Returns (name, modality); specials have modality None."""
        if idx < 0 or idx >= self.size:
            raise ValueError(f"token index {idx} out of range")
        if idx < N_SPECIAL:
            return SPECIAL_NAMES[idx], None
        idx -= N_SPECIAL
        if idx < len(self.disease_codes):
            return self.disease_codes[idx], MODALITY_DIAG
        return self.med_codes[idx - len(self.disease_codes)], MODALITY_MED

    def is_encounter(self, idx: int) -> bool:
        return idx >= N_SPECIAL or idx == UNK


@dataclass
class TokenizedSequence:
    """Model-ready index arrays for one patient; lengths all equal."""

    patient_id: str
    tokens: np.ndarray
    ages: np.ndarray       # raw age in months
    years: np.ndarray      # raw calendar year
    positions: np.ndarray
    attention_mask: np.ndarray
    label: int

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(record: PatientRecord, vocab: Vocabulary, max_len: int,
             modalities: str = "DM") -> TokenizedSequence:
    """Lay out CLS + per-visit events with a SEP after each visit.

    Modalities not requested ("D"/"M") are dropped here. Oversized
    sequences keep the most recent tokens: truncate from the front and
    re-prepend CLS carrying the first retained visit's age and year.
    """
    keep_diag = "D" in modalities
    keep_med = "M" in modalities
    toks: list[int] = []
    ages: list[int] = []
    years: list[int] = []
    for start, end in visit_spans(record.events):
        visit_events = [e for e in record.events[start:end]
                        if (e.modality == MODALITY_DIAG and keep_diag)
                        or (e.modality == MODALITY_MED and keep_med)]
        if not visit_events:
            continue
        for e in visit_events:
            toks.append(vocab.encode(e.code, e.modality))
            ages.append(e.age_months)
            years.append(e.year)
        last = visit_events[-1]
        toks.append(SEP)
        ages.append(last.age_months)
        years.append(last.year)
    if len(toks) > max_len - 1:
        toks = toks[-(max_len - 1):]
        ages = ages[-(max_len - 1):]
        years = years[-(max_len - 1):]
    head_age = ages[0] if ages else MIN_AGE_MONTHS
    head_year = years[0] if years else MIN_YEAR
    toks = [CLS] + toks
    ages = [head_age] + ages
    years = [head_year] + years
    n = len(toks)
    return TokenizedSequence(
        patient_id=record.patient_id,
        tokens=np.array(toks, dtype=np.int64),
        ages=np.array(ages, dtype=np.int64),
        years=np.array(years, dtype=np.int64),
        positions=np.arange(n, dtype=np.int64),
        attention_mask=np.ones(n, dtype=bool),
        label=record.label,
    )


@dataclass
class SplitSpec:
    train: float = 0.60
    test: float = 0.20
    validation: float = 0.20
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.test + self.validation
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, not 1")
        if min(self.train, self.test, self.validation) <= 0:
            raise ValueError("split fractions must be positive")
        if self.folds < 2:
            raise ValueError("fold count must be at least 2")


@dataclass
class DatasetSplit:
    train: list[PatientRecord]
    test: list[PatientRecord]
    validation: list[PatientRecord]
    folds: list[list[PatientRecord]] = field(default_factory=list)


def split_dataset(records: list[PatientRecord], spec: SplitSpec) -> DatasetSplit:
    """Patient-level disjoint split plus stratified folds over train+test.

    Sizes use floor for train and test with the remainder to validation.
    """
    n = len(records)
    if n < spec.folds:
        raise ValueError(f"{n} patients is fewer than {spec.folds} folds")
    order = Rng(spec.seed).permutation(n)
    n_train = math.floor(spec.train * n)
    n_test = math.floor(spec.test * n)
    shuffled = [records[i] for i in order]
    train = shuffled[:n_train]
    test = shuffled[n_train:n_train + n_test]
    validation = shuffled[n_train + n_test:]

    pool = train + test
    folds: list[list[PatientRecord]] = [[] for _ in range(spec.folds)]
    for label in (1, 0):
        members = [r for r in pool if r.label == label]
        for i, r in enumerate(members):
            folds[i % spec.folds].append(r)
    return DatasetSplit(train, test, validation, folds)


def _event_to_dict(e: ClinicalEvent) -> dict:
    return {"code": e.code, "modality": e.modality, "age_months": e.age_months,
            "year": e.year, "visit": e.visit}


def write_jsonl(path, records: list[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "patient_id": r.patient_id,
                "label": r.label,
                "first_outcome_index": r.first_outcome_index,
                "events": [_event_to_dict(e) for e in r.events],
            }, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[PatientRecord]:
    """Parse one patient per line; errors name the offending line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                events = [ClinicalEvent(code=e["code"], modality=e["modality"],
                                        age_months=e["age_months"], year=e["year"],
                                        visit=e["visit"])
                          for e in raw["events"]]
                records.append(PatientRecord(
                    patient_id=raw["patient_id"],
                    label=raw["label"],
                    events=events,
                    first_outcome_index=raw["first_outcome_index"],
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return records
