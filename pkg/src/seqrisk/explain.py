"""Perturbation-based encounter contributions and relative-contribution stats.

Each patient gets a learned per-position Gaussian noise scale sigma in
(0, sigma_max], fitted against a frozen model by minimizing

    mean_m alpha_m * (prob(x + sigma*eps_m) - prob(x))^2  -  lam * sum_i log sigma_i

where alpha weights a draw by beta1 when it moves the probability in the
label's favorable direction (up for cases, down for controls) and beta2
otherwise, with beta1 < beta2. Positions whose perturbation barely moves
the output can afford large sigma; important positions cannot. The
reported contribution is sigma_max - sigma, higher meaning more
influential. Noise is isotropic across the hidden dimension, one scalar
sigma per token position, and only encounter positions (never CLS, SEP,
or PAD) are perturbed or counted in the entropy term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import CLS, PAD, SEP, N_SPECIAL, UNK, TokenizedSequence, Vocabulary
from .model import RiskModel
from .optim import Adam
from .rng import Rng
from .tensor import Tape, Tensor

AGE_STRATA = ((50, 60), (60, 65), (65, 70), (70, 75), (75, 80))
YEAR_STRATA = ((1990, 1995), (1995, 2000), (2000, 2005), (2005, 2010))


@dataclass
class PerturbConfig:
    sigma_max: float = 0.5
    lam: float = 0.1
    beta1: float = 0.5
    beta2: float = 2.0
    mc_samples: int = 8
    steps: int = 300
    lr: float = 0.05
    seed: int = 0
    group_size: int = 16   # patients optimized jointly (losses stay independent)

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2:
            raise ValueError("need 0 < beta1 < beta2")
        if self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if self.mc_samples < 1 or self.steps < 1:
            raise ValueError("mc_samples and steps must be positive")


@dataclass
class ContributionRecord:
    patient_id: str
    code: str
    modality: str
    contribution: float
    label: int
    age_months: int
    year: int


@dataclass
class RcResult:
    code: str
    stratum: str
    n_case: int
    n_control: int
    mean_case: float | None
    sd_case: float | None
    mean_control: float | None
    sd_control: float | None
    rc: float | None
    ci_lo: float | None
    ci_hi: float | None
    status: str   # ok | undefined | insufficient


def optimize_sigma(embedded: np.ndarray, enc_mask: np.ndarray, labels: np.ndarray,
                   forward, config: PerturbConfig, rng: Rng,
                   trace: list | None = None) -> np.ndarray:
    """Fit sigma for a group of patients against a frozen forward function.

    embedded: [p, len, hidden] summed predictor embeddings (constants).
    enc_mask: [p, len] True at perturbable encounter positions.
    forward(x) must map a Tensor [n, len, hidden] to probabilities [n].
    Patients' losses are summed; their gradients never interact, so the
    joint optimization equals independent per-patient runs given the
    same draws. Returns sigma [p, len]; non-encounter positions keep the
    initial mid-range value and are dropped downstream.
    """
    p, length, hidden = embedded.shape
    m = config.mc_samples
    base = forward(Tensor(embedded)).data  # unperturbed output state
    noise_gate = enc_mask.astype(float)[None, :, :, None]
    e_const = Tensor(embedded[None])
    favor_up = labels == 1

    rho = Tensor(np.zeros((p, length)), requires_grad=True)
    opt = Adam([rho], lr=config.lr)
    entropy_gate = Tensor(enc_mask.astype(float))
    for step in range(config.steps):
        eps = rng.normal(size=(m, p, length, hidden)) * noise_gate
        with Tape() as tape:
            sigma = T.scale(T.sigmoid(rho), config.sigma_max)
            xt = T.add(e_const, T.mul(T.reshape(sigma, (1, p, length, 1)), Tensor(eps)))
            probs = forward(T.reshape(xt, (m * p, length, hidden)))
            diff = T.sub(probs, Tensor(np.tile(base, m)))
            moved_up = diff.data >= 0.0
            favorable = np.where(np.tile(favor_up, m), moved_up, ~moved_up)
            alpha = np.where(favorable, config.beta1, config.beta2)
            fidelity = T.scale(T.sum_(T.mul(T.mul(diff, diff), Tensor(alpha))), 1.0 / m)
            entropy = T.sum_(T.mul(T.log(sigma), entropy_gate))
            loss = T.sub(fidelity, T.scale(entropy, config.lam))
            tape.backward(loss)
        if trace is not None:
            trace.append({"step": step, "alpha": alpha.copy(), "diff": diff.data.copy(),
                          "loss": float(loss.data)})
        opt.step()
        opt.zero_grad()
    return config.sigma_max * T.sigmoid(rho).data


def _model_forward(model: RiskModel, attention_mask: np.ndarray):
    def forward(x: Tensor) -> Tensor:
        reps = x.data.shape[0] // attention_mask.shape[0]
        mask = np.tile(attention_mask, (reps, 1))
        return T.sigmoid(model.class_logits_from(model.encode(x, mask)))
    return forward


def _frozen(model: RiskModel):
    flags = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in flags:
        p.requires_grad = False
    return flags


def perturb_patient(seq: TokenizedSequence, model: RiskModel,
                    config: PerturbConfig) -> np.ndarray:
    """Learned sigma per input position for one patient; deterministic in seed."""
    sigmas, flagged = explain_cohort(model, [seq], config)
    if flagged:
        raise FloatingPointError(f"perturbation diverged for {seq.patient_id}")
    return sigmas[seq.patient_id]


def explain_cohort(model: RiskModel, seqs: list[TokenizedSequence],
                   config: PerturbConfig):
    """Fit sigma for every sequence; returns ({patient_id: sigma}, flagged ids).

    Patients are grouped by length for batched optimization; a non-finite
    loss falls back to per-patient runs so only the offender is flagged.
    """
    from .train import pad_batch

    flags = _frozen(model)
    sigmas: dict[str, np.ndarray] = {}
    flagged: list[str] = []
    try:
        order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
        groups = [order[s:s + config.group_size]
                  for s in range(0, len(order), config.group_size)]
        base_rng = Rng(config.seed)
        for group in groups:
            members = [seqs[i] for i in group]
            try:
                _solve_group(members, model, config, base_rng.split(members[0].patient_id),
                             sigmas, pad_batch)
            except FloatingPointError:
                for s in members:
                    try:
                        _solve_group([s], model, config,
                                     base_rng.split(f"retry:{s.patient_id}"),
                                     sigmas, pad_batch)
                    except FloatingPointError:
                        flagged.append(s.patient_id)
    finally:
        for p, was in flags:
            p.requires_grad = was
    return sigmas, flagged


def _solve_group(members, model, config, rng, sigmas, pad_batch) -> None:
    tokens, ages, years, mask, labels = pad_batch(members)
    embedded = model.embed(tokens, ages, years).data
    enc_mask = ((tokens == UNK) | (tokens >= N_SPECIAL)) & mask
    sigma = optimize_sigma(embedded, enc_mask, labels,
                           _model_forward(model, mask), config, rng)
    for i, s in enumerate(members):
        sigmas[s.patient_id] = sigma[i, :len(s)]


def extract_contributions(sigmas: dict[str, np.ndarray], seqs: list[TokenizedSequence],
                          vocab: Vocabulary, sigma_max: float = 0.5) -> list[ContributionRecord]:
    """Per-patient, first-occurrence contributions (sigma_max - sigma).

    CLS/SEP/PAD positions are dropped; repeats of a code keep only the
    earliest position's value.
    """
    out = []
    for seq in seqs:
        sigma = sigmas.get(seq.patient_id)
        if sigma is None:
            continue
        seen: set[int] = set()
        for i, tok in enumerate(seq.tokens):
            tok = int(tok)
            if tok in (PAD, CLS, SEP) or tok in seen:
                continue
            seen.add(tok)
            if tok == UNK:
                code, modality = "[UNK]", "unk"
            else:
                code, modality = vocab.decode(tok)
            out.append(ContributionRecord(
                patient_id=seq.patient_id, code=code, modality=modality,
                contribution=float(sigma_max - sigma[i]), label=seq.label,
                age_months=int(seq.ages[i]), year=int(seq.years[i])))
    return out


def select_dataset_c(scores: np.ndarray, patients: list) -> list:
    """Patients whose predicted probability falls in [0, 0.2) or [0.8, 1.0]."""
    scores = np.asarray(scores, dtype=float)
    keep = (scores < 0.2) | (scores >= 0.8)
    if not keep.any():
        raise ValueError("no patients fall in the extreme probability bins")
    return [p for p, k in zip(patients, keep) if k]


def _ratio_ci(mean_c, sd_c, n_c, mean_k, sd_k, n_k) -> tuple[float, float]:
    """Log-scale delta-method CI for a ratio of two group means."""
    se = math.sqrt(sd_c**2 / (n_c * mean_c**2) + sd_k**2 / (n_k * mean_k**2))
    log_rc = math.log(mean_c / mean_k)
    return math.exp(log_rc - 1.96 * se), math.exp(log_rc + 1.96 * se)


def _rc_from_groups(code: str, stratum: str, case_vals: np.ndarray,
                    control_vals: np.ndarray, min_count: int) -> RcResult:
    n_case, n_control = len(case_vals), len(control_vals)
    if n_case < min_count or n_control < min_count:
        return RcResult(code, stratum, n_case, n_control, None, None, None, None,
                        None, None, None, "insufficient")
    mean_case = float(case_vals.mean())
    mean_control = float(control_vals.mean())
    sd_case = float(case_vals.std(ddof=1))
    sd_control = float(control_vals.std(ddof=1))
    if mean_control == 0.0 or mean_case == 0.0:
        return RcResult(code, stratum, n_case, n_control, mean_case, sd_case,
                        mean_control, sd_control, None, None, None, "undefined")
    rc = mean_case / mean_control
    lo, hi = _ratio_ci(mean_case, sd_case, n_case, mean_control, sd_control, n_control)
    return RcResult(code, stratum, n_case, n_control, mean_case, sd_case,
                    mean_control, sd_control, rc, lo, hi, "ok")


def _grouped(records: list[ContributionRecord]) -> dict[str, list[ContributionRecord]]:
    by_code: dict[str, list[ContributionRecord]] = {}
    for r in records:
        by_code.setdefault(r.code, []).append(r)
    return by_code


def _eligible_codes(records, min_prevalence, allowlist) -> list[str]:
    n_patients = len({r.patient_id for r in records})
    by_code = _grouped(records)
    codes = []
    for code, rows in sorted(by_code.items()):
        prevalence = len({r.patient_id for r in rows}) / n_patients
        if prevalence >= min_prevalence or code in allowlist:
            codes.append(code)
    return codes


def relative_contribution(records: list[ContributionRecord], min_prevalence: float = 0.05,
                          allowlist: tuple = (), min_count: int = 2) -> list[RcResult]:
    """Per-code ratio of mean case contribution to mean control contribution.

    Codes below min_prevalence are skipped unless allowlisted.
    """
    if not records or len({r.label for r in records}) < 2:
        raise ValueError("contribution records must span both labels")
    by_code = _grouped(records)
    out = []
    for code in _eligible_codes(records, min_prevalence, allowlist):
        rows = by_code[code]
        case_vals = np.array([r.contribution for r in rows if r.label == 1])
        control_vals = np.array([r.contribution for r in rows if r.label == 0])
        out.append(_rc_from_groups(code, "all", case_vals, control_vals, min_count))
    return out


def _stratum_of(record: ContributionRecord, strata: str) -> str | None:
    if strata == "age":
        age_years = record.age_months / 12.0
        for lo, hi in AGE_STRATA:
            if lo < age_years <= hi:
                return f"({lo},{hi}]"
        return None
    if strata == "year":
        first_lo, first_hi = YEAR_STRATA[0]
        if first_lo <= record.year <= first_hi:
            return f"[{first_lo},{first_hi}]"
        for lo, hi in YEAR_STRATA[1:]:
            if lo < record.year <= hi:
                return f"({lo},{hi}]"
        return None
    raise ValueError(f"unknown strata {strata!r}")


def stratum_labels(strata: str) -> list[str]:
    if strata == "age":
        return [f"({lo},{hi}]" for lo, hi in AGE_STRATA]
    lo, hi = YEAR_STRATA[0]
    return [f"[{lo},{hi}]"] + [f"({a},{b}]" for a, b in YEAR_STRATA[1:]]


def stratified_rc(records: list[ContributionRecord], strata: str,
                  min_prevalence: float = 0.05, allowlist: tuple = (),
                  min_count: int = 10) -> list[RcResult]:
    """RC per code per age or calendar-year stratum of the first record.

    Events outside every stratum are excluded; a stratum with fewer than
    min_count cases or controls reports "insufficient".
    """
    by_code = _grouped(records)
    out = []
    for code in _eligible_codes(records, min_prevalence, allowlist):
        rows = by_code[code]
        for label_str in stratum_labels(strata):
            in_stratum = [r for r in rows if _stratum_of(r, strata) == label_str]
            case_vals = np.array([r.contribution for r in in_stratum if r.label == 1])
            control_vals = np.array([r.contribution for r in in_stratum if r.label == 0])
            out.append(_rc_from_groups(code, label_str, case_vals, control_vals, min_count))
    return out


def untreated_subgroup_rc(records: list[ContributionRecord], disease_code: str,
                          med_code: str, min_count: int = 10) -> tuple[RcResult, RcResult]:
    """(baseline, untreated) RC of a disease, the latter over patients
    never exposed to the medication within the analyzed records."""
    by_code = _grouped(records)
    if disease_code not in by_code:
        raise ValueError(f"disease {disease_code!r} absent from contribution records")
    disease_rows = by_code[disease_code]
    treated = {r.patient_id for r in by_code.get(med_code, [])}
    untreated_rows = [r for r in disease_rows if r.patient_id not in treated]

    def rc_of(rows, stratum):
        case_vals = np.array([r.contribution for r in rows if r.label == 1])
        control_vals = np.array([r.contribution for r in rows if r.label == 0])
        return _rc_from_groups(disease_code, stratum, case_vals, control_vals, min_count)

    return rc_of(disease_rows, "baseline"), rc_of(untreated_rows, "untreated")


def write_contributions_csv(path, records: list[ContributionRecord],
                            config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["patient_id", "code", "modality", "label", "contribution",
                    "age_months", "year"])
        for r in records:
            w.writerow([r.patient_id, r.code, r.modality, r.label,
                        format(r.contribution, ".10g"), r.age_months, r.year])


def read_contributions_csv(path) -> list[ContributionRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            fh.seek(0)
        for row in csv.DictReader(fh):
            out.append(ContributionRecord(
                patient_id=row["patient_id"], code=row["code"], modality=row["modality"],
                contribution=float(row["contribution"]), label=int(row["label"]),
                age_months=int(row["age_months"]), year=int(row["year"])))
    return out


def write_rc_csv(path, results: list[RcResult], config_hash: str = "") -> None:
    def fmt(x):
        return "" if x is None else format(x, ".10g")

    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["code", "stratum", "n_case", "n_control", "mean_case",
                    "mean_control", "rc", "ci_lo", "ci_hi", "status"])
        for r in results:
            w.writerow([r.code, r.stratum, r.n_case, r.n_control, fmt(r.mean_case),
                        fmt(r.mean_control), fmt(r.rc), fmt(r.ci_lo), fmt(r.ci_hi),
                        r.status])
