"""ISO-style biometric error rates over score records.

All functions operate on lists of ScoreRecord and are pure. Conventions:

  * pad_score is an attack probability; a presentation is called an
    attack (rejected) iff pad_score >= pad_threshold.
  * match_score is a similarity; a comparison is accepted iff
    match_score >= match_threshold.
  * APCER and IAPMR are computed within each PAI species and then
    averaged unweighted.
  * Rates are percentages in [0, 100].

Threshold selection sweeps candidates taken from the sorted unique score
set plus sentinels below the minimum and above the maximum, which makes
tie-breaking deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BONA_FIDE = "bona_fide"
ATTACK = "attack"
NO_SPECIES = "none"


@dataclass
class ScoreRecord:
    """One comparison outcome: probe presentation vs enrolled reference."""

    probe_id: str
    reference_id: str
    is_genuine_pair: bool          # same finger?
    probe_liveness: str            # bona_fide | attack
    pai_species: str               # none for bona fide probes
    match_score: float             # cosine similarity
    pad_score: float               # attack probability in [0, 1]

    def __post_init__(self):
        if self.probe_liveness not in (BONA_FIDE, ATTACK):
            raise ValueError(f"unknown liveness '{self.probe_liveness}'")
        if (self.probe_liveness == BONA_FIDE) != (self.pai_species == NO_SPECIES):
            raise ValueError(
                f"liveness '{self.probe_liveness}' inconsistent with species '{self.pai_species}'"
            )
        # scores are stored at float32 precision so the CSV form (9 significant
        # digits) round-trips bit-exactly
        self.match_score = float(np.float32(self.match_score))
        self.pad_score = float(np.float32(self.pad_score))
        if not (np.isfinite(self.match_score) and np.isfinite(self.pad_score)):
            raise ValueError(f"non-finite score in record for probe '{self.probe_id}'")


def _arrays(records: list[ScoreRecord]):
    return {
        "genuine": np.array([r.is_genuine_pair for r in records], dtype=bool),
        "bona": np.array([r.probe_liveness == BONA_FIDE for r in records], dtype=bool),
        "species": np.array([r.pai_species for r in records]),
        "match": np.array([r.match_score for r in records], dtype=np.float64),
        "pad": np.array([r.pad_score for r in records], dtype=np.float64),
    }


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    uniq = np.unique(scores)
    return np.concatenate(([uniq[0] - 1.0], uniq, [uniq[-1] + 1.0]))


# -- presentation attack detection --


def pad_rates(records: list[ScoreRecord], pad_threshold: float):
    """(apcer per species, apcer average, bpcer, acer) at a fixed threshold.

    An attack is classified bona fide iff its pad score is below the
    threshold; a bona fide presentation is classified attack iff its pad
    score is at or above it.
    """
    a = _arrays(records)
    if not a["bona"].any():
        raise ValueError("no bona fide records")
    if a["bona"].all():
        raise ValueError("no attack records")
    bpcer = 100.0 * np.mean(a["pad"][a["bona"]] >= pad_threshold)
    apcer_per = {}
    for sp in sorted(set(a["species"][~a["bona"]])):
        mask = (~a["bona"]) & (a["species"] == sp)
        apcer_per[sp] = 100.0 * np.mean(a["pad"][mask] < pad_threshold)
    apcer_avg = float(np.mean(list(apcer_per.values())))
    acer = (apcer_avg + float(bpcer)) / 2.0
    return apcer_per, apcer_avg, float(bpcer), acer


def threshold_at_bpcer(records: list[ScoreRecord], target_bpcer: float) -> float:
    """Smallest candidate threshold whose BPCER stays within the target.

    Candidates are the sorted unique pad scores plus sentinels; smaller
    thresholds reject more attacks, so this picks the most attack-hostile
    operating point that still honors the bona fide budget.
    """
    a = _arrays(records)
    bona = np.sort(a["pad"][a["bona"]])
    if bona.size == 0:
        raise ValueError("no bona fide records")
    for thr in _candidate_thresholds(a["pad"]):
        rejected = bona.size - np.searchsorted(bona, thr, side="left")
        if 100.0 * rejected / bona.size <= target_bpcer:
            return float(thr)
    raise ValueError(f"no threshold achieves BPCER <= {target_bpcer}%")


# -- matching --


def match_rates(records: list[ScoreRecord], match_threshold: float):
    """(fnmr, fmr) at a fixed threshold; attack probes are excluded from both.

    FNMR counts genuine bona fide pairs scored below the threshold; FMR
    counts zero-effort impostor pairs (bona fide probe, different finger)
    scored at or above it.
    """
    a = _arrays(records)
    gen = a["genuine"] & a["bona"]
    imp = (~a["genuine"]) & a["bona"]
    if not gen.any():
        raise ValueError("no genuine bona fide pairs")
    if not imp.any():
        raise ValueError("no zero-effort impostor pairs")
    fnmr = 100.0 * np.mean(a["match"][gen] < match_threshold)
    fmr = 100.0 * np.mean(a["match"][imp] >= match_threshold)
    return float(fnmr), float(fmr)


def threshold_at_fmr(records: list[ScoreRecord], target_fmr: float):
    """(threshold, TAR) at the smallest threshold with FMR within the target.

    TAR is 100 - FNMR at that threshold. Raises when the impostor set is
    too small to resolve a nonzero target (fewer than 100/target pairs).
    """
    a = _arrays(records)
    imp = np.sort(a["match"][(~a["genuine"]) & a["bona"]])
    if imp.size == 0:
        raise ValueError("no zero-effort impostor pairs")
    if target_fmr > 0 and imp.size * target_fmr < 100.0:
        raise ValueError(
            f"FMR target {target_fmr}% is unresolvable with {imp.size} impostor pairs; "
            f"use a coarser target (>= {100.0 / imp.size:.4g}%)"
        )
    for thr in _candidate_thresholds(a["match"]):
        accepted = imp.size - np.searchsorted(imp, thr, side="left")
        if 100.0 * accepted / imp.size <= target_fmr:
            fnmr, _ = match_rates(records, float(thr))
            return float(thr), 100.0 - fnmr
    raise ValueError(f"no threshold achieves FMR <= {target_fmr}%")


# -- joint system --


def iapmr(records: list[ScoreRecord], match_threshold: float,
          pad_threshold: float | None = None, same_finger_only: bool = True):
    """(iapmr per species, average): fraction of PA presentations accepted.

    With `pad_threshold` None the decision is match-only (matcher in
    isolation); otherwise acceptance additionally requires the PAD gate
    to pass (pad score below threshold). By default only attack probes
    compared against their target (same-finger) reference count;
    cross-finger PA impostors are analyzed separately.
    """
    a = _arrays(records)
    pa = ~a["bona"]
    if same_finger_only:
        pa = pa & a["genuine"]
    if not pa.any():
        raise ValueError("no presentation attack records" +
                         (" against target references" if same_finger_only else ""))
    accept = a["match"] >= match_threshold
    if pad_threshold is not None:
        accept = accept & (a["pad"] < pad_threshold)
    per = {}
    for sp in sorted(set(a["species"][pa])):
        mask = pa & (a["species"] == sp)
        per[sp] = 100.0 * np.mean(accept[mask])
    return per, float(np.mean(list(per.values())))


def im_accuracy(fnmr: float, fmr: float, iapmr_avg: float) -> float:
    """Integrated matching accuracy: 100 - (FNMR + FMR + IAPMR) / 3."""
    for name, value in (("fnmr", fnmr), ("fmr", fmr), ("iapmr", iapmr_avg)):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"{name} must lie in [0, 100], got {value}")
    return 100.0 - (fnmr + fmr + iapmr_avg) / 3.0


# -- report --


@dataclass
class MetricReport:
    """The full metric suite at explicit operating thresholds."""

    apcer_per_species: dict[str, float]
    apcer_avg: float
    bpcer: float
    acer: float
    fnmr: float
    fmr: float
    tar_at_far: float
    iapmr_per_species: dict[str, float]
    iapmr_avg: float
    im_accuracy: float
    pad_threshold: float
    match_threshold: float
    operating_point: dict = field(default_factory=dict)

    def validate(self) -> None:
        rates = [self.apcer_avg, self.bpcer, self.acer, self.fnmr, self.fmr,
                 self.tar_at_far, self.iapmr_avg, self.im_accuracy,
                 *self.apcer_per_species.values(), *self.iapmr_per_species.values()]
        for r in rates:
            if not 0.0 <= r <= 100.0:
                raise ValueError(f"rate {r} outside [0, 100]")
        if abs(self.acer - (self.apcer_avg + self.bpcer) / 2.0) > 1e-9:
            raise ValueError("acer != (apcer_avg + bpcer) / 2")
        if abs(self.im_accuracy - (100.0 - (self.fnmr + self.fmr + self.iapmr_avg) / 3.0)) > 1e-9:
            raise ValueError("im_accuracy inconsistent with fnmr/fmr/iapmr")

    def to_dict(self) -> dict:
        return {
            "apcer-per-species": dict(self.apcer_per_species),
            "apcer-avg": self.apcer_avg,
            "bpcer": self.bpcer,
            "acer": self.acer,
            "fnmr": self.fnmr,
            "fmr": self.fmr,
            "tar-at-far": self.tar_at_far,
            "iapmr-per-species": dict(self.iapmr_per_species),
            "iapmr-avg": self.iapmr_avg,
            "im-accuracy": self.im_accuracy,
            "pad-threshold": self.pad_threshold,
            "match-threshold": self.match_threshold,
            "operating-point": dict(self.operating_point),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            apcer_per_species=dict(d["apcer-per-species"]),
            apcer_avg=d["apcer-avg"], bpcer=d["bpcer"], acer=d["acer"],
            fnmr=d["fnmr"], fmr=d["fmr"], tar_at_far=d["tar-at-far"],
            iapmr_per_species=dict(d["iapmr-per-species"]),
            iapmr_avg=d["iapmr-avg"], im_accuracy=d["im-accuracy"],
            pad_threshold=d["pad-threshold"], match_threshold=d["match-threshold"],
            operating_point=dict(d.get("operating-point", {})),
        )


def compute_report(records: list[ScoreRecord], pad_target_bpcer: float = 2.0,
                   match_target_fmr: float = 1.0, pad_threshold: float | None = None,
                   match_threshold: float | None = None) -> MetricReport:
    """Assemble the full MetricReport from raw records.

    Thresholds are calibrated on the records themselves (per-system mode)
    unless passed explicitly (global/fixed mode). PAD rates and IAPMR use
    the presentation rows (probe vs its claimed same-finger reference, one
    row per presentation); FNMR/FMR use all comparison rows. IAPMR is
    evaluated under the joint policy: the PAD gate and the matcher must
    both accept.
    """
    presentations = [r for r in records if r.is_genuine_pair]
    mode = "per-system" if (pad_threshold is None and match_threshold is None) else "fixed"
    if pad_threshold is None:
        pad_threshold = threshold_at_bpcer(presentations, pad_target_bpcer)
    if match_threshold is None:
        match_threshold, tar = threshold_at_fmr(records, match_target_fmr)
    else:
        fnmr0, _ = match_rates(records, match_threshold)
        tar = 100.0 - fnmr0
    apcer_per, apcer_avg, bpcer, acer = pad_rates(presentations, pad_threshold)
    fnmr, fmr = match_rates(records, match_threshold)
    iapmr_per, iapmr_avg = iapmr(presentations, match_threshold, pad_threshold)
    report = MetricReport(
        apcer_per_species=apcer_per, apcer_avg=apcer_avg, bpcer=bpcer, acer=acer,
        fnmr=fnmr, fmr=fmr, tar_at_far=tar,
        iapmr_per_species=iapmr_per, iapmr_avg=iapmr_avg,
        im_accuracy=im_accuracy(fnmr, fmr, iapmr_avg),
        pad_threshold=pad_threshold, match_threshold=match_threshold,
        operating_point={
            "threshold-mode": mode,
            "pad-target-bpcer": pad_target_bpcer if mode == "per-system" else None,
            "match-target-fmr": match_target_fmr if mode == "per-system" else None,
            "iapmr-policy": "joint",
        },
    )
    report.validate()
    return report
