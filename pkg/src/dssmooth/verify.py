"""Conformal ownership verification.

A calibration set of principal probabilities from benign models defines a
threshold (an order statistic with the largest m values discarded); a
suspect model is flagged when its watermark robustness strictly exceeds
the threshold.  The certified decision additionally demands margins
derived from the recorded watermark magnitudes, so the flag survives any
bounded perturbation of the watermark itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .certify import WRResult
from .dual_space import NoiseSpec
from .errors import CalibrationError, DomainError, InputError, ParameterError
from .statcore import std_normal_cdf


@dataclass(frozen=True)
class VerifyConfig:
    """Conformal settings: significance alpha0, outlier filtering ratio kappa."""

    alpha0: float = 0.05
    kappa: float = 0.05

    def __post_init__(self):
        if not (math.isfinite(self.alpha0) and 0.0 < self.alpha0 < 1.0):
            raise ParameterError(f"alpha0 must be in (0, 1), got {self.alpha0}")
        if not (math.isfinite(self.kappa) and 0.0 <= self.kappa < 1.0):
            raise ParameterError(f"kappa must be in [0, 1), got {self.kappa}")


@dataclass(frozen=True)
class CalibrationSet:
    """Principal probabilities of J benign models, with optional ids."""

    values: tuple
    model_ids: tuple = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InputError("calibration set is empty")
        for v in vals:
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DomainError(f"calibration value {v!r} outside [0, 1]")
        if self.model_ids and len(self.model_ids) != len(vals):
            raise InputError("model_ids length does not match values")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))

    @property
    def size(self) -> int:
        return len(self.values)

    def to_json(self) -> str:
        return json.dumps({"values": list(self.values),
                           "model_ids": list(self.model_ids)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationSet":
        raw = json.loads(text)
        return cls(values=tuple(raw["values"]),
                   model_ids=tuple(raw.get("model_ids", ())))


def calibration_threshold(cal: CalibrationSet,
                          cfg: VerifyConfig) -> tuple[float, int, int]:
    """Conformal threshold from benign calibration values.

    Sorts ascending, discards the m = floor(kappa * J) largest, and picks
    the 1-based order statistic j = J - m - floor(alpha0 * (J - m + 1)).
    Returns (threshold, m, j).

    Raises
    ------
    CalibrationError
        If the set is too small for the requested alpha0 and kappa (j < 1).
    """
    j_total = cal.size
    m = int(math.floor(cfg.kappa * j_total))
    j = j_total - m - int(math.floor(cfg.alpha0 * (j_total - m + 1)))
    if j < 1:
        raise CalibrationError(
            f"calibration set of {j_total} too small for "
            f"alpha0={cfg.alpha0}, kappa={cfg.kappa} (index {j})")
    ordered = sorted(cal.values)
    return ordered[j - 1], m, j


def decide_ownership(wr, threshold: float) -> bool:
    """Flag the suspect model iff robustness strictly exceeds the threshold."""
    value = wr.value if isinstance(wr, WRResult) else float(wr)
    return value > threshold


@dataclass(frozen=True)
class Verdict:
    """Full record of one ownership check against one suspect model."""

    wr: float
    threshold: float
    decision: bool
    certified_embedding: bool
    certified_permutation: bool
    r_e: float
    r_p: float
    embedding_offset: float
    permutation_offset: float
    sigma: float
    group_size: int
    alpha0: float
    kappa: float

    @property
    def certified(self) -> bool:
        return self.certified_embedding and self.certified_permutation

    def to_json(self) -> str:
        return json.dumps({
            "wr": self.wr, "threshold": self.threshold,
            "decision": self.decision,
            "certified_embedding": self.certified_embedding,
            "certified_permutation": self.certified_permutation,
            "r_e": self.r_e, "r_p": self.r_p,
            "embedding_offset": self.embedding_offset,
            "permutation_offset": self.permutation_offset,
            "sigma": self.sigma, "group_size": self.group_size,
            "alpha0": self.alpha0, "kappa": self.kappa,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Verdict":
        raw = json.loads(text)
        return cls(**raw)


def certified_decision(wr, threshold: float, r_e: float, r_p: float,
                       noise: NoiseSpec,
                       cfg: VerifyConfig | None = None) -> Verdict:
    """Ownership verdict with certified margins.

    ``r_e`` and ``r_p`` are the maximum recorded watermark magnitudes
    (embedding L2 and reorder L1) from the watermark manifest, not
    prediction-margin radii.  The certified flags demand

        WR > cdf(r_e / sigma) + threshold   (embedding space)
        WR > r_p / (2 * group_size) + threshold  (permutation space)

    and each implies the plain decision since both offsets are
    nonnegative.

    Raises
    ------
    DomainError
        If sigma = 0 while r_e > 0 (the embedding offset is undefined),
        or radii are negative.
    """
    value = wr.value if isinstance(wr, WRResult) else float(wr)
    if r_e < 0 or r_p < 0:
        raise DomainError(f"radii must be >= 0, got r_e={r_e}, r_p={r_p}")
    if noise.sigma == 0.0:
        if r_e > 0.0:
            raise DomainError(
                "embedding offset undefined: sigma=0 with r_e > 0")
        emb_offset = std_normal_cdf(0.0)
    else:
        emb_offset = std_normal_cdf(r_e / noise.sigma)
    perm_offset = r_p / (2.0 * noise.group_size)
    cfg = cfg or VerifyConfig()
    return Verdict(
        wr=value, threshold=float(threshold),
        decision=value > threshold,
        certified_embedding=value > emb_offset + threshold,
        certified_permutation=value > perm_offset + threshold,
        r_e=float(r_e), r_p=float(r_p),
        embedding_offset=float(emb_offset),
        permutation_offset=float(perm_offset),
        sigma=noise.sigma, group_size=noise.group_size,
        alpha0=cfg.alpha0, kappa=cfg.kappa,
    )


def false_positive_trial(wr_values, threshold: float) -> float:
    """Fraction of independent (clean-data) models wrongly flagged."""
    vals = list(wr_values)
    if not vals:
        raise InputError("empty model pool")
    hits = sum(1 for w in vals if decide_ownership(w, threshold))
    return hits / len(vals)


@dataclass(frozen=True)
class VerificationContext:
    """Frozen threshold plus configs, reusable across suspect models."""

    threshold: float
    noise: NoiseSpec
    cfg: VerifyConfig
    m_discarded: int = 0
    order_index: int = 0

    def evaluate(self, wr, r_e: float, r_p: float) -> Verdict:
        return certified_decision(wr, self.threshold, r_e, r_p,
                                  self.noise, self.cfg)

    @classmethod
    def from_calibration(cls, cal: CalibrationSet, noise: NoiseSpec,
                         cfg: VerifyConfig | None = None
                         ) -> "VerificationContext":
        cfg = cfg or VerifyConfig()
        threshold, m, j = calibration_threshold(cal, cfg)
        return cls(threshold=threshold, noise=noise, cfg=cfg,
                   m_discarded=m, order_index=j)
