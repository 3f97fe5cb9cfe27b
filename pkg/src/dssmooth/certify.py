"""Monte Carlo certification of smoothed predictions.

The smoothed classifier draws M joint noise samples (group reordering plus
Gaussian embedding noise), runs the base model on each, and aggregates
argmax frequencies into a prediction distribution.  From top-two
probabilities it derives certified radii in both spaces; from per-class
distributions it derives the watermark robustness (worst-class target
probability) and principal probability (peak of the class-averaged
distribution) statistics that ownership verification consumes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dual_space import (DualSpaceRep, NoiseSpec, PermutationMatrix,
                         group_slices)
from .errors import DomainError, InputError, ParameterError
from .statcore import (RandomStream, clamp_probability, std_normal_inv_cdf)
from .text_model import ClassifierModel, forward, forward_composed

MODES = ("dual", "gaussian_only")


@dataclass(frozen=True)
class SmoothingConfig:
    """How to smooth: noise law, sample count, seed, and mode.

    ``gaussian_only`` disables permutation noise by forcing the reorder
    group size to 1, giving the plain Gaussian smoothing baseline.
    """

    noise: NoiseSpec
    samples: int
    seed: int = 0
    mode: str = "dual"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown smoothing mode {self.mode!r}")
        if self.samples < 1:
            raise ParameterError(f"sample count must be >= 1, got {self.samples}")
        if self.mode == "gaussian_only" and self.noise.group_size != 1:
            object.__setattr__(self, "noise",
                               NoiseSpec(self.noise.sigma, 1))

    def stream(self) -> RandomStream:
        return RandomStream(self.seed)


@dataclass(frozen=True)
class PredictionDistribution:
    """Class frequencies of the smoothed model's argmax over M draws."""

    probs: np.ndarray
    samples: int

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise DomainError("prediction distribution needs >= 2 classes")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise DomainError("prediction distribution must be a probability vector")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def top_two(self) -> tuple[int, float, int, float]:
        """(best class, p_a, runner-up class, p_b), classes 1-based."""
        order = np.argsort(-self.probs, kind="stable")
        a, b = int(order[0]), int(order[1])
        return a + 1, float(self.probs[a]), b + 1, float(self.probs[b])


@dataclass(frozen=True)
class CertifiedRadii:
    """Certified radii in the two spaces, optionally with their margins."""

    r_e: float
    r_p: float
    p_a: float | None = None
    p_b: float | None = None


@dataclass(frozen=True, eq=False)
class WRResult:
    """Watermark robustness: worst-class probability of the target label."""

    value: float
    per_class: np.ndarray
    worst_class: int
    target: int
    samples: int


@dataclass(frozen=True, eq=False)
class PPResult:
    """Principal probability: peak of the class-averaged distribution."""

    value: float
    averaged: np.ndarray
    samples: int


def _group_shuffle_matrix(n: int, spec: NoiseSpec, mask, rng,
                          draws: int) -> np.ndarray:
    """(draws, n) position shuffles, each uniform within consecutive groups."""
    idx = np.tile(np.arange(n), (draws, 1))
    if spec.group_size == 1:
        return idx
    for members in group_slices(n, spec.group_size):
        if mask is not None:
            members = members[np.asarray(mask)[members] == 1]
        if members.size >= 2:
            block = np.tile(members, (draws, 1))
            idx[:, members] = rng.permuted(block, axis=1)
    return idx


def estimate_pd(model: ClassifierModel, rep: DualSpaceRep,
                cfg: SmoothingConfig,
                stream: RandomStream | None = None) -> PredictionDistribution:
    """Monte Carlo prediction distribution of the smoothed model.

    Draws ``cfg.samples`` independent (reorder, Gaussian) noise pairs,
    classifies each corrupted composition, and returns argmax frequencies.
    Deterministic given (cfg.seed, cfg.samples); an explicit ``stream``
    overrides the config-derived one (used for per-class sub-streams).
    """
    if rep.emb.dim != model.dim:
        raise DomainError("embedding width does not match the model")
    base = cfg.stream() if stream is None else stream
    m = cfg.samples
    n = rep.n
    perm_rng = base.child("perm").generator()
    emb_rng = base.child("emb").generator()

    shuffles = _group_shuffle_matrix(n, cfg.noise, rep.mask, perm_rng, m)
    mappings = rep.perm.mapping[shuffles]                      # (m, n)
    values = rep.emb.values
    if cfg.noise.sigma > 0.0:
        noise = emb_rng.normal(0.0, cfg.noise.sigma, size=(m, n, values.shape[1]))
        noise[:, np.asarray(rep.mask) == 0, :] = 0.0
        noisy = values[None, :, :] + noise
    else:
        noisy = np.broadcast_to(values, (m, n, values.shape[1]))
    composed = np.take_along_axis(noisy, mappings[:, :, None], axis=1)
    mask_rows = np.asarray(rep.mask)[mappings]
    probs = forward_composed(model, composed, mask_rows)        # (m, K)
    votes = probs.argmax(axis=1)
    counts = np.bincount(votes, minlength=model.n_classes)
    return PredictionDistribution(probs=counts / m, samples=m)


def smoothed_predict(model: ClassifierModel, rep: DualSpaceRep,
                     cfg: SmoothingConfig,
                     stream: RandomStream | None = None
                     ) -> tuple[int, PredictionDistribution]:
    """Most frequent class under noise (1-based; ties to the lowest class)."""
    pd = estimate_pd(model, rep, cfg, stream=stream)
    return int(np.argmax(pd.probs)) + 1, pd


def certified_radii(p_a: float, p_b: float, noise: NoiseSpec) -> CertifiedRadii:
    """Certified radii from clamped top-two probabilities.

    Embedding space: sigma / 2 * (quantile(p_a) - quantile(p_b)).
    Permutation space: group_size * (p_a - p_b).
    Equal probabilities certify nothing (both radii zero).

    Raises
    ------
    DomainError
        If probabilities leave (0, 1) or p_a < p_b.
    """
    for name, p in (("p_a", p_a), ("p_b", p_b)):
        if not (math.isfinite(p) and 0.0 < p < 1.0):
            raise DomainError(f"{name} must lie in (0, 1), got {p!r}")
    if p_a < p_b:
        raise DomainError(f"top probability {p_a} is below runner-up {p_b}")
    if p_a == p_b:
        return CertifiedRadii(r_e=0.0, r_p=0.0, p_a=p_a, p_b=p_b)
    r_e = 0.5 * noise.sigma * (std_normal_inv_cdf(p_a) - std_normal_inv_cdf(p_b))
    r_p = noise.group_size * (p_a - p_b)
    return CertifiedRadii(r_e=r_e, r_p=r_p, p_a=p_a, p_b=p_b)


def gaussian_rs_radius(p_a: float, p_b: float, sigma: float) -> float:
    """Gaussian-only certified radius: sigma/2 * (quantile(p_a) - quantile(p_b))."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    return certified_radii(p_a, p_b, NoiseSpec(sigma, 1)).r_e


def certify_sample(model: ClassifierModel, rep: DualSpaceRep,
                   cfg: SmoothingConfig,
                   stream: RandomStream | None = None) -> dict:
    """Smoothed prediction plus certified radii for one sample.

    Top-two Monte Carlo frequencies are clamped into
    [1/(2M), 1 - 1/(2M)] before the quantile transform so radii stay
    finite at degenerate vote counts.
    """
    label, pd = smoothed_predict(model, rep, cfg, stream=stream)
    _, p_a, _, p_b = pd.top_two()
    p_a = clamp_probability(p_a, pd.samples)
    p_b = clamp_probability(p_b, pd.samples)
    if p_a < p_b:
        p_b = p_a
    radii = certified_radii(p_a, p_b, cfg.noise)
    return {"label": label, "pd": pd, "radii": radii}


def watermark_robustness(model: ClassifierModel, probes: dict, target: int,
                         cfg: SmoothingConfig,
                         stream: RandomStream | None = None) -> WRResult:
    """Worst-class probability that noisy watermarked probes hit the target.

    ``probes`` maps every class 1..K to that class's watermarked sample.
    Each class gets an independent sub-stream, so results do not depend on
    evaluation order.
    """
    k = model.n_classes
    missing = [c for c in range(1, k + 1) if c not in probes]
    if missing:
        raise InputError(f"probes missing for classes {missing}")
    if not 1 <= target <= k:
        raise DomainError(f"target label {target} outside 1..{k}")
    base = (cfg.stream() if stream is None else stream).child("wr")
    per_class = np.empty(k)
    for c in range(1, k + 1):
        pd = estimate_pd(model, probes[c], cfg, stream=base.child(c))
        per_class[c - 1] = pd.probs[target - 1]
    worst = int(np.argmin(per_class))
    return WRResult(value=float(per_class[worst]), per_class=per_class,
                    worst_class=worst + 1, target=target, samples=cfg.samples)


def principal_probability(model: ClassifierModel, clean: dict,
                          cfg: SmoothingConfig,
                          stream: RandomStream | None = None) -> PPResult:
    """Peak of the entrywise average of per-class prediction distributions.

    ``clean`` maps every class 1..K to a clean sample of that class.  For a
    benign model whose noisy predictions track the true class the average
    is near uniform, so the peak sits near 1/K; degenerate models score
    higher.  Always in [1/K, 1].
    """
    k = model.n_classes
    missing = [c for c in range(1, k + 1) if c not in clean]
    if missing:
        raise InputError(f"clean samples missing for classes {missing}")
    base = (cfg.stream() if stream is None else stream).child("pp")
    acc = np.zeros(k)
    for c in range(1, k + 1):
        pd = estimate_pd(model, clean[c], cfg, stream=base.child(c))
        acc += pd.probs
    averaged = acc / k
    return PPResult(value=float(averaged.max()), averaged=averaged,
                    samples=cfg.samples)


_ENUM_LIMIT = 9


def exact_permutation_pd(classify, perm: PermutationMatrix, group_size: int,
                         n_classes: int, mask=None) -> np.ndarray:
    """Exact prediction distribution under pure group-reorder noise.

    Enumerates every within-group reordering of ``perm`` (no Gaussian
    component), weighting each equally.  ``classify`` maps a
    PermutationMatrix to a 0-based class index, so arbitrary base
    classifiers can be certified, not just the bundled model.  Only
    feasible for short sequences; guarded accordingly.
    """
    n = perm.n
    if n > _ENUM_LIMIT:
        raise ParameterError(f"enumeration limited to n <= {_ENUM_LIMIT}")
    per_group = []
    for members in group_slices(n, group_size):
        if mask is not None:
            active = members[np.asarray(mask)[members] == 1]
        else:
            active = members
        arrangements = []
        for chosen in itertools.permutations(active.tolist()):
            slots = dict(zip(active.tolist(), chosen))
            arrangements.append([slots.get(m, m) for m in members])
        per_group.append((members, arrangements))
    counts = np.zeros(n_classes)
    total = 0
    for combo in itertools.product(*(a for _, a in per_group)):
        shuffle = np.arange(n)
        for (members, _), chosen in zip(per_group, combo):
            shuffle[members] = chosen
        counts[classify(PermutationMatrix(perm.mapping[shuffle]))] += 1
        total += 1
    return counts / total


def model_classifier(model: ClassifierModel, emb, mask):
    """Adapter for exact_permutation_pd: classify reorderings with a model."""
    def classify(perm: PermutationMatrix) -> int:
        probs = forward(model, DualSpaceRep(perm, emb, mask))
        return int(np.argmax(probs))
    return classify
