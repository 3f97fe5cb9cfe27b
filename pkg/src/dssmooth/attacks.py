"""Attack-style evaluations over trained models.

Two vulnerability probes (inference-time Gaussian noise, signed
adversarial/noise subspace scans) and two removal attacks (fine-tuning,
pruning).  All procedures treat the model as read-only: fine-tuning and
pruning operate on fresh copies, scans only perturb inputs.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from .certify import SmoothingConfig, smoothed_predict
from .dual_space import DualSpaceRep, EmbeddingMatrix
from .errors import InputError, ParameterError
from .statcore import RandomStream
from .text_model import (ClassifierModel, TrainConfig, fine_tune, forward,
                         grad_wrt_embeddings, prune)


@dataclass(frozen=True)
class NoiseGrid:
    """WSR measured at each noise level of an ascending sigma grid."""

    sigmas: tuple
    wsr: tuple

    def __post_init__(self):
        s = tuple(float(x) for x in self.sigmas)
        if any(x < 0 for x in s):
            raise ParameterError("noise levels must be >= 0")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ParameterError("noise levels must be strictly ascending")
        if len(self.wsr) != len(s):
            raise ParameterError("wsr and sigma grids differ in length")
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "wsr", tuple(float(x) for x in self.wsr))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("sigma,wsr\n")
        for s, w in zip(self.sigmas, self.wsr):
            out.write(f"{s},{w}\n")
        return out.getvalue()


@dataclass(frozen=True, eq=False)
class SubspaceScan:
    """WSR over a grid of signed noise/adversarial perturbation sizes.

    wsr[i, j] is the rate at noise magnitude eps_n[i] and adversarial
    magnitude eps_a[j]; directions holds the per-sample (d_n, d_a) pairs.
    """

    eps_n: tuple
    eps_a: tuple
    wsr: np.ndarray
    directions: tuple

    def __post_init__(self):
        if 0.0 not in self.eps_n or 0.0 not in self.eps_a:
            raise ParameterError("scan grid must include the origin")
        if self.wsr.shape != (len(self.eps_n), len(self.eps_a)):
            raise ParameterError("wsr grid shape mismatch")

    @property
    def origin(self) -> float:
        return float(self.wsr[self.eps_n.index(0.0), self.eps_a.index(0.0)])

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("eps_n,eps_a,wsr\n")
        for i, en in enumerate(self.eps_n):
            for j, ea in enumerate(self.eps_a):
                out.write(f"{en},{ea},{self.wsr[i, j]}\n")
        return out.getvalue()


def _predict_rep(model, rep, smoothing, stream):
    if smoothing is None:
        return int(np.argmax(forward(model, rep))) + 1
    label, _ = smoothed_predict(model, rep, smoothing, stream=stream)
    return label


def _perturbed(rep: DualSpaceRep, delta: np.ndarray) -> DualSpaceRep:
    return DualSpaceRep(rep.perm, EmbeddingMatrix(rep.emb.values + delta),
                        rep.mask)


def wsr_under_noise(model: ClassifierModel, reps, target: int, sigmas,
                    stream: RandomStream,
                    smoothing: SmoothingConfig | None = None) -> NoiseGrid:
    """WSR after one Gaussian embedding draw per sample at each noise level.

    Plain single-draw prediction reproduces the unsmoothed setting's
    fragility; passing ``smoothing`` evaluates the same perturbed inputs
    through the smoothed classifier instead.
    """
    samples = list(reps)
    if not samples:
        raise InputError("empty watermarked test set")
    rates = []
    for si, sigma in enumerate(sigmas):
        hits = 0
        for j, rep in enumerate(samples):
            leaf = stream.child("noise", si, j)
            if sigma > 0:
                g = leaf.generator().normal(0.0, sigma,
                                            size=rep.emb.values.shape)
                g[np.asarray(rep.mask) == 0] = 0.0
                noisy = _perturbed(rep, g)
            else:
                noisy = rep
            pred = _predict_rep(model, noisy, smoothing,
                                stream.child("smooth", si, j))
            hits += pred == target
        rates.append(hits / len(samples))
    return NoiseGrid(sigmas=tuple(sigmas), wsr=tuple(rates))


def build_directions(model: ClassifierModel, rep: DualSpaceRep, target: int,
                     sigma: float, stream: RandomStream
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Signed perturbation directions: noise signs and loss-ascent signs.

    d_n is the sign pattern of a fresh Gaussian draw (sigma only scales
    the draw, so the signs do not depend on it); d_a is the sign of the
    loss gradient at the target label, so stepping along +d_a pushes
    predictions away from the target.  Zero entries map to +1 in both.
    """
    scale = sigma if sigma > 0 else 1.0
    g = stream.child("dir").generator().normal(0.0, scale,
                                               size=rep.emb.values.shape)
    d_n = np.where(g >= 0.0, 1.0, -1.0)
    grad = grad_wrt_embeddings(model, rep, target)
    d_a = np.where(grad >= 0.0, 1.0, -1.0)
    return d_n, d_a


def subspace_scan(model: ClassifierModel, reps, target: int,
                  eps_n, eps_a, stream: RandomStream, sigma: float = 1.0,
                  smoothing: SmoothingConfig | None = None) -> SubspaceScan:
    """WSR over all combinations of signed noise/adversarial step sizes.

    Directions are built once per sample and shared across the grid, so
    the scan isolates magnitude effects from direction resampling.
    """
    samples = list(reps)
    if not samples:
        raise InputError("empty watermarked test set")
    en = tuple(float(x) for x in eps_n)
    ea = tuple(float(x) for x in eps_a)
    dirs = [build_directions(model, rep, target, sigma, stream.child("s", j))
            for j, rep in enumerate(samples)]
    wsr = np.zeros((len(en), len(ea)))
    for i, e_noise in enumerate(en):
        for j, e_adv in enumerate(ea):
            hits = 0
            for k, rep in enumerate(samples):
                d_n, d_a = dirs[k]
                pert = _perturbed(rep, e_noise * d_n + e_adv * d_a)
                pred = _predict_rep(model, pert, smoothing,
                                    stream.child("pred", i, j, k))
                hits += pred == target
            wsr[i, j] = hits / len(samples)
    return SubspaceScan(eps_n=en, eps_a=ea, wsr=wsr, directions=tuple(dirs))


@dataclass(frozen=True)
class ResistancePoint:
    """Pool metrics after one attack level (epochs trained or prune rate)."""

    level: float
    vsr: float
    wca: float
    wr_mean: float


def _pool_metrics(models, evaluate) -> tuple[float, float, float]:
    verdicts = [evaluate(m) for m in models]
    vsr = sum(v.decision for v in verdicts) / len(verdicts)
    wca = sum(v.certified for v in verdicts) / len(verdicts)
    wr_mean = sum(v.wr for v in verdicts) / len(verdicts)
    return vsr, wca, wr_mean


def _segment_seed(seed: int, segment: int) -> int:
    return (seed * 1000003 + 7919 * (segment + 1)) % (2 ** 63)


def finetune_resistance(models, dataset, schedule, train_cfg: TrainConfig,
                        evaluate) -> list[ResistancePoint]:
    """Verdict metrics across a pool as fine-tuning epochs accumulate.

    schedule is an ascending list of total epoch counts starting at 0;
    training between points is incremental on private copies.  evaluate
    maps a model to a Verdict.
    """
    models = list(models)
    if not models:
        raise InputError("empty model pool")
    sched = list(schedule)
    if not sched or sched[0] != 0:
        raise ParameterError("schedule must start at 0")
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise ParameterError("schedule must be strictly ascending")
    current = [m.copy() for m in models]
    curve = []
    for seg, total in enumerate(sched):
        if seg > 0:
            delta = sched[seg] - sched[seg - 1]
            cfg = dataclasses.replace(train_cfg, epochs=delta,
                                      seed=_segment_seed(train_cfg.seed, seg))
            current = [fine_tune(m, dataset, cfg) for m in current]
        vsr, wca, wr_mean = _pool_metrics(current, evaluate)
        curve.append(ResistancePoint(level=float(total), vsr=vsr, wca=wca,
                                     wr_mean=wr_mean))
    return curve


def prune_resistance(models, rates, evaluate) -> list[ResistancePoint]:
    """Verdict metrics across a pool at each pruning rate.

    Each rate prunes the original models afresh (rates are not
    cumulative), so points are independent.
    """
    models = list(models)
    if not models:
        raise InputError("empty model pool")
    curve = []
    for rate in rates:
        pruned = [prune(m, rate) for m in models]
        vsr, wca, wr_mean = _pool_metrics(pruned, evaluate)
        curve.append(ResistancePoint(level=float(rate), vsr=vsr, wca=wca,
                                     wr_mean=wr_mean))
    return curve


def resistance_to_csv(curve, level_name: str) -> str:
    out = io.StringIO()
    out.write(f"{level_name},vsr,wca,wr_mean\n")
    for p in curve:
        out.write(f"{p.level},{p.vsr},{p.wca},{p.wr_mean}\n")
    return out.getvalue()


def _ranks(values) -> np.ndarray:
    """Average ranks (1-based), midranks for ties."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation (midranks for ties)."""
    x, y = _ranks(xs), _ranks(ys)
    if x.size != y.size or x.size < 2:
        raise InputError("need two equal-length series of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0.0:
        return 0.0
    return float((xc * yc).sum() / denom)
