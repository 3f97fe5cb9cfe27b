"""Watermark construction in both spaces.

Embedding side: trigger tokens are assigned a shared embedding row scaled so
the locally pooled sentence representation moves by a controlled amount,
then written into the sample's embedding matrix at the trigger positions.
Permutation side: one seeded group reordering of token positions.  Each
watermarked sample records the measured perturbation sizes, which later
bound the certified ownership conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dual_space import (DualSpaceRep, EmbeddingMatrix, PermutationMatrix,
                         emb_distance, group_slices, perm_distance)
from .errors import (DegenerateTriggerError, DegenerateWindowError,
                     InputError, ParameterError, WatermarkBudgetError)
from .statcore import RandomStream
from .text_model import ClassifierModel, TokenSeq, Vocab, embed, predict

BADWORD_TOKENS = ("cf", "mn")
ADDSENT_TOKENS = ("i", "watch", "this", "3d", "movie")
_KIND_BUDGETS = {"badword": 0.6, "addsent": 1.0}
_PLACEMENTS = ("random", "start", "middle", "end")


def adaptive_window(n: int) -> int:
    """Half-width of the local pooling window for sequence length n.

    2 below length 10, 10 from length 80 upward, linear in between with
    the result rounded down.
    """
    if n < 1:
        raise ParameterError(f"sequence length must be >= 1, got {n}")
    if n < 10:
        return 2
    if n >= 80:
        return 10
    return int(2 + (10 - 2) * (n - 10) / (80 - 10))


@dataclass(frozen=True)
class TriggerSpec:
    """What gets inserted: word-level or sentence-level trigger tokens."""

    kind: str
    tokens: tuple
    placement: str = "random"

    def __post_init__(self):
        if self.kind not in _KIND_BUDGETS:
            raise ParameterError(f"unknown trigger kind {self.kind!r}")
        if self.placement not in _PLACEMENTS:
            raise ParameterError(f"unknown placement {self.placement!r}")
        toks = tuple(str(t).lower() for t in self.tokens)
        if not toks:
            raise ParameterError("trigger needs at least one token")
        object.__setattr__(self, "tokens", toks)

    @classmethod
    def badword(cls, tokens=BADWORD_TOKENS, placement="random") -> "TriggerSpec":
        return cls(kind="badword", tokens=tuple(tokens), placement=placement)

    @classmethod
    def addsent(cls, tokens=ADDSENT_TOKENS, placement="end") -> "TriggerSpec":
        return cls(kind="addsent", tokens=tuple(tokens), placement=placement)

    @property
    def default_budget(self) -> float:
        return _KIND_BUDGETS[self.kind]


@dataclass(frozen=True)
class WatermarkPlan:
    """Full recipe for watermarking a dataset.

    eps_max caps the embedding-space perturbation of a single sample;
    eta in (0, 1) sets the pooled deviation target eta * eps_max below it.
    positions, when given, pin the trigger token positions exactly (one
    per trigger token); otherwise the placement policy chooses them.
    perm_budget, when given, caps the permutation perturbation size.
    """

    trigger: TriggerSpec
    target_label: int
    rate: float
    eps_max: float | None = None
    eta: float = 0.9
    group_size: int = 1
    positions: tuple | None = None
    window: int | None = None
    tol: float = 0.01
    max_iters: int = 20
    seed: int = 0
    perm_budget: float | None = None

    def __post_init__(self):
        if self.target_label < 1:
            raise ParameterError(f"target label must be >= 1, got {self.target_label}")
        if not 0.0 < self.rate <= 1.0:
            raise ParameterError(f"poison rate must lie in (0, 1], got {self.rate}")
        if not 0.0 < self.eta < 1.0:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")
        if self.eps_max is not None and self.eps_max <= 0:
            raise ParameterError(f"eps_max must be positive, got {self.eps_max}")
        if self.group_size < 1:
            raise ParameterError(f"group size must be >= 1, got {self.group_size}")
        if self.tol <= 0 or self.max_iters < 1:
            raise ParameterError("tol must be > 0 and max_iters >= 1")
        if self.positions is not None:
            pos = tuple(int(p) for p in self.positions)
            if len(pos) != len(self.trigger.tokens):
                raise ParameterError(
                    f"{len(self.trigger.tokens)} trigger tokens need "
                    f"{len(self.trigger.tokens)} positions, got {len(pos)}")
            if len(set(pos)) != len(pos) or any(p < 0 for p in pos):
                raise ParameterError("positions must be distinct and >= 0")
            object.__setattr__(self, "positions", pos)

    @property
    def budget(self) -> float:
        """Embedding perturbation cap; defaults by trigger kind."""
        return self.eps_max if self.eps_max is not None else self.trigger.default_budget

    @property
    def deviation_target(self) -> float:
        return self.eta * self.budget


@dataclass(frozen=True, eq=False)
class EmbeddingDelta:
    """Replacement row for every trigger position."""

    positions: tuple
    row: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        row = np.asarray(self.row, dtype=np.float64)
        row.flags.writeable = False
        object.__setattr__(self, "row", row)


@dataclass(frozen=True)
class ScaleResult:
    """Outcome of the trigger scale search."""

    alpha: float
    delta: EmbeddingDelta
    deviation: float
    target: float
    iterations: int
    converged: bool


def select_subset(dataset, plan: WatermarkPlan, stream: RandomStream) -> np.ndarray:
    """Indices to watermark: floor(rate * N) draws without replacement."""
    n = len(dataset)
    count = int(np.floor(plan.rate * n))
    if count < 1:
        raise ParameterError(
            f"rate {plan.rate} selects zero of {n} samples")
    rng = stream.generator()
    return np.sort(rng.choice(n, size=count, replace=False))


def resolve_positions(seq: TokenSeq, trigger: TriggerSpec,
                      stream: RandomStream,
                      explicit: tuple | None = None) -> tuple:
    """Trigger token positions for one sample.

    Explicit positions are used verbatim (after bounds checking).  Policy
    placements address the token picture: insertion points inside or at the
    end of the unpadded span.
    """
    k = len(trigger.tokens)
    if explicit is not None:
        if any(p >= seq.n for p in explicit):
            raise ParameterError(f"position beyond sequence length {seq.n}")
        return tuple(explicit)
    length = int(seq.mask.sum())
    if trigger.placement == "start":
        anchor = 0
    elif trigger.placement == "middle":
        anchor = length // 2
    elif trigger.placement == "end":
        anchor = length
    else:
        rng = stream.generator()
        if trigger.kind == "badword":
            points = sorted(rng.integers(0, length + 1, size=k).tolist())
            return tuple(min(p + i, seq.n - 1) for i, p in enumerate(points))
        anchor = int(rng.integers(0, length + 1))
    return tuple(min(anchor + i, seq.n - 1) for i in range(k))


def _place_tokens(seq: TokenSeq, trigger: TriggerSpec, vocab: Vocab,
                  positions: tuple, label: int, shift: bool) -> TokenSeq:
    trig_ids = [vocab.id_of(t) for t in trigger.tokens]
    if shift:
        body = seq.ids[seq.mask == 1].tolist()
        for pos, tid in zip(positions, trig_ids):
            body.insert(min(pos, len(body)), tid)
        body = body[:seq.n]
        ids = np.zeros(seq.n, dtype=np.int64)
        ids[:len(body)] = body
    else:
        ids = seq.ids.copy()
        for pos, tid in zip(positions, trig_ids):
            ids[pos] = tid
    mask = (ids != 0).astype(np.int8)
    return TokenSeq(ids=ids, mask=mask, label=label)


def insert_trigger_text(seq: TokenSeq, trigger: TriggerSpec, vocab: Vocab,
                        stream: RandomStream, target_label: int,
                        positions: tuple | None = None) -> TokenSeq:
    """Token-level watermarked sequence with the relabeled target.

    With explicit positions the trigger tokens overwrite those slots (the
    usual case: reserved padding positions).  Under a placement policy the
    tokens are spliced into the unpadded span with truncation at length n,
    so the sequence never grows.
    """
    pos = resolve_positions(seq, trigger, stream, explicit=positions)
    return _place_tokens(seq, trigger, vocab, pos, target_label,
                         shift=positions is None)


def local_pooled_embedding(values: np.ndarray, mask: np.ndarray,
                           positions, window: int) -> np.ndarray:
    """Average of mask-weighted window means centred on each position.

    Each window spans [p - window, p + window] clipped to the sequence;
    its mean divides by the number of unmasked positions inside it.

    Raises
    ------
    DegenerateWindowError
        If any window contains no unmasked position.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = values.shape[0]
    if window < 0:
        raise ParameterError(f"window must be >= 0, got {window}")
    if not positions:
        raise InputError("positions must be nonempty")
    acc = np.zeros(values.shape[1])
    for p in positions:
        if not 0 <= p < n:
            raise ParameterError(f"position {p} outside 0..{n - 1}")
        lo, hi = max(p - window, 0), min(p + window, n - 1)
        weight = mask[lo:hi + 1]
        denom = weight.sum()
        if denom == 0:
            raise DegenerateWindowError(f"window at position {p} is fully masked")
        acc += (values[lo:hi + 1] * weight[:, None]).sum(axis=0) / denom
    return acc / len(positions)


def _watermark_mask(seq: TokenSeq, positions) -> np.ndarray:
    mask = seq.mask.astype(np.int8).copy()
    mask[list(positions)] = 1
    return mask


def base_trigger_row(model: ClassifierModel, trigger: TriggerSpec,
                     vocab: Vocab) -> np.ndarray:
    """Unscaled trigger embedding: mean of the trigger tokens' table rows."""
    ids = [vocab.id_of(t) for t in trigger.tokens]
    return model.embedding[ids].mean(axis=0)


def optimize_trigger_scale(seq: TokenSeq, model: ClassifierModel,
                           plan: WatermarkPlan, vocab: Vocab,
                           stream: RandomStream,
                           eps_target: float | None = None) -> ScaleResult:
    """Find the trigger scale whose local pooled deviation hits the target.

    Starting from scale 1, each step multiplies the scale by
    target / measured_deviation; the fixed point of that update is exactly
    the scale at which the pooled deviation equals the target.  The
    baseline pooled value uses the sample's original rows under the
    watermarked mask, so the measured deviation isolates the replaced rows.

    Returns the scaled replacement rows as an EmbeddingDelta.  If the
    iteration cap is reached the closest iterate is returned with
    ``converged`` false.

    Raises
    ------
    DegenerateTriggerError
        If the trigger cannot move the pooled value at any scale.
    """
    target = plan.deviation_target if eps_target is None else float(eps_target)
    if target <= 0:
        raise ParameterError(f"deviation target must be positive, got {target}")
    positions = resolve_positions(seq, plan.trigger, stream.child("place"),
                                  explicit=plan.positions)
    window = plan.window if plan.window is not None else adaptive_window(seq.n)
    mask = _watermark_mask(seq, positions)
    base_rows = model.embedding[seq.ids]
    baseline = local_pooled_embedding(base_rows, mask, positions, window)
    w_t0 = base_trigger_row(model, plan.trigger, vocab)

    def deviation(alpha: float) -> float:
        rows = base_rows.copy()
        rows[list(positions)] = alpha * w_t0
        pooled = local_pooled_embedding(rows, mask, positions, window)
        return float(np.linalg.norm(pooled - baseline))

    alpha = 1.0
    best = (np.inf, alpha, 0.0, 0)
    for it in range(plan.max_iters + 1):
        dev = deviation(alpha)
        gap = abs(dev - target)
        if gap < best[0]:
            best = (gap, alpha, dev, it)
        if gap <= plan.tol * target:
            delta = EmbeddingDelta(positions=positions, row=alpha * w_t0)
            return ScaleResult(alpha=alpha, delta=delta, deviation=dev,
                               target=target, iterations=it, converged=True)
        if it == plan.max_iters:
            break
        if dev <= 1e-12:
            if float(np.linalg.norm(w_t0)) <= 1e-12:
                raise DegenerateTriggerError(
                    "trigger embedding is zero and produces no deviation")
            alpha = alpha * 2.0 if alpha != 0 else 1.0
            continue
        alpha *= target / dev
    _, alpha, dev, it = best
    delta = EmbeddingDelta(positions=positions, row=alpha * w_t0)
    return ScaleResult(alpha=alpha, delta=delta, deviation=dev, target=target,
                       iterations=it, converged=False)


def build_watermarked_embeddings(emb: EmbeddingMatrix, delta: EmbeddingDelta,
                                 budget: float) -> tuple[EmbeddingMatrix, float]:
    """Write the replacement rows and measure the perturbation.

    Returns the new matrix and its Frobenius distance from the input.

    Raises
    ------
    WatermarkBudgetError
        If the measured distance reaches the budget.
    """
    if not delta.positions:
        return emb, 0.0
    if max(delta.positions) >= emb.n:
        raise ParameterError("delta position outside embedding matrix")
    values = emb.values.copy()
    values[list(delta.positions)] = delta.row
    out = EmbeddingMatrix(values)
    dist = emb_distance(emb, out)
    if dist >= budget:
        raise WatermarkBudgetError(
            f"embedding perturbation {dist:.6f} reaches budget {budget:.6f}; "
            f"lower eta")
    return out, dist


def apply_perm_watermark(perm: PermutationMatrix, group_size: int,
                         stream: RandomStream, mask=None,
                         budget: float | None = None
                         ) -> tuple[PermutationMatrix, float]:
    """One seeded group reordering.

    A single group of consecutive positions is chosen and its active
    members are uniformly re-ordered; everything else stays fixed.  Group
    size 1 is the identity with zero distance.  The realized entrywise L1
    perturbation is returned and checked against ``budget`` when given.
    """
    if group_size == 1:
        return perm, 0.0
    groups = group_slices(perm.n, group_size)
    active = []
    for members in groups:
        if mask is not None:
            members = members[np.asarray(mask)[members] == 1]
        if members.size >= 2:
            active.append(members)
    if not active:
        return perm, 0.0
    rng = stream.generator()
    members = active[int(rng.integers(0, len(active)))]
    shuffle = np.arange(perm.n)
    shuffle[members] = rng.permutation(members)
    out = PermutationMatrix(perm.mapping[shuffle])
    dist = perm_distance(perm, out)
    if budget is not None and dist >= budget:
        raise WatermarkBudgetError(
            f"permutation perturbation {dist} reaches budget {budget}")
    return out, dist


@dataclass(frozen=True, eq=False)
class WatermarkedSample:
    """One watermarked dataset entry in both pictures."""

    index: int
    original: TokenSeq
    tokens: TokenSeq
    rep: DualSpaceRep
    delta_e: float
    delta_p: float
    alpha: float
    eta_used: float
    converged: bool
    positions: tuple


@dataclass
class WatermarkManifest:
    """Audit record for a watermark build; reproducible bit-for-bit."""

    target_label: int
    rate: float
    budget: float
    group_size: int
    seed: int
    trigger_kind: str
    trigger_tokens: tuple
    entries: list = field(default_factory=list)

    @property
    def max_delta_e(self) -> float:
        return max((e["delta_e"] for e in self.entries), default=0.0)

    @property
    def max_delta_p(self) -> float:
        return max((e["delta_p"] for e in self.entries), default=0.0)

    def to_json(self) -> str:
        payload = {
            "target_label": self.target_label, "rate": self.rate,
            "budget": self.budget, "group_size": self.group_size,
            "seed": self.seed, "trigger_kind": self.trigger_kind,
            "trigger_tokens": list(self.trigger_tokens),
            "entries": self.entries,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "WatermarkManifest":
        data = json.loads(text)
        return cls(target_label=data["target_label"], rate=data["rate"],
                   budget=data["budget"], group_size=data["group_size"],
                   seed=data["seed"], trigger_kind=data["trigger_kind"],
                   trigger_tokens=tuple(data["trigger_tokens"]),
                   entries=data["entries"])


_ETA_RETRIES = 8


def _scale_within_budget(seq, model, plan, vocab, stream):
    """Scale search with automatic eta backoff until the budget holds."""
    base = embed(seq, model)
    eta = plan.eta
    last_exc = None
    for _ in range(_ETA_RETRIES):
        result = optimize_trigger_scale(seq, model, plan, vocab, stream,
                                        eps_target=eta * plan.budget)
        try:
            emb_hat, delta_e = build_watermarked_embeddings(
                base.emb, result.delta, plan.budget)
            return result, emb_hat, delta_e, eta
        except WatermarkBudgetError as exc:
            last_exc = exc
            eta *= 0.5
    raise WatermarkBudgetError(
        f"budget {plan.budget} unsatisfiable after {_ETA_RETRIES} eta "
        f"reductions: {last_exc}")


def watermark_sample(seq: TokenSeq, model: ClassifierModel,
                     plan: WatermarkPlan, vocab: Vocab,
                     stream: RandomStream, index: int = -1) -> WatermarkedSample:
    """Watermark one sample in both pictures and measure its deltas."""
    result, emb_hat, delta_e, eta_used = _scale_within_budget(
        seq, model, plan, vocab, stream)
    positions = result.delta.positions
    triggered = _place_tokens(seq, plan.trigger, vocab, positions,
                              plan.target_label,
                              shift=plan.positions is None)
    mask_hat = _watermark_mask(seq, positions)
    perm_hat, delta_p = apply_perm_watermark(
        PermutationMatrix.identity(seq.n), plan.group_size,
        stream.child("perm"), mask=mask_hat, budget=plan.perm_budget)
    stored = TokenSeq(ids=triggered.ids[perm_hat.mapping],
                      mask=triggered.mask[perm_hat.mapping],
                      label=plan.target_label)
    rep = DualSpaceRep(perm=perm_hat, emb=emb_hat, mask=mask_hat)
    return WatermarkedSample(index=index, original=seq, tokens=stored,
                             rep=rep, delta_e=delta_e, delta_p=delta_p,
                             alpha=result.alpha, eta_used=eta_used,
                             converged=result.converged, positions=positions)


def build_watermarked_dataset(dataset, plan: WatermarkPlan,
                              model: ClassifierModel, vocab: Vocab
                              ) -> tuple[list, WatermarkManifest]:
    """Watermark a seeded subset of the dataset.

    Returns the new dataset (selected samples replaced by their reordered,
    trigger-bearing, relabeled token sequences; everything else untouched)
    and a manifest recording per-sample perturbation measurements.
    """
    stream = RandomStream(plan.seed)
    indices = select_subset(dataset, plan, stream.child("select"))
    out = list(dataset)
    manifest = WatermarkManifest(
        target_label=plan.target_label, rate=plan.rate, budget=plan.budget,
        group_size=plan.group_size, seed=plan.seed,
        trigger_kind=plan.trigger.kind, trigger_tokens=plan.trigger.tokens)
    for i in indices:
        sample = watermark_sample(dataset[i], model, plan, vocab,
                                  stream.child("sample", int(i)), index=int(i))
        out[i] = sample.tokens
        manifest.entries.append({
            "index": int(i),
            "positions": list(sample.positions),
            "alpha": float(sample.alpha),
            "eta_used": float(sample.eta_used),
            "delta_e": float(sample.delta_e),
            "delta_p": float(sample.delta_p),
            "converged": bool(sample.converged),
        })
    return out, manifest


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Per-class verification inputs built against one suspect model.

    delta_e / delta_p record each probe's measured distance from its clean
    original.  They describe the probes themselves; the certified ownership
    conditions are bounded by the manifest radii of the released watermark,
    not by these.
    """

    clean: dict
    watermarked: dict
    delta_e: dict
    delta_p: dict

    @property
    def r_e(self) -> float:
        return max(self.delta_e.values())

    @property
    def r_p(self) -> float:
        return max(self.delta_p.values())


def select_clean_per_class(model: ClassifierModel, seqs, n_classes: int) -> dict:
    """Lowest-index correctly classified sample for each class 1..K.

    A class the model never classifies correctly falls back to its
    lowest-index sample, so a degraded suspect (one that has lost whole
    classes) still gets probed and its verdict reflects that degradation.
    A class with no samples at all is an input error.
    """
    chosen, fallback = {}, {}
    for seq in seqs:
        c = seq.label
        if c in chosen or not 1 <= c <= n_classes:
            continue
        if c not in fallback:
            fallback[c] = seq
        if predict(model, embed(seq, model)) == c:
            chosen[c] = seq
        if len(chosen) == n_classes:
            break
    missing = [c for c in range(1, n_classes + 1)
               if c not in chosen and c not in fallback]
    if missing:
        raise InputError(f"no samples for classes {missing}")
    for c, seq in fallback.items():
        chosen.setdefault(c, seq)
    return chosen


def make_probes(model: ClassifierModel, seqs, plan: WatermarkPlan,
                vocab: Vocab, n_classes: int, stream: RandomStream) -> ProbeSet:
    """Build the K verification probes against a suspect model.

    For each class, the lowest-index correctly classified clean sample
    receives the full watermark: trigger tokens at their planned positions,
    embedded through the suspect model's own table, plus the seeded group
    reordering.  Each probe therefore presents the watermark exactly as a
    model trained on the released dataset saw it.  The stealth rescaling
    used while building the released dataset plays no role here; it exists
    to bound the owner-side perturbation record, and the ownership
    conditions read those bounds from the manifest.
    """
    chosen = select_clean_per_class(model, seqs, n_classes)
    clean, marked, d_e, d_p = {}, {}, {}, {}
    for c in range(1, n_classes + 1):
        seq = chosen[c]
        s = stream.child("probe", c)
        positions = resolve_positions(seq, plan.trigger, s.child("place"),
                                      explicit=plan.positions)
        triggered = _place_tokens(seq, plan.trigger, vocab, positions,
                                  plan.target_label,
                                  shift=plan.positions is None)
        base = embed(seq, model)
        emb_hat = EmbeddingMatrix(model.embedding[triggered.ids])
        perm_hat, delta_p = apply_perm_watermark(
            PermutationMatrix.identity(seq.n), plan.group_size,
            s.child("perm"), mask=triggered.mask)
        clean[c] = base
        marked[c] = DualSpaceRep(perm=perm_hat, emb=emb_hat,
                                 mask=triggered.mask)
        d_e[c] = emb_distance(base.emb, emb_hat)
        d_p[c] = delta_p
    return ProbeSet(clean=clean, watermarked=marked, delta_e=d_e, delta_p=d_p)
