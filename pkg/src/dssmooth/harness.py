"""Experiment orchestration.

Synthetic corpora, TSV dataset files, seeded model pools (benign,
watermarked, independent), the four headline metrics (benign accuracy,
watermark success rate, verification success rate, certification
accuracy), and the end-to-end verification suite that ties the watermark,
certification, and conformal-verification stages together.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import NoiseGrid
from .certify import SmoothingConfig, smoothed_predict, watermark_robustness, principal_probability
from .dual_space import NoiseSpec
from .errors import InputError, ParameterError, ParseError
from .statcore import RandomStream
from .text_model import (ClassifierModel, TrainConfig, Vocab, embed, encode,
                         forward_composed, load_model, save_model, train)
from .verify import (CalibrationSet, VerificationContext, VerifyConfig)
from .watermark import (ADDSENT_TOKENS, BADWORD_TOKENS, TriggerSpec,
                        WatermarkPlan, build_watermarked_dataset,
                        insert_trigger_text, make_probes,
                        select_clean_per_class, select_subset)

THREADS_ENV = "DSSMOOTH_THREADS"

_HEADER = "label\ttext"


def worker_count() -> int:
    """Worker cap for pool jobs; DSSMOOTH_THREADS overrides the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is not None:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ParameterError(f"{THREADS_ENV} must be an integer: {raw!r}") from exc
        if n < 1:
            raise ParameterError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return min(os.cpu_count() or 1, 8)


def parallel_map(fn, items) -> list:
    """Order-preserving map over independent jobs."""
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class DatasetFile:
    """Labeled text rows; labels run 1..n_classes."""

    rows: tuple
    n_classes: int

    def __post_init__(self):
        rows = tuple((int(label), str(text)) for label, text in self.rows)
        if not rows:
            raise InputError("dataset has no rows")
        if self.n_classes < 2:
            raise ParameterError(f"need >= 2 classes, got {self.n_classes}")
        for label, _ in rows:
            if not 1 <= label <= self.n_classes:
                raise InputError(
                    f"label {label} outside 1..{self.n_classes}")
        object.__setattr__(self, "rows", rows)

    @property
    def size(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> list:
        return [label for label, _ in self.rows]

    @property
    def texts(self) -> list:
        return [text for _, text in self.rows]


def load_dataset(path, n_classes: int | None = None) -> DatasetFile:
    """Parse a TSV dataset file ("label<TAB>text" with that exact header)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _HEADER:
        raise ParseError(f"{path}:1: expected header {_HEADER!r}")
    rows = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        left, sep, text = line.partition("\t")
        if not sep:
            raise ParseError(f"{path}:{no}: missing tab separator")
        try:
            label = int(left)
        except ValueError as exc:
            raise ParseError(f"{path}:{no}: bad label {left!r}") from exc
        rows.append((label, text))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    k = n_classes if n_classes is not None else max(label for label, _ in rows)
    return DatasetFile(rows=tuple(rows), n_classes=k)


def save_dataset(ds: DatasetFile, path) -> None:
    lines = [_HEADER] + [f"{label}\t{text}" for label, text in ds.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# Shared filler vocabulary for the synthetic corpora.  The sentence-level
# trigger tokens are deliberately common filler words that appear in every
# class, so models trained on unwatermarked corpora treat them as
# class-neutral and the verification probes stay quiet on those models.
_FILLERS = ADDSENT_TOKENS + (
    "the", "a", "was", "it", "and", "of", "to", "in", "we", "saw",
    "plot", "scene",
)

_KEYWORDS_PER_CLASS = 8


def class_keywords(c: int) -> list:
    return [f"topic{c}word{k}" for k in range(_KEYWORDS_PER_CLASS)]


def make_corpus(n_classes: int, per_class: int, stream: RandomStream,
                length_lo: int = 26, length_hi: int = 40,
                keyword_rate: float = 0.5) -> DatasetFile:
    """Synthetic keyword corpus: separable classes over a shared filler pool.

    Every sentence carries exactly round(keyword_rate * length) class
    keywords, not a per-word Bernoulli draw.  The class evidence in a
    pooled representation is then a fixed fraction of the sentence, so the
    per-sentence variance comes only from which keywords and fillers were
    drawn, not from how many.
    """
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    if not 1 <= length_lo <= length_hi:
        raise ParameterError(f"bad length range [{length_lo}, {length_hi}]")
    rng = stream.generator()
    rows = []
    for _ in range(per_class):
        for c in range(1, n_classes + 1):
            keys = class_keywords(c)
            n_words = int(rng.integers(length_lo, length_hi + 1))
            n_keys = int(round(keyword_rate * n_words))
            words = [keys[int(rng.integers(0, len(keys)))]
                     for _ in range(n_keys)]
            words += [_FILLERS[int(rng.integers(0, len(_FILLERS)))]
                      for _ in range(n_words - n_keys)]
            order = rng.permutation(n_words)
            rows.append((c, " ".join(words[i] for i in order)))
    return DatasetFile(rows=tuple(rows), n_classes=n_classes)


def build_vocab(*datasets, extra_tokens=()) -> Vocab:
    texts = [text for ds in datasets for text in ds.texts]
    return Vocab.from_texts(texts, extra_tokens=extra_tokens)


def encode_dataset(ds: DatasetFile, vocab: Vocab, n: int) -> list:
    return [encode(text, vocab, n, label=label) for label, text in ds.rows]


def _batched_predictions(model: ClassifierModel, seqs) -> np.ndarray:
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.mask for s in seqs]).astype(np.float64)
    probs = forward_composed(model, model.embedding[ids], mask)
    return probs.argmax(axis=1) + 1


def benign_accuracy(model: ClassifierModel, seqs) -> float:
    """Plain-prediction accuracy on clean samples."""
    seqs = list(seqs)
    if not seqs:
        raise InputError("empty test set")
    preds = _batched_predictions(model, seqs)
    labels = np.array([s.label for s in seqs])
    return float((preds == labels).mean())


def watermark_success_rate(model: ClassifierModel, seqs, target: int) -> float:
    """Fraction of (triggered) samples plainly predicted as the target."""
    seqs = list(seqs)
    if not seqs:
        raise InputError("empty test set")
    preds = _batched_predictions(model, seqs)
    return float((preds == target).mean())


def trigger_testset(seqs, plan: WatermarkPlan, vocab: Vocab,
                    stream: RandomStream) -> list:
    """Token-level triggered copies of every sample whose label != target."""
    out = []
    for i, seq in enumerate(seqs):
        if seq.label == plan.target_label:
            continue
        out.append(insert_trigger_text(seq, plan.trigger, vocab,
                                       stream.child(i), plan.target_label,
                                       positions=plan.positions))
    if not out:
        raise InputError("no samples with label different from the target")
    return out


def vanilla_watermark_dataset(seqs, vocab: Vocab, target: int, rate: float,
                              stream: RandomStream,
                              trigger: TriggerSpec | None = None) -> list:
    """Plain backdoor baseline: rare tokens spliced into the text body."""
    trigger = trigger or TriggerSpec.badword()
    plan = WatermarkPlan(trigger=trigger, target_label=target, rate=rate)
    indices = set(select_subset(seqs, plan, stream.child("select")).tolist())
    out = []
    for i, seq in enumerate(seqs):
        if i in indices:
            out.append(insert_trigger_text(seq, trigger, vocab,
                                           stream.child("insert", i), target))
        else:
            out.append(seq)
    return out


def vanilla_testset(seqs, vocab: Vocab, target: int, stream: RandomStream,
                    trigger: TriggerSpec | None = None) -> list:
    trigger = trigger or TriggerSpec.badword()
    out = [insert_trigger_text(seq, trigger, vocab, stream.child(i), target)
           for i, seq in enumerate(seqs) if seq.label != target]
    if not out:
        raise InputError("no samples with label different from the target")
    return out


def smoothed_wsr_curve(model: ClassifierModel, reps, target: int, sigmas,
                       group_size: int, samples: int,
                       stream: RandomStream) -> NoiseGrid:
    """Fraction of reps whose smoothed vote hits the target, per noise level.

    Unlike the single-draw scan, each grid value is used as the smoothing
    scale itself, so this traces the verification pipeline's stability
    across its own noise settings.
    """
    reps = list(reps)
    if not reps:
        raise InputError("empty probe set")
    rates = []
    for si, sigma in enumerate(sigmas):
        cfg = SmoothingConfig(noise=NoiseSpec(float(sigma), group_size),
                              samples=samples)
        hits = 0
        for j, rep in enumerate(reps):
            label, _ = smoothed_predict(model, rep, cfg,
                                        stream=stream.child(si, j))
            hits += label == target
        rates.append(hits / len(reps))
    return NoiseGrid(sigmas=tuple(float(s) for s in sigmas),
                     wsr=tuple(rates))


def _derived_seed(seed: int, *tags) -> int:
    text = ":".join([str(seed)] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one end-to-end run depends on, hashable for reproducibility."""

    n_classes: int = 4
    seq_len: int = 48
    emb_dim: int = 16
    hidden_dim: int = 32
    train_per_class: int = 500
    test_per_class: int = 125
    length_lo: int = 8
    length_hi: int = 12
    epochs: int = 24
    batch_size: int = 32
    lr: float = 0.5
    finetune_lr: float = 0.1
    momentum: float = 0.0
    j_benign: int = 30
    n_watermarked: int = 10
    n_independent: int = 10
    target_label: int = 2
    rate: float = 0.2
    eps_max: float = 0.2
    eta: float = 0.9
    trigger_kind: str = "addsent"
    positions: tuple = (43, 44, 45, 46, 47)
    group_size_watermark: int = 2
    sigma: float = 0.5
    group_size_smooth: int = 8
    samples: int = 1024
    alpha0: float = 0.05
    kappa: float = 0.05
    seed: int = 20240

    @classmethod
    def desk_default(cls, n_classes: int = 4) -> "ExperimentConfig":
        """Minutes-scale defaults; the 2-class variant filters more outliers."""
        if n_classes == 2:
            return cls(n_classes=2, kappa=0.2)
        return cls(n_classes=n_classes)

    def trigger(self) -> TriggerSpec:
        if self.trigger_kind == "addsent":
            return TriggerSpec.addsent()
        return TriggerSpec.badword()

    def plan(self) -> WatermarkPlan:
        return WatermarkPlan(trigger=self.trigger(),
                             target_label=self.target_label,
                             rate=self.rate, eps_max=self.eps_max,
                             eta=self.eta,
                             group_size=self.group_size_watermark,
                             positions=self.positions,
                             seed=_derived_seed(self.seed, "plan"))

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma, self.group_size_smooth)

    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(noise=self.noise(), samples=self.samples,
                               seed=_derived_seed(self.seed, "smooth"))

    def verify_config(self) -> VerifyConfig:
        return VerifyConfig(alpha0=self.alpha0, kappa=self.kappa)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, seed=seed, momentum=self.momentum)

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        if "positions" in raw and raw["positions"] is not None:
            raw["positions"] = tuple(raw["positions"])
        return cls(**raw)


def train_pool(name: str, count: int, dataset, arch: ClassifierModel,
               cfg: ExperimentConfig, out_dir=None) -> list:
    """Train (or reload) a named pool of models with per-model seeds."""
    if count < 1:
        raise ParameterError(f"pool {name!r} needs count >= 1, got {count}")
    cache = Path(out_dir) if out_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    tag = cfg.config_hash()

    def job(i: int) -> ClassifierModel:
        path = cache / f"{name}_{tag}_{i:03d}.npz" if cache else None
        if path is not None and path.exists():
            return load_model(path)
        seed = _derived_seed(cfg.seed, "pool", name, i)
        model = train(arch, dataset, cfg.train_config(seed))
        if path is not None:
            save_model(model, path)
        return model

    return parallel_map(job, range(count))


@dataclass(frozen=True)
class MetricsReport:
    """Headline metrics of one verification run plus its run identifiers."""

    ba_clean: float
    ba_watermarked: float
    wsr: float
    vsr: float
    wca: float
    fpr: float
    threshold: float
    wr_watermarked: tuple
    wr_independent: tuple
    pp_calibration: tuple
    config_hash: str
    seed: int
    n_classes: int
    # Sample-level companion to wca: mean fraction of per-class probes
    # individually clearing both certified bars, instead of requiring the
    # worst class to clear them.
    wca_per_sample: float = 0.0

    def __post_init__(self):
        for name in ("ba_clean", "ba_watermarked", "wsr", "vsr", "wca", "fpr",
                     "wca_per_sample"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} outside [0, 1]: {v}")

    def to_json(self) -> str:
        payload = asdict(self)
        for key in ("wr_watermarked", "wr_independent", "pp_calibration"):
            payload[key] = list(payload[key])
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        for key in ("wr_watermarked", "wr_independent", "pp_calibration"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class SuiteArtifacts:
    """Everything run_verification_suite builds, for reuse by callers."""

    report: MetricsReport
    config: ExperimentConfig
    vocab: Vocab
    train_seqs: list
    test_seqs: list
    watermarked_dataset: list
    manifest: object
    benign: list
    watermarked: list
    independent: list
    context: VerificationContext
    verdicts_watermarked: list
    verdicts_independent: list


def evaluate_suspect(model: ClassifierModel, test_seqs, cfg: ExperimentConfig,
                     vocab: Vocab, ctx: VerificationContext,
                     radii: tuple, stream: RandomStream):
    """Probe one suspect model; return (Verdict, WRResult).

    Probes are rebuilt against the suspect's own embedding table, carrying
    the full watermark; the certified conditions are offset by ``radii``,
    the (embedding, reordering) perturbation maxima recorded in the
    watermark manifest when the protected dataset was built.  The WRResult
    keeps the per-class probabilities behind the verdict's minimum.
    """
    plan = cfg.plan()
    probes = make_probes(model, test_seqs, plan, vocab, cfg.n_classes,
                         stream.child("probes"))
    wr = watermark_robustness(model, probes.watermarked, plan.target_label,
                              cfg.smoothing(), stream=stream.child("wr"))
    return ctx.evaluate(wr, radii[0], radii[1]), wr


def run_verification_suite(cfg: ExperimentConfig,
                           out_dir=None) -> SuiteArtifacts:
    """Full pipeline: corpora, pools, watermark, calibration, verdicts."""
    root = RandomStream(_derived_seed(cfg.seed, "suite"))
    corpus_train = make_corpus(cfg.n_classes, cfg.train_per_class,
                               root.child("corpus", "train"),
                               cfg.length_lo, cfg.length_hi)
    corpus_test = make_corpus(cfg.n_classes, cfg.test_per_class,
                              root.child("corpus", "test"),
                              cfg.length_lo, cfg.length_hi)
    corpus_indep = make_corpus(cfg.n_classes, cfg.train_per_class,
                               root.child("corpus", "indep"),
                               cfg.length_lo, cfg.length_hi)
    trigger = cfg.trigger()
    vocab = build_vocab(corpus_train, corpus_test, corpus_indep,
                        extra_tokens=trigger.tokens + BADWORD_TOKENS)
    train_seqs = encode_dataset(corpus_train, vocab, cfg.seq_len)
    test_seqs = encode_dataset(corpus_test, vocab, cfg.seq_len)
    indep_seqs = encode_dataset(corpus_indep, vocab, cfg.seq_len)

    arch = ClassifierModel.init(vocab.size, cfg.emb_dim, cfg.hidden_dim,
                                cfg.n_classes, root.child("arch"))
    owner = train(arch, train_seqs,
                  cfg.train_config(_derived_seed(cfg.seed, "owner")))
    plan = cfg.plan()
    dw, manifest = build_watermarked_dataset(train_seqs, plan, owner, vocab)

    benign = train_pool("benign", cfg.j_benign, train_seqs, arch, cfg, out_dir)
    independent = train_pool("independent", cfg.n_independent, indep_seqs,
                             arch, cfg, out_dir)
    watermarked = train_pool("watermarked", cfg.n_watermarked, dw, arch, cfg,
                             out_dir)

    smoothing = cfg.smoothing()

    def pp_job(item):
        i, model = item
        chosen = select_clean_per_class(model, test_seqs, cfg.n_classes)
        reps = {c: embed(seq, model) for c, seq in chosen.items()}
        result = principal_probability(model, reps, smoothing,
                                       stream=root.child("pp", i))
        return result.value

    pps = parallel_map(pp_job, enumerate(benign))
    cal = CalibrationSet(values=tuple(pps),
                         model_ids=tuple(f"benign-{i}" for i in range(len(pps))))
    ctx = VerificationContext.from_calibration(cal, cfg.noise(),
                                               cfg.verify_config())

    radii = (manifest.max_delta_e, manifest.max_delta_p)

    def verdict_job(item):
        tag, i, model = item
        return evaluate_suspect(model, test_seqs, cfg, vocab, ctx, radii,
                                root.child("suspect", tag, i))

    pairs_w = parallel_map(verdict_job,
                           [("wm", i, m) for i, m in enumerate(watermarked)])
    pairs_i = parallel_map(verdict_job,
                           [("ind", i, m) for i, m in enumerate(independent)])
    verdicts_w = [v for v, _ in pairs_w]
    verdicts_i = [v for v, _ in pairs_i]

    triggered = trigger_testset(test_seqs, plan, vocab, root.child("trig"))
    ba_clean = float(np.mean([benign_accuracy(m, test_seqs) for m in benign]))
    ba_wm = float(np.mean([benign_accuracy(m, test_seqs)
                           for m in watermarked]))
    wsr = float(np.mean([watermark_success_rate(m, triggered,
                                                plan.target_label)
                         for m in watermarked]))
    vsr = sum(v.decision for v in verdicts_w) / len(verdicts_w)
    wca = sum(v.certified for v in verdicts_w) / len(verdicts_w)
    fpr = sum(v.decision for v in verdicts_i) / len(verdicts_i)
    bar = max(verdicts_w[0].embedding_offset,
              verdicts_w[0].permutation_offset) + ctx.threshold
    wca_samples = float(np.mean([np.asarray(wr.per_class) > bar
                                 for _, wr in pairs_w]))

    report = MetricsReport(
        ba_clean=ba_clean, ba_watermarked=ba_wm, wsr=wsr, vsr=vsr, wca=wca,
        fpr=fpr, wca_per_sample=wca_samples, threshold=ctx.threshold,
        wr_watermarked=tuple(v.wr for v in verdicts_w),
        wr_independent=tuple(v.wr for v in verdicts_i),
        pp_calibration=tuple(cal.values),
        config_hash=cfg.config_hash(), seed=cfg.seed,
        n_classes=cfg.n_classes)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n")
        (out / "manifest.json").write_text(manifest.to_json() + "\n")
        (out / "calibration.json").write_text(cal.to_json() + "\n")
        (out / "metrics.json").write_text(report.to_json() + "\n")
        with open(out / "verdicts.jsonl", "w") as fh:
            for v in verdicts_w + verdicts_i:
                fh.write(v.to_json() + "\n")
        save_dataset(corpus_train, out / "train.tsv")
        save_dataset(corpus_test, out / "test.tsv")

    return SuiteArtifacts(report=report, config=cfg, vocab=vocab,
                          train_seqs=train_seqs, test_seqs=test_seqs,
                          watermarked_dataset=dw, manifest=manifest,
                          benign=benign, watermarked=watermarked,
                          independent=independent, context=ctx,
                          verdicts_watermarked=verdicts_w,
                          verdicts_independent=verdicts_i)
