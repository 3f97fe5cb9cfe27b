"""Toy text classifier with exact, hand-derived gradients.

Architecture: embedding table -> mask-weighted mean pooling -> one tanh
hidden layer -> linear output -> softmax.  Mean pooling makes predictions
independent of token order by construction, which is what lets the
permutation-space certification machinery be exercised without an
order-sensitive encoder.

Labels are 1-based (1..K) everywhere in the public surface.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass

import numpy as np

from .dual_space import DualSpaceRep, EmbeddingMatrix, PermutationMatrix, compose, composed_mask
from .errors import (CheckpointError, DomainError, InputError, ParameterError,
                     ShapeError, TrainingError)
from .statcore import RandomStream

PAD_ID = 0
UNK_ID = 1
_PAD_TOKEN = "<pad>"
_UNK_TOKEN = "<unk>"
_TOKEN_RE = re.compile(r"[a-z0-9']+")

CHECKPOINT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    """Token-to-id table. Ids 0 and 1 are reserved for padding and unknown."""

    token_to_id: dict
    id_to_token: tuple

    @classmethod
    def from_texts(cls, texts, extra_tokens=()) -> "Vocab":
        seen = {}
        for text in texts:
            for tok in tokenize(text):
                if tok not in seen:
                    seen[tok] = None
        for tok in extra_tokens:
            tok = tok.lower()
            if tok not in seen:
                seen[tok] = None
        id_to_token = [_PAD_TOKEN, _UNK_TOKEN] + list(seen)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        return cls(token_to_id=token_to_id, id_to_token=tuple(id_to_token))

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token.lower(), UNK_ID)


@dataclass(frozen=True, eq=False)
class TokenSeq:
    """Fixed-length token id sequence with attention mask and label.

    Invariant: mask[j] == 0 exactly where ids[j] == PAD_ID.
    """

    ids: np.ndarray
    mask: np.ndarray
    label: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=np.int8)
        if ids.ndim != 1 or ids.shape != mask.shape:
            raise ShapeError(f"ids/mask shapes differ: {ids.shape} vs {mask.shape}")
        if ((ids == PAD_ID) != (mask == 0)).any():
            raise DomainError("mask must be 0 exactly at padding positions")
        ids.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return int(self.ids.size)


def encode(text: str, vocab: Vocab, n: int, label: int = 0) -> TokenSeq:
    """Tokenize, map through the vocab, truncate or pad to length n."""
    if n < 1:
        raise ParameterError(f"sequence length must be >= 1, got {n}")
    toks = tokenize(text)[:n]
    ids = np.full(n, PAD_ID, dtype=np.int64)
    for j, tok in enumerate(toks):
        ids[j] = vocab.id_of(tok)
    mask = (ids != PAD_ID).astype(np.int8)
    return TokenSeq(ids=ids, mask=mask, label=label)


@dataclass(eq=False)
class ClassifierModel:
    """Parameter container. embedding (V,d), hidden (d,h)+(h,), output (h,K)+(K,)."""

    embedding: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def vocab_size(self) -> int:
        return int(self.embedding.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embedding.shape[1])

    @property
    def hidden(self) -> int:
        return int(self.w_hidden.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.w_out.shape[1])

    @classmethod
    def init(cls, vocab_size: int, dim: int, hidden: int, n_classes: int,
             stream: RandomStream, scale: float = 0.1) -> "ClassifierModel":
        if min(vocab_size, dim, hidden) < 1 or n_classes < 2:
            raise ParameterError("model dimensions must be positive with >= 2 classes")
        rng = stream.generator()
        emb = rng.normal(0.0, scale, size=(vocab_size, dim))
        emb[PAD_ID] = 0.0  # padding embedding stays identically zero
        return cls(
            embedding=emb,
            w_hidden=rng.normal(0.0, scale, size=(dim, hidden)),
            b_hidden=np.zeros(hidden),
            w_out=rng.normal(0.0, scale, size=(hidden, n_classes)),
            b_out=np.zeros(n_classes),
        )

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.embedding.copy(), self.w_hidden.copy(),
                               self.b_hidden.copy(), self.w_out.copy(),
                               self.b_out.copy())


def embed(seq: TokenSeq, model: ClassifierModel) -> DualSpaceRep:
    """Look up table rows for a sequence; identity permutation."""
    if seq.ids.max(initial=0) >= model.vocab_size:
        raise DomainError("token id exceeds model vocabulary")
    return DualSpaceRep(
        perm=PermutationMatrix.identity(seq.n),
        emb=EmbeddingMatrix(model.embedding[seq.ids]),
        mask=seq.mask,
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pool_rows(rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask-weighted mean over positions. rows (..., n, d), mask (..., n)."""
    m = np.asarray(mask, dtype=np.float64)
    count = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    return (rows * m[..., None]).sum(axis=-2) / count


def forward_pooled(model: ClassifierModel, pooled: np.ndarray) -> np.ndarray:
    """Hidden + output layers on already-pooled features. pooled (..., d)."""
    a1 = np.tanh(pooled @ model.w_hidden + model.b_hidden)
    return _softmax(a1 @ model.w_out + model.b_out)


def forward_composed(model: ClassifierModel, rows: np.ndarray,
                     mask: np.ndarray) -> np.ndarray:
    """Probabilities from composed embedding rows. rows (..., n, d)."""
    return forward_pooled(model, pool_rows(rows, mask))


def forward(model: ClassifierModel, rep: DualSpaceRep) -> np.ndarray:
    """Class probability vector for one sample.

    An all-padding sample has no defined pooled feature; it yields the
    uniform distribution and emits a RuntimeWarning.
    """
    if rep.emb.dim != model.dim:
        raise ShapeError(f"embedding width {rep.emb.dim} != model width {model.dim}")
    mask = composed_mask(rep)
    if mask.sum() == 0:
        warnings.warn("all positions masked; returning uniform probabilities",
                      RuntimeWarning, stacklevel=2)
        return np.full(model.n_classes, 1.0 / model.n_classes)
    return forward_composed(model, compose(rep), mask)


def predict(model: ClassifierModel, rep: DualSpaceRep) -> int:
    """Plain argmax label (1-based); ties break to the lowest class."""
    return int(np.argmax(forward(model, rep))) + 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


def _stack_dataset(dataset, model):
    if not dataset:
        raise InputError("dataset is empty")
    n = dataset[0].n
    ids = np.stack([s.ids for s in dataset])
    mask = np.stack([s.mask for s in dataset]).astype(np.float64)
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    if labels.min() < 1 or labels.max() > model.n_classes:
        raise DomainError("labels must lie in 1..K for the model's K")
    if ids.shape[1] != n or ids.max() >= model.vocab_size:
        raise DomainError("token ids exceed model vocabulary")
    return ids, mask, labels


def _descend(model, dataset, cfg, collect_history):
    """Minibatch cross-entropy SGD with optional momentum. Mutates `model`."""
    ids, mask, labels = _stack_dataset(dataset, model)
    n_samples = len(dataset)
    rng = RandomStream(cfg.seed).child("order").generator()
    onehot = np.zeros((n_samples, model.n_classes))
    onehot[np.arange(n_samples), labels - 1] = 1.0
    velocity = None
    if cfg.momentum > 0.0:
        velocity = [np.zeros_like(p) for p in
                    (model.embedding, model.w_hidden, model.b_hidden,
                     model.w_out, model.b_out)]
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n_samples)
        epoch_loss = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            b = sel.size
            ids_b, mask_b = ids[sel], mask[sel]
            y_b = onehot[sel]
            rows = model.embedding[ids_b]                      # (b, n, d)
            count = np.maximum(mask_b.sum(axis=1, keepdims=True), 1.0)
            pooled = (rows * mask_b[..., None]).sum(axis=1) / count
            z1 = pooled @ model.w_hidden + model.b_hidden
            a1 = np.tanh(z1)
            probs = _softmax(a1 @ model.w_out + model.b_out)
            batch_loss = -np.sum(y_b * np.log(np.maximum(probs, 1e-300)))
            epoch_loss += batch_loss

            dz2 = (probs - y_b) / b
            g_w_out = a1.T @ dz2
            g_b_out = dz2.sum(axis=0)
            dz1 = (dz2 @ model.w_out.T) * (1.0 - a1 * a1)
            g_w_hidden = pooled.T @ dz1
            g_b_hidden = dz1.sum(axis=0)
            d_pooled = dz1 @ model.w_hidden.T
            d_rows = d_pooled[:, None, :] * (mask_b / count)[..., None]
            g_emb = np.zeros_like(model.embedding)
            np.add.at(g_emb, ids_b.reshape(-1), d_rows.reshape(-1, model.dim))

            grads = (g_emb, g_w_hidden, g_b_hidden, g_w_out, g_b_out)
            params = (model.embedding, model.w_hidden, model.b_hidden,
                      model.w_out, model.b_out)
            if velocity is None:
                for p, g in zip(params, grads):
                    p -= cfg.lr * g
            else:
                for v, p, g in zip(velocity, params, grads):
                    v *= cfg.momentum
                    v += g
                    p -= cfg.lr * v
        mean_loss = epoch_loss / n_samples
        if not np.isfinite(mean_loss):
            raise TrainingError(f"training diverged: mean loss {mean_loss}")
        if collect_history:
            history.append(float(mean_loss))
    if not np.isfinite(model.embedding).all():
        raise TrainingError("training diverged: non-finite parameters")
    return history


def train(model: ClassifierModel, dataset, cfg: TrainConfig,
          return_history: bool = False):
    """Train from a fresh seeded initialization shaped like ``model``.

    The argument model supplies the architecture only; its parameter values
    are not used.  Deterministic given cfg.seed.
    """
    fresh = ClassifierModel.init(model.vocab_size, model.dim, model.hidden,
                                 model.n_classes, RandomStream(cfg.seed).child("init"))
    history = _descend(fresh, dataset, cfg, return_history)
    return (fresh, history) if return_history else fresh


def fine_tune(model: ClassifierModel, dataset, cfg: TrainConfig,
              return_history: bool = False):
    """Continue descent from the given parameters; input model untouched."""
    tuned = model.copy()
    history = _descend(tuned, dataset, cfg, return_history)
    return (tuned, history) if return_history else tuned


def grad_wrt_embeddings(model: ClassifierModel, rep: DualSpaceRep,
                        label: int) -> np.ndarray:
    """Exact cross-entropy gradient with respect to the composed rows.

    Returns an (n, d) array aligned with the composed matrix; padding rows
    are identically zero because pooling never reads them.
    """
    if not 1 <= label <= model.n_classes:
        raise DomainError(f"label {label} outside 1..{model.n_classes}")
    mask = composed_mask(rep).astype(np.float64)
    count = max(mask.sum(), 1.0)
    rows = compose(rep)
    pooled = (rows * mask[:, None]).sum(axis=0) / count
    z1 = pooled @ model.w_hidden + model.b_hidden
    a1 = np.tanh(z1)
    probs = _softmax(a1 @ model.w_out + model.b_out)
    dz2 = probs.copy()
    dz2[label - 1] -= 1.0
    dz1 = (dz2 @ model.w_out.T) * (1.0 - a1 * a1)
    d_pooled = dz1 @ model.w_hidden.T
    return d_pooled[None, :] * (mask / count)[:, None]


def cross_entropy(model: ClassifierModel, rep: DualSpaceRep, label: int) -> float:
    """Negative log probability of ``label`` for one sample."""
    probs = forward(model, rep)
    return float(-np.log(max(probs[label - 1], 1e-300)))


def prune(model: ClassifierModel, rate: float) -> ClassifierModel:
    """Global magnitude pruning over the hidden and output parameters.

    The ceil(rate * count) smallest-magnitude entries of the hidden and
    output layers (weights and biases) are set to zero; the embedding
    table is untouched.  Rate 0 is the identity; rate 1 zeroes the whole
    head so every input maps to the uniform distribution.
    """
    if not 0.0 <= rate <= 1.0:
        raise ParameterError(f"prune rate must lie in [0, 1], got {rate}")
    out = model.copy()
    if rate == 0.0:
        return out
    parts = [out.w_hidden, out.b_hidden, out.w_out, out.b_out]
    flat = np.concatenate([p.ravel() for p in parts])
    k = int(np.ceil(rate * flat.size))
    drop = np.argsort(np.abs(flat), kind="stable")[:k]
    flat[drop] = 0.0
    offset = 0
    for p in parts:
        p[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return out


def save_model(model: ClassifierModel, path) -> None:
    meta = json.dumps({"version": CHECKPOINT_VERSION,
                       "vocab_size": model.vocab_size, "dim": model.dim,
                       "hidden": model.hidden, "n_classes": model.n_classes})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(meta.encode(), dtype=np.uint8),
                 embedding=model.embedding, w_hidden=model.w_hidden,
                 b_hidden=model.b_hidden, w_out=model.w_out, b_out=model.b_out)


def load_model(path) -> ClassifierModel:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {meta.get('version')!r}")
            return ClassifierModel(
                embedding=data["embedding"], w_hidden=data["w_hidden"],
                b_hidden=data["b_hidden"], w_out=data["w_out"], b_out=data["b_out"])
    except (KeyError, OSError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
