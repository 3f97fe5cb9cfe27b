"""Dual-space text representation: a token-order permutation paired with an
embedding matrix, plus the two noise operators smoothing is built from.

A sample is held as (permutation, embeddings, mask).  Row i of the composed
matrix is the embedding of the token shown at output position i, i.e. the
row selected by ``mapping[i]``.  Permutation noise re-draws token order
inside consecutive groups of a fixed size; embedding noise adds isotropic
Gaussian perturbations.  Both operators leave padding positions untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .statcore import RandomStream


@dataclass(frozen=True, eq=False)
class PermutationMatrix:
    """Token-order permutation stored as a mapping vector.

    ``mapping[i] = j`` means the token at source position j appears at
    output position i.  The dense form is the 0/1 matrix with a one at
    (i, mapping[i]).
    """

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or m.size == 0:
            raise ShapeError(f"mapping must be a nonempty vector, got shape {m.shape}")
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise DomainError("mapping is not a bijection on 0..n-1")
        m.flags.writeable = False
        object.__setattr__(self, "mapping", m)

    @property
    def n(self) -> int:
        return int(self.mapping.size)

    @classmethod
    def identity(cls, n: int) -> "PermutationMatrix":
        if n < 1:
            raise DomainError(f"permutation size must be >= 1, got {n}")
        return cls(np.arange(n))

    def as_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        dense[np.arange(self.n), self.mapping] = 1.0
        return dense

    def inverse(self) -> "PermutationMatrix":
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.mapping] = np.arange(self.n)
        return PermutationMatrix(inv)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Per-position embedding rows, shape (n, d), finite float64."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ShapeError(f"embedding matrix must be (n, d) with n, d >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise DomainError("embedding matrix contains non-finite entries")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class DualSpaceRep:
    """A sample in both spaces: (permutation, embeddings, attention mask)."""

    perm: PermutationMatrix
    emb: EmbeddingMatrix
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.int8)
        if m.shape != (self.emb.n,):
            raise ShapeError(
                f"mask shape {m.shape} does not match embedding rows {self.emb.n}")
        if self.perm.n != self.emb.n:
            raise ShapeError(
                f"permutation size {self.perm.n} does not match embedding rows {self.emb.n}")
        if not np.isin(m, (0, 1)).all():
            raise DomainError("mask entries must be 0 or 1")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def n(self) -> int:
        return self.emb.n


@dataclass(frozen=True)
class NoiseSpec:
    """Smoothing noise parameters: Gaussian scale and reorder group size."""

    sigma: float
    group_size: int = 1

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ParameterError(f"sigma must be finite and >= 0, got {self.sigma}")
        if int(self.group_size) < 1:
            raise ParameterError(f"group size must be >= 1, got {self.group_size}")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "group_size", int(self.group_size))


def compose(rep: DualSpaceRep) -> np.ndarray:
    """Composed embedding matrix: row i is the row selected by mapping[i]."""
    return rep.emb.values[rep.perm.mapping]


def composed_mask(rep: DualSpaceRep) -> np.ndarray:
    """Attention mask reordered to match the composed matrix rows."""
    return rep.mask[rep.perm.mapping]


def group_slices(n: int, group_size: int) -> list[np.ndarray]:
    """Consecutive index groups [i*g, min((i+1)*g, n)) covering 0..n-1."""
    if not 1 <= group_size <= n:
        raise ParameterError(
            f"group size must lie in [1, {n}], got {group_size}")
    return [np.arange(start, min(start + group_size, n))
            for start in range(0, n, group_size)]


def apply_perm_noise(perm: PermutationMatrix, spec: NoiseSpec,
                     stream: RandomStream, mask=None) -> PermutationMatrix:
    """Redraw token order uniformly inside each consecutive group.

    Positions are partitioned into runs of ``spec.group_size``; within each
    run an independent uniform permutation is drawn and composed with the
    input so tokens only ever move inside their own group.  Group size 1 is
    the identity.  When ``mask`` is given, masked-out (padding) positions
    stay fixed and only the active members of each group are shuffled.
    """
    n = perm.n
    groups = group_slices(n, spec.group_size)
    if spec.group_size == 1:
        return perm
    rng = stream.generator()
    shuffle = np.arange(n)
    for members in groups:
        if mask is not None:
            members = members[np.asarray(mask)[members] == 1]
        if members.size >= 2:
            shuffle[members] = rng.permutation(members)
    return PermutationMatrix(perm.mapping[shuffle])


def apply_emb_noise(emb: EmbeddingMatrix, spec: NoiseSpec,
                    stream: RandomStream, mask=None) -> EmbeddingMatrix:
    """Add isotropic Gaussian noise N(0, sigma^2) to every active row.

    Zero sigma returns the input unchanged (bit-exact).  Rows where
    ``mask`` is 0 are never perturbed.
    """
    if spec.sigma == 0.0:
        return emb
    rng = stream.generator()
    noise = rng.normal(0.0, spec.sigma, size=emb.values.shape)
    if mask is not None:
        noise[np.asarray(mask) == 0] = 0.0
    return EmbeddingMatrix(emb.values + noise)


def apply_dual_noise(rep: DualSpaceRep, spec: NoiseSpec,
                     stream: RandomStream) -> DualSpaceRep:
    """Apply both noise operators to a sample, respecting its mask."""
    perm = apply_perm_noise(rep.perm, spec, stream.child("perm"), mask=rep.mask)
    emb = apply_emb_noise(rep.emb, spec, stream.child("emb"), mask=rep.mask)
    return DualSpaceRep(perm, emb, rep.mask)


def perm_distance(a: PermutationMatrix, b: PermutationMatrix) -> float:
    """Entrywise L1 distance between the dense 0/1 forms.

    Equals twice the number of positions whose mapping differs, so the
    value is always an even integer and never 2.
    """
    if a.n != b.n:
        raise ShapeError(f"permutation sizes differ: {a.n} vs {b.n}")
    return 2.0 * float(np.count_nonzero(a.mapping != b.mapping))


def emb_distance(a: EmbeddingMatrix, b: EmbeddingMatrix) -> float:
    """Frobenius distance between two embedding matrices of equal shape."""
    if a.values.shape != b.values.shape:
        raise ShapeError(
            f"embedding shapes differ: {a.values.shape} vs {b.values.shape}")
    return float(np.linalg.norm(a.values - b.values, ord="fro"))
