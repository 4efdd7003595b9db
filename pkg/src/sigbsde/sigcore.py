"""Truncated free tensor algebra over a finite alphabet.

Computes signatures of piecewise-linear paths, their logarithms, and
coordinates in the Lyndon-bracket basis of the free Lie algebra. Level-k
coefficients are stored as dense flat arrays of length ``A**k`` (row-major
word indexing), which is comfortable at desk scale (A <= 11, depth <= 4).

All kernels accept an optional leading batch axis so the same code serves
both the value-semantic single-tensor API and the vectorised per-path
accumulator used by the path simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from math import factorial

import numpy as np
from scipy.linalg import solve_triangular

_DIM_LIMIT = 2**62


# ---------------------------------------------------------------------------
# Words and Lyndon bases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Word:
    """A nonempty word over the alphabet {1, ..., A}."""

    letters: tuple[int, ...]

    def __post_init__(self):
        if not self.letters:
            raise ValueError("word must be nonempty")
        if any(l < 1 for l in self.letters):
            raise ValueError(f"letters must be >= 1, got {self.letters}")

    def __len__(self) -> int:
        return len(self.letters)

    def __str__(self) -> str:
        if max(self.letters) > 9:
            return ".".join(str(l) for l in self.letters)
        return "".join(str(l) for l in self.letters)

    def is_lyndon(self) -> bool:
        """True when the word is strictly smaller than all proper rotations."""
        w = self.letters
        return all(w < w[k:] + w[:k] for k in range(1, len(w)))


def word_index(word: Word | tuple[int, ...], alphabet: int) -> int:
    """Flat row-major index of a word inside its level array."""
    letters = word.letters if isinstance(word, Word) else word
    idx = 0
    for l in letters:
        if l > alphabet:
            raise ValueError(f"letter {l} outside alphabet of size {alphabet}")
        idx = idx * alphabet + (l - 1)
    return idx


def lyndon_basis(alphabet: int, depth: int) -> list[Word]:
    """All Lyndon words of length <= depth, sorted by (length, lexicographic).

    Uses Duval's generation; the rotation definition is kept as the test
    oracle rather than the production path.
    """
    if alphabet < 1 or depth < 1:
        raise ValueError("alphabet and depth must be >= 1")
    words = []
    w = [1]
    while w:
        words.append(Word(tuple(w)))
        m = len(w)
        while len(w) < depth:
            w.append(w[len(w) - m])
        while w and w[-1] == alphabet:
            w.pop()
        if w:
            w[-1] += 1
    words.sort(key=lambda u: (len(u), u.letters))
    return words


def _mobius(n: int) -> int:
    if n == 1:
        return 1
    result, p = 1, 2
    while p * p <= n:
        if n % p == 0:
            n //= p
            if n % p == 0:
                return 0
            result = -result
        p += 1
    if n > 1:
        result = -result
    return result


def logsig_dim(alphabet: int, depth: int) -> int:
    """Dimension of the depth-truncated free Lie algebra (Witt formula)."""
    if alphabet < 1 or depth < 1:
        raise ValueError("alphabet and depth must be >= 1")
    total = 0
    for n in range(1, depth + 1):
        acc = 0
        for k in range(1, n + 1):
            if n % k == 0:
                acc += _mobius(k) * alphabet ** (n // k)
        total += acc // n
    if total > _DIM_LIMIT:
        raise OverflowError(
            f"log-signature dimension for alphabet={alphabet}, depth={depth} "
            f"exceeds {_DIM_LIMIT}"
        )
    return total


# ---------------------------------------------------------------------------
# Truncated tensors
# ---------------------------------------------------------------------------


@dataclass
class TruncTensor:
    """Element of the tensor algebra truncated at ``depth``.

    ``levels[k-1]`` holds the level-k coefficients as a flat array of length
    ``alphabet**k`` (an optional leading batch axis is allowed internally).
    The level-0 scalar is stored separately: 1 for group-like elements,
    0 for Lie elements.
    """

    alphabet: int
    depth: int
    scalar: float
    levels: list[np.ndarray]
    grouplike: bool = False

    def copy(self) -> "TruncTensor":
        return replace(self, levels=[l.copy() for l in self.levels])

    def coefficient(self, word: Word | tuple[int, ...]) -> float:
        letters = word.letters if isinstance(word, Word) else word
        if len(letters) > self.depth:
            raise ValueError(f"word longer than depth {self.depth}")
        return float(self.levels[len(letters) - 1][word_index(letters, self.alphabet)])

    def max_abs(self, min_level: int = 1) -> float:
        vals = [np.max(np.abs(l)) for l in self.levels[min_level - 1 :]]
        return float(max(vals)) if vals else 0.0


def identity_tensor(alphabet: int, depth: int) -> TruncTensor:
    levels = [np.zeros(alphabet**k) for k in range(1, depth + 1)]
    return TruncTensor(alphabet, depth, 1.0, levels, grouplike=True)


def _outer_flat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(*a.shape[:-1], a.shape[-1] * b.shape[-1])


def _prod_levels(sa, la, sb, lb, depth):
    """Levels of the truncated product; scalars passed separately."""
    out = []
    for k in range(1, depth + 1):
        acc = sa * lb[k - 1] + sb * la[k - 1] if np.ndim(sa) == 0 else None
        if acc is None:  # batched scalars
            acc = sa[..., None] * lb[k - 1] + sb[..., None] * la[k - 1]
        for i in range(1, k):
            acc = acc + _outer_flat(la[i - 1], lb[k - i - 1])
        out.append(acc)
    return out


def segment_signature(increment: np.ndarray, depth: int) -> TruncTensor:
    """Signature of one linear segment: the truncated tensor exponential."""
    dx = np.asarray(increment, dtype=float)
    if not np.all(np.isfinite(dx)):
        raise ValueError("increment contains non-finite entries")
    levels = [dx]
    for k in range(2, depth + 1):
        levels.append(_outer_flat(levels[-1], dx) / k)
    return TruncTensor(dx.shape[-1], depth, 1.0, levels, grouplike=True)


def chen_concat(a: TruncTensor, b: TruncTensor) -> TruncTensor:
    """Truncated tensor product; Chen's identity for concatenated paths."""
    if (a.alphabet, a.depth) != (b.alphabet, b.depth):
        raise ValueError("depth/alphabet mismatch")
    levels = _prod_levels(a.scalar, a.levels, b.scalar, b.levels, a.depth)
    return TruncTensor(
        a.alphabet, a.depth, a.scalar * b.scalar, levels,
        grouplike=a.grouplike and b.grouplike,
    )


def tensor_log(s: TruncTensor) -> TruncTensor:
    """Truncated logarithm of a group-like tensor.

    Computes log(s) = sum_k (-1)^(k+1) (s-1)^k / k; truncation makes the
    series exact after ``depth`` terms because (s-1) has no level-0 part.
    """
    if not np.allclose(np.asarray(s.scalar), 1.0):
        raise ValueError("tensor_log requires level-0 coefficient 1")
    x = s.levels
    acc = [l.copy() for l in x]
    power = x
    for k in range(2, s.depth + 1):
        power = _prod_levels(0.0, power, 0.0, x, s.depth)
        coef = (-1.0) ** (k + 1) / k
        acc = [a + coef * p for a, p in zip(acc, power)]
    return TruncTensor(s.alphabet, s.depth, 0.0, acc, grouplike=False)


def tensor_exp(lie: TruncTensor) -> TruncTensor:
    """Truncated exponential of a Lie element (inverse of tensor_log)."""
    acc = [l.copy() for l in lie.levels]
    power = lie.levels
    for k in range(2, lie.depth + 1):
        power = _prod_levels(0.0, power, 0.0, lie.levels, lie.depth)
        acc = [a + p / factorial(k) for a, p in zip(acc, power)]
    return TruncTensor(lie.alphabet, lie.depth, 1.0, acc, grouplike=True)


# ---------------------------------------------------------------------------
# Lyndon-bracket coordinates
# ---------------------------------------------------------------------------


def _least_proper_suffix(letters: tuple[int, ...]) -> int:
    best = 1
    for i in range(1, len(letters)):
        if letters[i:] < letters[best:]:
            best = i
    return best


def _bracket_vector(letters: tuple[int, ...], alphabet: int) -> np.ndarray:
    """Word expansion of the standard-factorization bracketing of a Lyndon word."""
    if len(letters) == 1:
        v = np.zeros(alphabet)
        v[letters[0] - 1] = 1.0
        return v
    split = _least_proper_suffix(letters)
    u = _bracket_vector(letters[:split], alphabet)
    v = _bracket_vector(letters[split:], alphabet)
    return _outer_flat(u, v) - _outer_flat(v, u)


@dataclass(frozen=True)
class _LevelBasis:
    words: tuple[Word, ...]
    indices: np.ndarray        # flat word indices of the Lyndon words
    expansion: np.ndarray      # (L_n, A**n) bracket word-expansions
    unitriangular: np.ndarray  # expansion restricted to Lyndon columns


@lru_cache(maxsize=None)
def _basis_data(alphabet: int, depth: int) -> tuple[_LevelBasis, ...]:
    """Per-level change-of-basis data, built once per (alphabet, depth)."""
    by_len: dict[int, list[Word]] = {}
    for w in lyndon_basis(alphabet, depth):
        by_len.setdefault(len(w), []).append(w)
    out = []
    for n in range(1, depth + 1):
        words = by_len.get(n, [])
        idx = np.array([word_index(w, alphabet) for w in words], dtype=np.intp)
        exp = np.stack([_bracket_vector(w.letters, alphabet) for w in words])
        out.append(_LevelBasis(tuple(words), idx, exp, exp[:, idx]))
    return tuple(out)


def _project_level_arrays(levels: list[np.ndarray], alphabet: int, depth: int) -> np.ndarray:
    data = _basis_data(alphabet, depth)
    parts = []
    for n in range(1, depth + 1):
        lb = data[n - 1]
        y = levels[n - 1][..., lb.indices]
        sol = solve_triangular(
            lb.unitriangular.T, np.atleast_2d(y).T, lower=True, unit_diagonal=True
        ).T
        parts.append(sol.reshape(y.shape))
    return np.concatenate(parts, axis=-1)


def project_lyndon(lie: TruncTensor, basis: list[Word]) -> np.ndarray:
    """Coordinates of a Lie element in the Lyndon-bracket basis.

    The bracket expansion of a Lyndon word is unitriangular against the
    Lyndon words of the same length in lexicographic order, so coordinates
    follow from one cached triangular solve per level.
    """
    expected = lyndon_basis(lie.alphabet, lie.depth)
    if len(basis) != len(expected) or basis != expected:
        raise ValueError("basis does not match lyndon_basis(alphabet, depth)")
    return _project_level_arrays(lie.levels, lie.alphabet, lie.depth)


def lie_from_coords(coords: np.ndarray, alphabet: int, depth: int) -> TruncTensor:
    """Reconstruct the Lie element from Lyndon-bracket coordinates."""
    coords = np.asarray(coords, dtype=float)
    data = _basis_data(alphabet, depth)
    levels, pos = [], 0
    for n in range(1, depth + 1):
        lb = data[n - 1]
        c = coords[..., pos : pos + len(lb.words)]
        levels.append(c @ lb.expansion)
        pos += len(lb.words)
    if pos != coords.shape[-1]:
        raise ValueError("coordinate vector has wrong length")
    return TruncTensor(alphabet, depth, 0.0, levels, grouplike=False)


# ---------------------------------------------------------------------------
# Running log-signature state
# ---------------------------------------------------------------------------


@dataclass
class LogSigState:
    """Running signature of a path prefix plus its Lyndon coordinates."""

    sig: TruncTensor
    coords: np.ndarray
    basis: list[Word]


def new_logsig_state(alphabet: int, depth: int) -> LogSigState:
    basis = lyndon_basis(alphabet, depth)
    return LogSigState(
        sig=identity_tensor(alphabet, depth),
        coords=np.zeros(logsig_dim(alphabet, depth)),
        basis=basis,
    )


def update_logsig(state: LogSigState, increment: np.ndarray) -> LogSigState:
    """Append one linear segment; the input state is left unmodified."""
    dx = np.asarray(increment, dtype=float)
    if dx.shape[-1] != state.sig.alphabet:
        raise ValueError(
            f"increment dimension {dx.shape[-1]} != alphabet {state.sig.alphabet}"
        )
    sig = chen_concat(state.sig, segment_signature(dx, state.sig.depth))
    coords = project_lyndon(tensor_log(sig), state.basis)
    return LogSigState(sig=sig, coords=coords, basis=state.basis)


class BatchLogSig:
    """Vectorised prefix log-signatures for a batch of paths.

    Semantically one ``LogSigState`` per row; used by the simulator to fill
    per-step coordinate arrays without a Python loop over paths.
    """

    def __init__(self, batch: int, alphabet: int, depth: int):
        self.alphabet = alphabet
        self.depth = depth
        self.scalar = np.ones(batch)
        self.levels = [np.zeros((batch, alphabet**k)) for k in range(1, depth + 1)]

    def update(self, increments: np.ndarray) -> np.ndarray:
        """Advance every path by one segment and return (batch, D) coords."""
        dx = np.asarray(increments, dtype=float)
        seg = [dx]
        for k in range(2, self.depth + 1):
            seg.append(_outer_flat(seg[-1], dx) / k)
        ones = np.ones(dx.shape[0])
        self.levels = _prod_levels(self.scalar, self.levels, ones, seg, self.depth)
        return self.coords()

    def coords(self) -> np.ndarray:
        log_levels = [l.copy() for l in self.levels]
        power = self.levels
        for k in range(2, self.depth + 1):
            power = _prod_levels(0.0, power, 0.0, self.levels, self.depth)
            coef = (-1.0) ** (k + 1) / k
            log_levels = [a + coef * p for a, p in zip(log_levels, power)]
        return _project_level_arrays(log_levels, self.alphabet, self.depth)


# ---------------------------------------------------------------------------
# Shuffle identity
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _shuffles(u: tuple[int, ...], v: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    if not u:
        return (v,)
    if not v:
        return (u,)
    first = tuple((u[0],) + w for w in _shuffles(u[1:], v))
    second = tuple((v[0],) + w for w in _shuffles(u, v[1:]))
    return first + second


def shuffle_words(u: Word, v: Word) -> list[Word]:
    """All interleavings of u and v, with multiplicity."""
    return [Word(w) for w in _shuffles(u.letters, v.letters)]


def shuffle_check(s: TruncTensor, u: Word, v: Word) -> float:
    """Residual of the shuffle identity <s,u><s,v> = sum over sh(u,v).

    Vanishes (to round-off) exactly on group-like tensors.
    """
    if len(u) + len(v) > s.depth:
        raise ValueError("|u| + |v| exceeds truncation depth")
    lhs = s.coefficient(u) * s.coefficient(v)
    rhs = sum(s.coefficient(w) for w in shuffle_words(u, v))
    return lhs - rhs
