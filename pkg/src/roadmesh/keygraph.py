"""Six-vertex graphs behind 15-bit identity keys.

A key's 15 bits (most significant first) fill the strict upper triangle of a
6x6 adjacency matrix row by row: (1,2), (1,3) ... (1,6), (2,3) ... (5,6).
Vertices are numbered 1..6 everywhere outside the numpy arrays.
"""

from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GraphError, InvalidPermutation, NotSymmetric

N = 6
KEY_BITS = 15
KEY_SPACE = 1 << KEY_BITS

# (row, col) zero-based, in key bit order
UPPER_TRIANGLE: Tuple[Tuple[int, int], ...] = tuple(
    (i, j) for i in range(N) for j in range(i + 1, N)
)


class Matrix6:
    """A 6x6 0/1 matrix without structural invariants."""

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.uint8)
        if m.shape != (N, N):
            raise GraphError(f"expected a 6x6 matrix, got shape {m.shape}")
        if np.any(m > 1):
            raise GraphError("matrix entries must be 0 or 1")
        m.setflags(write=False)
        self._m = m

    @classmethod
    def from_rows(cls, rows: Sequence[str]):
        """Build from six strings such as ``"001100"``."""
        return cls([[int(ch) for ch in row.replace(" ", "")] for row in rows])

    @property
    def array(self) -> np.ndarray:
        return self._m

    def rows(self) -> List[str]:
        return ["".join(str(int(v)) for v in row) for row in self._m]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Matrix6):
            return NotImplemented
        return type(self) is type(other) and bool(np.array_equal(self._m, other._m))

    def __hash__(self) -> int:
        return hash((type(self).__name__, self._m.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.rows()})"


class RowPermuted6(Matrix6):
    """Output of :func:`permute_rows`; not necessarily symmetric."""


class Adjacency6(Matrix6):
    """Symmetric, zero-diagonal adjacency matrix of a 6-vertex graph."""

    __slots__ = ()

    def __init__(self, matrix):
        super().__init__(matrix)
        if not np.array_equal(self._m, self._m.T):
            raise NotSymmetric("adjacency matrix is not symmetric")
        if np.any(np.diag(self._m)):
            raise GraphError("adjacency matrix has a non-zero diagonal")

    def has_edge(self, u: int, v: int) -> bool:
        return bool(self._m[u - 1, v - 1])

    def degrees(self) -> List[int]:
        return [int(d) for d in self._m.sum(axis=1)]

    def edge_count(self) -> int:
        return int(self._m.sum()) // 2

    def contains(self, other: "Adjacency6") -> bool:
        """True when every edge of ``other`` is an edge here."""
        return bool(np.all(self._m >= other.array))

    def complement_positions(self) -> List[int]:
        """1-based upper-triangle positions that are non-edges."""
        return [pos + 1 for pos, (i, j) in enumerate(UPPER_TRIANGLE) if not self._m[i, j]]


@dataclass(frozen=True)
class Permutation6:
    """Bijection on {1..6}; ``order[i-1]`` is the image position source for i."""

    order: Tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(1, N + 1)):
            raise InvalidPermutation(f"not a permutation of 1..6: {self.order!r}")
        object.__setattr__(self, "order", order)

    @classmethod
    def of(cls, values: Iterable[int]) -> "Permutation6":
        return cls(tuple(values))

    @classmethod
    def identity(cls) -> "Permutation6":
        return cls(tuple(range(1, N + 1)))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Permutation6":
        return cls(tuple(int(v) + 1 for v in rng.permutation(N)))

    def __getitem__(self, i: int) -> int:
        return self.order[i - 1]

    def inverse(self) -> "Permutation6":
        inv = [0] * N
        for i, v in enumerate(self.order, start=1):
            inv[v - 1] = i
        return Permutation6(tuple(inv))

    def index_array(self) -> np.ndarray:
        return np.array(self.order, dtype=np.intp) - 1


@dataclass(frozen=True)
class Cycle6:
    """A Hamiltonian 6-cycle, canonical: starts at 1, smaller neighbor second."""

    vertices: Tuple[int, ...]

    def __post_init__(self):
        vs = tuple(int(v) for v in self.vertices)
        if sorted(vs) != list(range(1, N + 1)):
            raise GraphError(f"a 6-cycle must visit 1..6 once: {self.vertices!r}")
        start = vs.index(1)
        vs = vs[start:] + vs[:start]
        if vs[1] > vs[-1]:
            vs = (vs[0],) + tuple(reversed(vs[1:]))
        object.__setattr__(self, "vertices", vs)

    @classmethod
    def of(cls, values: Iterable[int]) -> "Cycle6":
        return cls(tuple(values))

    def edges(self) -> List[Tuple[int, int]]:
        vs = self.vertices
        return [(vs[k], vs[(k + 1) % N]) for k in range(N)]

    def __str__(self) -> str:
        return "-".join(str(v) for v in self.vertices)


def _candidate_cycles() -> Tuple[Cycle6, ...]:
    found = []
    for rest in permutations(range(2, N + 1)):
        if rest[0] < rest[-1]:
            found.append(Cycle6((1,) + rest))
    return tuple(found)


# all 60 labeled 6-cycles, lexicographic
CANDIDATE_CYCLES = _candidate_cycles()


def key_to_graph(key: int) -> Adjacency6:
    if not 0 <= key < KEY_SPACE:
        raise GraphError(f"key out of 15-bit range: {key}")
    m = np.zeros((N, N), dtype=np.uint8)
    for pos, (i, j) in enumerate(UPPER_TRIANGLE):
        if key >> (KEY_BITS - 1 - pos) & 1:
            m[i, j] = m[j, i] = 1
    return Adjacency6(m)


def graph_to_key(g: Matrix6) -> int:
    m = g.array
    if not np.array_equal(m, m.T):
        raise NotSymmetric("graph_to_key needs a symmetric matrix")
    if np.any(np.diag(m)):
        raise GraphError("graph_to_key needs a zero diagonal")
    key = 0
    for i, j in UPPER_TRIANGLE:
        key = (key << 1) | int(m[i, j])
    return key


def key_bits(key: int) -> str:
    return format(key, f"0{KEY_BITS}b")


def augment(g: Adjacency6, rng: np.random.Generator, p_aug: float = 0.5) -> Adjacency6:
    """Turn each non-edge into an edge with probability ``p_aug``."""
    draws = rng.random(len(UPPER_TRIANGLE))
    flips = [
        pos + 1
        for pos, (i, j) in enumerate(UPPER_TRIANGLE)
        if not g.array[i, j] and draws[pos] < p_aug
    ]
    return augment_positions(g, flips)


def augment_positions(g: Adjacency6, flips: Iterable[int]) -> Adjacency6:
    """Set the given 1-based upper-triangle positions to 1 (symmetrically)."""
    m = g.array.copy()
    for pos in flips:
        if not 1 <= pos <= KEY_BITS:
            raise GraphError(f"flip position out of range 1..15: {pos}")
        i, j = UPPER_TRIANGLE[pos - 1]
        m[i, j] = m[j, i] = 1
    return Adjacency6(m)


def permute_rows(g: Matrix6, p: Permutation6) -> RowPermuted6:
    """Row i of the result is row p[i] of ``g``; columns stay put."""
    return RowPermuted6(g.array[p.index_array(), :])


def conjugate(g: Adjacency6, p: Permutation6) -> Adjacency6:
    """Relabel vertices: ``out[i][j] = g[p[i]][p[j]]``."""
    idx = p.index_array()
    return Adjacency6(g.array[np.ix_(idx, idx)])


def verify_hamiltonian(g: Adjacency6, c: Cycle6) -> bool:
    return all(g.has_edge(u, v) for u, v in c.edges())


def find_hamiltonian(g: Adjacency6) -> Optional[Cycle6]:
    for cycle in CANDIDATE_CYCLES:
        if verify_hamiltonian(g, cycle):
            return cycle
    return None


def apply_perm_to_cycle(c: Cycle6, p: Permutation6) -> Cycle6:
    """Relabel ``c`` so it is a cycle of ``conjugate(g, p)``."""
    inv = p.inverse()
    return Cycle6(tuple(inv[v] for v in c.vertices))


def format_matrix(g: Matrix6) -> str:
    return "\n".join(" ".join(row) for row in g.rows())
