"""Monotonic many-to-many sentence alignment over embedding costs.

Two solvers share one recurrence.  ``exact_align`` runs the full dynamic program
and serves as the oracle; ``coarse_to_fine_align`` halves both sides by
averaging adjacent sentence vectors, aligns the coarsest level exhaustively with
1-1 blocks and skips only, and refines each finer level inside a band around
the up-scaled path.  Both solvers evaluate candidate blocks in the same order
with a strict ``<`` so ties resolve identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from segale.embeddings import EmbeddingMatrix

EXACT_CELL_LIMIT = 10**6
# Dense cost tables above this many float64 entries are evaluated on the fly instead.
DENSE_TABLE_LIMIT = 16 * 10**6
NORMALIZER_FLOOR = 1e-6
# Dissimilarities below this are rounding noise on identical unit vectors.
_SNAP = 1e-12


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignParams:
    max_overlap: int = 16
    beta_skip: float = 0.2
    random_samples: int = 128
    rng_seed: int = 0
    band_width: int = 10
    coarse_min_len: int = 64

    def __post_init__(self):
        if self.max_overlap < 2:
            raise ValueError("max_overlap must be >= 2")
        if self.band_width < 1:
            raise ValueError("band_width must be >= 1")
        if not 0 < self.beta_skip < 1:
            raise ValueError("beta_skip must be in (0, 1)")
        if self.random_samples < 1:
            raise ValueError("random_samples must be >= 1")
        if self.coarse_min_len < 1:
            raise ValueError("coarse_min_len must be >= 1")

    def with_beta(self, beta: float) -> AlignParams:
        return replace(self, beta_skip=beta)


@dataclass(frozen=True)
class AlignmentBlock:
    src: tuple[int, int]
    tgt: tuple[int, int]
    cost: float

    def __post_init__(self):
        if self.src[1] < self.src[0] or self.tgt[1] < self.tgt[0]:
            raise AlignmentError(f"malformed span in block {self}")
        if self.src_len == 0 and self.tgt_len == 0:
            raise AlignmentError("block with both spans empty")
        if not self.cost >= 0:
            raise AlignmentError(f"block cost must be >= 0, got {self.cost}")

    @property
    def src_len(self) -> int:
        return self.src[1] - self.src[0]

    @property
    def tgt_len(self) -> int:
        return self.tgt[1] - self.tgt[0]

    @property
    def is_null(self) -> bool:
        return self.src_len == 0 or self.tgt_len == 0

    def to_json(self) -> dict:
        return {"src": list(self.src), "tgt": list(self.tgt), "cost": self.cost}

    @classmethod
    def from_json(cls, obj) -> AlignmentBlock:
        return cls(tuple(obj["src"]), tuple(obj["tgt"]), float(obj["cost"]))


@dataclass(frozen=True)
class AlignmentPath:
    blocks: tuple[AlignmentBlock, ...]
    src_len: int
    tgt_len: int
    skip_cost: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self, max_overlap: int | None = None) -> None:
        i = j = 0
        for b in self.blocks:
            if b.src[0] != i or b.tgt[0] != j:
                raise AlignmentError(f"block {b} does not continue the path at ({i}, {j})")
            if max_overlap is not None and not b.is_null and b.src_len + b.tgt_len > max_overlap:
                raise AlignmentError(f"block {b} exceeds max_overlap {max_overlap}")
            if b.is_null and b.src_len + b.tgt_len != 1:
                raise AlignmentError(f"null block {b} must cover exactly one sentence")
            i, j = b.src[1], b.tgt[1]
        if (i, j) != (self.src_len, self.tgt_len):
            raise AlignmentError(f"path ends at ({i}, {j}), expected ({self.src_len}, {self.tgt_len})")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def total_cost(self) -> float:
        return math.fsum(b.cost for b in self.blocks)

    def shape_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for b in self.blocks:
            key = (b.src_len, b.tgt_len)
            counts[key] = counts.get(key, 0) + 1
        return counts


def block_cost(src_vec, tgt_vec, src_len: int, tgt_len: int, normalizer: float) -> float:
    """``(1 - cos) * src_len * tgt_len / normalizer``, clamped at 0."""
    if not normalizer > 0 or not math.isfinite(normalizer):
        raise ValueError("normalizer must be positive and finite")
    if src_len < 1 or tgt_len < 1:
        raise ValueError("block lengths must be >= 1")
    dot = float(np.dot(np.asarray(src_vec, dtype=np.float64), np.asarray(tgt_vec, dtype=np.float64)))
    if not math.isfinite(dot):
        raise ValueError("non-finite embedding")
    dis = 1.0 - dot
    if dis < _SNAP:
        dis = 0.0
    return dis * src_len * tgt_len / normalizer


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _sentence_rows(matrix: EmbeddingMatrix) -> np.ndarray:
    if matrix.keys is None:
        return _unit_rows(matrix.vectors.astype(np.float64))
    return matrix.tensor(1)[0]


def cost_normalizer(src_matrix: EmbeddingMatrix, tgt_matrix: EmbeddingMatrix, params: AlignParams) -> float:
    """Mean dissimilarity of randomly paired single sentences, floored at 1e-6."""
    return _normalizer(_sentence_rows(src_matrix), _sentence_rows(tgt_matrix), params)


def _normalizer(src_rows: np.ndarray, tgt_rows: np.ndarray, params: AlignParams) -> float:
    if len(src_rows) == 0 or len(tgt_rows) == 0:
        raise AlignmentError("cannot normalize costs for an empty side")
    rng = np.random.default_rng(params.rng_seed)
    si = rng.integers(0, len(src_rows), size=params.random_samples)
    ti = rng.integers(0, len(tgt_rows), size=params.random_samples)
    dots = np.einsum("ij,ij->i", src_rows[si], tgt_rows[ti])
    dis = 1.0 - dots
    dis[dis < _SNAP] = 0.0
    return max(float(np.mean(dis)), NORMALIZER_FLOOR)


def skip_cost(one_to_one_costs, beta_skip: float) -> float:
    """The ``beta_skip`` quantile (linear interpolation) of the 1-1 candidate costs."""
    costs = np.asarray(one_to_one_costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("skip cost needs at least one 1-1 candidate cost")
    if not 0 < beta_skip < 1:
        raise ValueError("beta_skip must be in (0, 1)")
    return float(np.quantile(costs, beta_skip))


def block_types(max_overlap: int, one_to_one_only: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Candidate (src_len, tgt_len) shapes in tie-break order.

    Aligned blocks beat skips at equal cost; among aligned blocks smaller ones win, then longer source.
    """
    shapes = [(1, 0), (0, 1)]
    if one_to_one_only:
        shapes.append((1, 1))
    else:
        shapes += [(n, m) for n in range(1, max_overlap) for m in range(1, max_overlap) if n + m <= max_overlap]
    shapes.sort(key=lambda s: (s[0] == 0 or s[1] == 0, s[0] + s[1], -s[0]))
    return np.array([s[0] for s in shapes], dtype=np.int64), np.array([s[1] for s in shapes], dtype=np.int64)


@njit(cache=True, nogil=True)
def _dp_dense(C, tn, tm, skip, N, M):
    inf = np.inf
    D = np.full((N + 1, M + 1), inf)
    B = np.full((N + 1, M + 1), -1, dtype=np.int16)
    D[0, 0] = 0.0
    ntypes = tn.shape[0]
    for i in range(N + 1):
        for j in range(M + 1):
            if i == 0 and j == 0:
                continue
            best = inf
            bt = -1
            for t in range(ntypes):
                n = tn[t]
                m = tm[t]
                if n > i or m > j:
                    continue
                prev = D[i - n, j - m]
                if prev == inf:
                    continue
                if n == 0 or m == 0:
                    c = prev + skip
                else:
                    c = prev + C[t, i, j]
                if c < best:
                    best = c
                    bt = t
            D[i, j] = best
            B[i, j] = bt
    return D, B


@njit(cache=True, nogil=True)
def _dp_band(S, T, tn, tm, lo, hi, offs, skip, normalizer, N, M):
    inf = np.inf
    size = offs[N] + hi[N] - lo[N] + 1
    D = np.full(size, inf)
    B = np.full(size, -1, dtype=np.int16)
    D[0] = 0.0
    ntypes = tn.shape[0]
    dim = S.shape[2]
    for i in range(N + 1):
        for j in range(lo[i], hi[i] + 1):
            if i == 0 and j == 0:
                continue
            best = inf
            bt = -1
            for t in range(ntypes):
                n = tn[t]
                m = tm[t]
                pi = i - n
                pj = j - m
                if pi < 0 or pj < 0 or pj < lo[pi] or pj > hi[pi]:
                    continue
                prev = D[offs[pi] + pj - lo[pi]]
                if prev == inf:
                    continue
                if n == 0 or m == 0:
                    c = prev + skip
                else:
                    dot = 0.0
                    for k in range(dim):
                        dot += S[n - 1, pi, k] * T[m - 1, pj, k]
                    dis = 1.0 - dot
                    if dis < 1e-12:
                        dis = 0.0
                    c = prev + dis * n * m / normalizer
                if c < best:
                    best = c
                    bt = t
            idx = offs[i] + j - lo[i]
            D[idx] = best
            B[idx] = bt
    return D, B


@njit(cache=True, nogil=True)
def _band_one_to_one(S0, T0, lo, hi, normalizer, N):
    count = 0
    for i in range(1, N + 1):
        a = max(lo[i], 1)
        if hi[i] >= a:
            count += hi[i] - a + 1
    out = np.empty(count)
    dim = S0.shape[1]
    p = 0
    for i in range(1, N + 1):
        for j in range(max(lo[i], 1), hi[i] + 1):
            dot = 0.0
            for k in range(dim):
                dot += S0[i - 1, k] * T0[j - 1, k]
            dis = 1.0 - dot
            if dis < 1e-12:
                dis = 0.0
            out[p] = dis / normalizer
            p += 1
    return out


def _backtrack(B_at, tn, tm, N, M) -> list[tuple[int, int]]:
    shapes = []
    i, j = N, M
    while i or j:
        t = B_at(i, j)
        if t < 0:
            raise AlignmentError("no feasible alignment path within the search band")
        n, m = int(tn[t]), int(tm[t])
        shapes.append((n, m))
        i -= n
        j -= m
    shapes.reverse()
    return shapes


def _band_offsets(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    widths = hi - lo + 1
    offs = np.zeros(len(lo), dtype=np.int64)
    offs[1:] = np.cumsum(widths[:-1])
    return offs


def _full_band(N: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros(N + 1, dtype=np.int64), np.full(N + 1, M, dtype=np.int64)


def _run_band(S, T, tn, tm, lo, hi, skip, normalizer, N, M) -> list[tuple[int, int]]:
    offs = _band_offsets(lo, hi)
    _, B = _dp_band(S, T, tn, tm, lo, hi, offs, skip, normalizer, N, M)
    return _backtrack(lambda i, j: B[offs[i] + j - lo[i]] if lo[i] <= j <= hi[i] else -1, tn, tm, N, M)


def _pool_pairs(x: np.ndarray) -> np.ndarray:
    pooled = x[0::2].copy()
    pooled[: x.shape[0] // 2] += x[1::2]
    return _unit_rows(pooled)


def _shapes_to_nodes(shapes) -> list[tuple[int, int]]:
    nodes = [(0, 0)]
    i = j = 0
    for n, m in shapes:
        i += n
        j += m
        nodes.append((i, j))
    return nodes


def _band_around(nodes, N: int, M: int, scale: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of lattice columns within Chebyshev distance ``width`` of the up-scaled path rectangles."""
    a = np.full(N + 1, M + 1, dtype=np.int64)
    b = np.full(N + 1, -1, dtype=np.int64)
    up = [(min(x * scale, N), min(y * scale, M)) for x, y in nodes]
    for (x0, y0), (x1, y1) in zip(up, up[1:]):
        a[x0:x1 + 1] = np.minimum(a[x0:x1 + 1], y0)
        b[x0:x1 + 1] = np.maximum(b[x0:x1 + 1], y1)
    if len(up) == 1:
        a[0], b[0] = 0, 0
    lo = np.empty(N + 1, dtype=np.int64)
    hi = np.empty(N + 1, dtype=np.int64)
    for i in range(N + 1):
        r0, r1 = max(0, i - width), min(N, i + width)
        lo[i] = max(0, int(a[r0:r1 + 1].min()) - width)
        hi[i] = min(M, int(b[r0:r1 + 1].max()) + width)
    return lo, hi


class _AlignContext:
    """Per-document state shared across skip-cost settings: tensors, normalizer and cached costs."""

    def __init__(self, src_matrix: EmbeddingMatrix, tgt_matrix: EmbeddingMatrix, params: AlignParams):
        k_side = params.max_overlap - 1
        self.params = params
        self.S = self._tensor(src_matrix, k_side)
        self.T = self._tensor(tgt_matrix, k_side)
        self.N = self.S.shape[1]
        self.M = self.T.shape[1]
        if self.N == 0 or self.M == 0:
            raise AlignmentError("cannot align an empty side")
        self.normalizer = _normalizer(self.S[0], self.T[0], params)
        self.tn, self.tm = block_types(params.max_overlap)
        self.tn1, self.tm1 = block_types(params.max_overlap, one_to_one_only=True)
        self._dense: np.ndarray | None = None
        self._dense_one_to_one: np.ndarray | None = None

    @staticmethod
    def _tensor(matrix: EmbeddingMatrix, k_side: int) -> np.ndarray:
        if matrix.keys is None:
            raise AlignmentError("alignment needs a keyed EmbeddingMatrix")
        have = matrix.k_side()
        n = matrix.n_sentences()
        need = min(k_side, n)
        if have < need:
            raise AlignmentError(f"matrix holds blocks up to length {have}, alignment needs {need}")
        t = matrix.tensor(have)[:k_side]
        if t.shape[0] < k_side:
            t = np.concatenate([t, np.zeros((k_side - t.shape[0],) + t.shape[1:])])
        return np.ascontiguousarray(t)

    def dense_costs(self) -> np.ndarray:
        if self._dense is None:
            N, M = self.N, self.M
            C = np.full((len(self.tn), N + 1, M + 1), np.inf)
            for t, (n, m) in enumerate(zip(self.tn, self.tm)):
                if n == 0 or m == 0 or n > N or m > M:
                    continue
                dots = self.S[n - 1, : N - n + 1] @ self.T[m - 1, : M - m + 1].T
                dis = 1.0 - dots
                dis[dis < _SNAP] = 0.0
                C[t, n:, m:] = dis * (n * m / self.normalizer)
            self._dense = C
            t11 = int(np.flatnonzero((self.tn == 1) & (self.tm == 1))[0])
            self._dense_one_to_one = C[t11, 1:, 1:].ravel()
        return self._dense

    def exact(self, beta: float) -> AlignmentPath:
        N, M = self.N, self.M
        if N * M > EXACT_CELL_LIMIT:
            raise AlignmentError(
                f"exact alignment of {N}x{M} exceeds the {EXACT_CELL_LIMIT} cell guard; use coarse_to_fine_align"
            )
        if len(self.tn) * (N + 1) * (M + 1) <= DENSE_TABLE_LIMIT:
            C = self.dense_costs()
            skip = skip_cost(self._dense_one_to_one, beta)
            _, B = _dp_dense(C, self.tn, self.tm, skip, N, M)
            shapes = _backtrack(lambda i, j: B[i, j], self.tn, self.tm, N, M)
        else:
            lo, hi = _full_band(N, M)
            skip = skip_cost(_band_one_to_one(self.S[0], self.T[0], lo, hi, self.normalizer, N), beta)
            shapes = _run_band(self.S, self.T, self.tn, self.tm, lo, hi, skip, self.normalizer, N, M)
        return self.materialize(shapes, skip)

    def coarse_to_fine(self, beta: float) -> AlignmentPath:
        p = self.params
        N, M = self.N, self.M
        if N <= p.coarse_min_len and M <= p.coarse_min_len:
            return self.exact(beta)
        levels = [(self.S[0], self.T[0])]
        while min(levels[-1][0].shape[0], levels[-1][1].shape[0]) > p.coarse_min_len:
            s, t = levels[-1]
            levels.append((_pool_pairs(s), _pool_pairs(t)))

        top_s, top_t = levels[-1]
        n_top, m_top = top_s.shape[0], top_t.shape[0]
        lo, hi = _full_band(n_top, m_top)
        skip = skip_cost(_band_one_to_one(top_s, top_t, lo, hi, self.normalizer, n_top), beta)
        shapes = _run_band(top_s[None], top_t[None], self.tn1, self.tm1, lo, hi, skip, self.normalizer, n_top, m_top)
        nodes = _shapes_to_nodes(shapes)
        # With no halving the 1-1 pass at full resolution seeds the band for the full-inventory pass.
        if len(levels) == 1:
            refine, scale = [0], 1
        else:
            refine, scale = range(len(levels) - 2, -1, -1), 2

        for level in refine:
            s, t = levels[level]
            n, m = s.shape[0], t.shape[0]
            lo, hi = _band_around(nodes, n, m, scale, p.band_width)
            skip = skip_cost(_band_one_to_one(s, t, lo, hi, self.normalizer, n), beta)
            if level == 0:
                shapes = _run_band(self.S, self.T, self.tn, self.tm, lo, hi, skip, self.normalizer, n, m)
            else:
                shapes = _run_band(s[None], t[None], self.tn1, self.tm1, lo, hi, skip, self.normalizer, n, m)
            nodes = _shapes_to_nodes(shapes)
        return self.materialize(shapes, skip)

    def materialize(self, shapes, skip: float) -> AlignmentPath:
        blocks = []
        i = j = 0
        for n, m in shapes:
            if n == 0 or m == 0:
                cost = skip
            else:
                cost = block_cost(self.S[n - 1, i], self.T[m - 1, j], n, m, self.normalizer)
            blocks.append(AlignmentBlock((i, i + n), (j, j + m), cost))
            i += n
            j += m
        return AlignmentPath(tuple(blocks), self.N, self.M, skip)


def exact_align(src_matrix: EmbeddingMatrix, tgt_matrix: EmbeddingMatrix, params: AlignParams) -> AlignmentPath:
    """Globally minimal alignment path by exhaustive dynamic programming (guard: N*M <= 1e6)."""
    return _AlignContext(src_matrix, tgt_matrix, params).exact(params.beta_skip)


def coarse_to_fine_align(src_matrix: EmbeddingMatrix, tgt_matrix: EmbeddingMatrix, params: AlignParams) -> AlignmentPath:
    """Banded multi-resolution approximation of ``exact_align``; identical to it when both sides are short."""
    return _AlignContext(src_matrix, tgt_matrix, params).coarse_to_fine(params.beta_skip)


def path_stats(path: AlignmentPath) -> tuple[float, float]:
    """(mean cost over non-null blocks or 0, fraction of null blocks)."""
    if not path.blocks:
        raise AlignmentError("empty path")
    costs = [b.cost for b in path.blocks if not b.is_null]
    nulls = len(path.blocks) - len(costs)
    avg = math.fsum(costs) / len(costs) if costs else 0.0
    return avg, nulls / len(path.blocks)
