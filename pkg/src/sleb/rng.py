"""Deterministic per-replica random streams.

Every replica owns an independent Philox-keyed generator derived from
(base_seed, replica_index), so results never depend on scheduling, batching,
or worker count.  Consumption within a replica is block-granular: per epoch
one gamma block then one normal block, each sized to the epoch length, drawn
whether or not the replica finishes mid-epoch.
"""

from __future__ import annotations

import numpy as np

# Replicas are dispatched to workers in fixed chunks of this many; the chunk
# is also the batch width of the vectorized kernels.
CHUNK = 1024


def replica_generator(base_seed: int, replica_index: int) -> np.random.Generator:
    """Independent stream for one replica, stable across runs and workers."""
    key = np.array([np.uint64(base_seed), np.uint64(replica_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def chunk_generators(base_seed: int, chunk_index: int, size: int) -> list[np.random.Generator]:
    start = chunk_index * CHUNK
    return [replica_generator(base_seed, start + i) for i in range(size)]


def draw_epoch_blocks(
    gens: list[np.random.Generator],
    alive: np.ndarray,
    gamma_shape: float,
    length: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica (gamma, normal) blocks for one epoch.

    ``alive`` holds in-chunk replica slots in ascending order; row i of the
    outputs belongs to alive[i].  Each replica draws its gamma block first,
    then its normal block, regardless of what the rest of the batch does.
    """
    n = len(alive)
    gam = np.empty((n, length), dtype=np.float64)
    nor = np.empty((n, length), dtype=np.float64)
    for i, slot in enumerate(alive):
        g = gens[int(slot)]
        gam[i, :] = g.standard_gamma(gamma_shape, size=length)
        nor[i, :] = g.standard_normal(size=length)
    return gam, nor


def draw_normal_blocks(
    gens: list[np.random.Generator],
    alive: np.ndarray,
    length: int,
) -> np.ndarray:
    """Normal-only blocks (two-force Euler driving)."""
    n = len(alive)
    nor = np.empty((n, length), dtype=np.float64)
    for i, slot in enumerate(alive):
        nor[i, :] = gens[int(slot)].standard_normal(size=length)
    return nor


# ---------------------------------------------------------------------------
# Side streams for the excursion walk.
#
# When a tracked point pinches against the driving pair, the kernel leaves the
# grid and runs a local walk whose step count is data dependent, so its draws
# cannot come out of the replica's block-granular stream without destroying
# scheduling invariance.  Each walk window instead owns a counter-based Philox
# stream keyed by (seed, replica, point, grid step): any worker can replay it
# from scratch, and consumption elsewhere is untouched.  The compiled backend
# re-implements exactly this generator; tests pin them word-for-word.

_M0 = 0xD2E7470EE14C6C93
_M1 = 0xCA5A826395121157
_W0 = 0x9E3779B97F4A7C15
_W1 = 0xBB67AE8584CAA73B
_MASK = 0xFFFFFFFFFFFFFFFF
_TWO_PI = 6.283185307179586

# Bit budget of the window key: replica index above, point and step below.
# The top point slot is reserved for the driving kernel's dip-refinement
# stream, so tasks may track at most MAX_POINTS - 1 points.
PT_BITS = 12
STEP_BITS = 20
MAX_POINTS = 1 << PT_BITS
MAX_STEPS = 1 << STEP_BITS
DRIVER_PT = MAX_POINTS - 1


def excursion_key(base_seed: int, replica: int, pt: int, step: int) -> tuple[int, int]:
    """Philox key of one walk window, unique per (replica, point, grid step)."""
    k0 = (base_seed ^ _W0) & _MASK
    k1 = ((replica & 0xFFFFFFFF) << 32) | ((pt & (MAX_POINTS - 1)) << STEP_BITS) | (
        step & (MAX_STEPS - 1)
    )
    return k0, k1


def _philox4(c0: int, c1: int, c2: int, c3: int, k0: int, k1: int) -> tuple[int, int, int, int]:
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = (p0 >> 64) & _MASK, p0 & _MASK
        hi1, lo1 = (p1 >> 64) & _MASK, p1 & _MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


class ExcursionStream:
    """Scalar counter-based stream: uniforms in (0, 1], cached Box-Muller
    normals, and Marsaglia-Tsang gammas (small shapes boosted through
    shape + 1).  The compiled walk must consume draws in this exact order."""

    __slots__ = ("k0", "k1", "blk", "idx", "words", "pending")

    def __init__(self, k0: int, k1: int) -> None:
        self.k0 = k0
        self.k1 = k1
        self.blk = 0
        self.idx = 4
        self.words: tuple[int, int, int, int] = (0, 0, 0, 0)
        self.pending: float | None = None

    def uniform(self) -> float:
        if self.idx == 4:
            self.words = _philox4(self.blk, 0, 0, 0, self.k0, self.k1)
            self.blk += 1
            self.idx = 0
        raw = self.words[self.idx]
        self.idx += 1
        return ((raw >> 11) + 1) * 1.1102230246251565e-16

    def normal(self) -> float:
        import math

        if self.pending is not None:
            out = self.pending
            self.pending = None
            return out
        r = math.sqrt(-2.0 * math.log(self.uniform()))
        th = _TWO_PI * self.uniform()
        self.pending = r * math.sin(th)
        return r * math.cos(th)

    def gamma(self, shape: float) -> float:
        import math

        boost = 1.0
        a = shape
        if a < 1.0:
            boost = math.pow(self.uniform(), 1.0 / a)
            a = a + 1.0
        d = a - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            t = 1.0 + c * x
            if t <= 0.0:
                continue
            v = t * t * t
            u = self.uniform()
            x2 = x * x
            if u < 1.0 - 0.0331 * x2 * x2:
                return boost * d * v
            if math.log(u) < 0.5 * x2 + d * (1.0 - v + math.log(v)):
                return boost * d * v
