"""Inner loops with a numba path and a pure-numpy path.

Every kernel ``foo`` comes in three names:

* ``foo_numpy``  -- vectorized numpy, always available
* ``foo_numba``  -- the loop version compiled with numba, or ``None``
* ``foo``        -- whichever one is active (numba unless disabled)

Both paths are bit-identical on the same input; ``tests/test_kernels.py``
checks that and ``benchmarks/bench_kernels.py`` times them.
"""

import numpy as np

from diarkit._accel import HAVE_NUMBA, jit_or_none

LINKAGE_CODES = {"average": 0, "complete": 1, "single": 2}


# ----------------------------------------------------------------------------
# hysteresis thresholding


def _hysteresis_loop(scores, onset, offset):
    out = np.zeros(scores.shape[0], dtype=np.bool_)
    active = False
    for i in range(scores.shape[0]):
        s = scores[i]
        if active:
            if s < offset:
                active = False
        elif s >= onset:
            active = True
        out[i] = active
    return out


def hysteresis_numpy(scores, onset, offset):
    """Per-frame on/off state of a two-threshold detector starting off.

    A frame switches the detector on when its score is ``>= onset`` and off
    when it is ``< offset``; scores in between keep the previous state.
    Requires ``onset >= offset``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    # state events; -1 means "keep previous", slot 0 is the initial off state
    event = np.full(n + 1, -1, dtype=np.int8)
    event[0] = 0
    body = event[1:]
    body[scores >= onset] = 1
    body[scores < offset] = 0
    last = np.where(event >= 0, np.arange(n + 1), 0)
    np.maximum.accumulate(last, out=last)
    return event[last][1:].astype(bool)


hysteresis_numba = jit_or_none(_hysteresis_loop)


# ----------------------------------------------------------------------------
# agglomerative clustering on a similarity matrix


def _resolve_roots(parent):
    n = parent.shape[0]
    roots = np.empty(n, dtype=np.int64)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        roots[i] = r
    return roots


def _row_best(S, active, i, n):
    best = -np.inf
    arg = -1
    for j in range(i + 1, n):
        if active[j] and S[i, j] > best:
            best = S[i, j]
            arg = j
    return best, arg


def _ahc_loop(sim, stop_thr, linkage):
    # each active row caches its best partner to the right; the global pick
    # is the first row holding the maximum, i.e. the lowest (i, j) on ties
    n = sim.shape[0]
    S = sim.copy()
    size = np.ones(n, dtype=np.float64)
    active = np.ones(n, dtype=np.bool_)
    parent = np.arange(n)
    rbest = np.full(n, -np.inf)
    rarg = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        rbest[i], rarg[i] = _row_best(S, active, i, n)
    for _ in range(n - 1):
        best = -np.inf
        bi = -1
        for i in range(n):
            if active[i] and rarg[i] >= 0 and rbest[i] > best:
                best = rbest[i]
                bi = i
        if bi < 0 or best < stop_thr:
            break
        bj = rarg[bi]
        for k in range(n):
            if not active[k] or k == bi or k == bj:
                continue
            if linkage == 0:
                v = (size[bi] * S[bi, k] + size[bj] * S[bj, k]) / (size[bi] + size[bj])
            elif linkage == 1:
                v = min(S[bi, k], S[bj, k])
            else:
                v = max(S[bi, k], S[bj, k])
            S[bi, k] = v
            S[k, bi] = v
        size[bi] += size[bj]
        active[bj] = False
        parent[bj] = bi
        rbest[bi], rarg[bi] = _row_best(S, active, bi, n)
        for k in range(bj):
            if not active[k] or k == bi:
                continue
            if rarg[k] == bi or rarg[k] == bj:
                rbest[k], rarg[k] = _row_best(S, active, k, n)
            elif k < bi and (S[k, bi] > rbest[k] or (S[k, bi] == rbest[k] and bi < rarg[k])):
                rbest[k] = S[k, bi]
                rarg[k] = bi
    return parent


def _ahc_parent_numpy(sim, stop_thr, linkage):
    n = sim.shape[0]
    M = np.array(sim, dtype=np.float64, copy=True)
    np.fill_diagonal(M, -np.inf)
    size = np.ones(n, dtype=np.float64)
    parent = np.arange(n)
    for _ in range(n - 1):
        # row-major argmax of a symmetric matrix = lowest (i, j) with i < j
        flat = int(np.argmax(M))
        bi, bj = divmod(flat, n)
        best = M[bi, bj]
        if not np.isfinite(best) or best < stop_thr:
            break
        if linkage == 0:
            row = (size[bi] * M[bi] + size[bj] * M[bj]) / (size[bi] + size[bj])
        elif linkage == 1:
            row = np.minimum(M[bi], M[bj])
        else:
            row = np.maximum(M[bi], M[bj])
        M[bi, :] = row
        M[:, bi] = row
        M[bi, bi] = -np.inf
        M[bj, :] = -np.inf
        M[:, bj] = -np.inf
        size[bi] += size[bj]
        parent[bj] = bi
    return parent


def ahc_numpy(sim, stop_thr, linkage):
    """Cluster roots per item; each root is the lowest member index."""
    return _resolve_roots(_ahc_parent_numpy(sim, stop_thr, linkage))


_row_best_numba = jit_or_none(_row_best)
if HAVE_NUMBA:
    # the compiled loop must call the compiled helper
    _row_best = _row_best_numba
_ahc_loop_numba = jit_or_none(_ahc_loop)
_resolve_roots_numba = jit_or_none(_resolve_roots)

if HAVE_NUMBA:

    def ahc_numba(sim, stop_thr, linkage):
        sim = np.ascontiguousarray(sim, dtype=np.float64)
        return _resolve_roots_numba(_ahc_loop_numba(sim, float(stop_thr), int(linkage)))

else:
    ahc_numba = None


# ----------------------------------------------------------------------------
# chunk stitching: accumulate score blocks onto a frame grid


def _accumulate_loop(sums, counts, frame_starts, col_offsets, widths, blocks):
    n_spk = sums.shape[0]
    for c in range(frame_starts.shape[0]):
        f0 = frame_starts[c]
        o = col_offsets[c]
        for t in range(widths[c]):
            for s in range(n_spk):
                sums[s, f0 + t] += blocks[s, o + t]
            counts[f0 + t] += 1


def accumulate_numpy(sums, counts, frame_starts, col_offsets, widths, blocks):
    """Add each block into ``sums`` at its frame offset; count coverage.

    ``blocks`` is every chunk's ``[n_speakers, width]`` block concatenated
    along axis 1; chunk ``c`` occupies columns ``col_offsets[c]`` onwards.
    Works in place.
    """
    for f0, o, w in zip(frame_starts, col_offsets, widths):
        sums[:, f0:f0 + w] += blocks[:, o:o + w]
        counts[f0:f0 + w] += 1


accumulate_numba = jit_or_none(_accumulate_loop)


hysteresis = hysteresis_numba if HAVE_NUMBA else hysteresis_numpy
ahc = ahc_numba if HAVE_NUMBA else ahc_numpy
accumulate = accumulate_numba if HAVE_NUMBA else accumulate_numpy
