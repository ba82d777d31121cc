"""Compiled grid kernels: supercover traversal, sensing, line-of-sight counts.

Cells are addressed as (row, col). Segments always join cell centres, so the
traversal is done in exact integer arithmetic on doubled coordinates, where
centres sit on odd integers and cell borders on even ones. When a segment
passes exactly through a cell corner both side cells are reported. Motion
checks then demand both side cells be free; sight lines only need one, so a
wall seen diagonally past a corner is still observed.
"""

import numpy as np
from numba import njit

FREE = np.int8(0)
OCCUPIED = np.int8(1)
UNKNOWN = np.int8(-1)


@njit(cache=True)
def supercover(r0, c0, r1, c1):
    """All cells whose closed square meets the centre-to-centre segment."""
    dr = r1 - r0
    dc = c1 - c0
    sr = 1 if dr > 0 else -1
    sc = 1 if dc > 0 else -1
    nr = abs(dr)
    nc = abs(dc)
    out = np.empty((2 * (nr + nc) + 1, 2), dtype=np.int64)
    k = 0
    r = r0
    c = c0
    out[k, 0] = r
    out[k, 1] = c
    k += 1
    ir = 0
    ic = 0
    while ir < nr or ic < nc:
        # next crossing parameters (2*i+1)/(2*n); compare by cross-multiplying
        lhs = (2 * ic + 1) * nr
        rhs = (2 * ir + 1) * nc
        if ic < nc and (ir >= nr or lhs < rhs):
            c += sc
            ic += 1
        elif ir < nr and (ic >= nc or rhs < lhs):
            r += sr
            ir += 1
        else:
            out[k, 0] = r
            out[k, 1] = c + sc
            k += 1
            out[k, 0] = r + sr
            out[k, 1] = c
            k += 1
            r += sr
            c += sc
            ir += 1
            ic += 1
        out[k, 0] = r
        out[k, 1] = c
        k += 1
    return out[:k]


@njit(cache=True)
def _clear(grid, r0, c0, r1, c1, skip_last, strict):
    # True when every traversed cell (optionally excluding the endpoint) is FREE;
    # at a corner crossing ``strict`` needs both side cells free, else either
    dr = r1 - r0
    dc = c1 - c0
    sr = 1 if dr > 0 else -1
    sc = 1 if dc > 0 else -1
    nr = abs(dr)
    nc = abs(dc)
    r = r0
    c = c0
    if grid[r, c] != 0:
        return False
    ir = 0
    ic = 0
    while ir < nr or ic < nc:
        lhs = (2 * ic + 1) * nr
        rhs = (2 * ir + 1) * nc
        if ic < nc and (ir >= nr or lhs < rhs):
            c += sc
            ic += 1
        elif ir < nr and (ic >= nc or rhs < lhs):
            r += sr
            ir += 1
        else:
            a = grid[r, c + sc] != 0
            b = grid[r + sr, c] != 0
            if (a or b) if strict else (a and b):
                return False
            r += sr
            c += sc
            ir += 1
            ic += 1
        if ir == nr and ic == nc:
            break
        if grid[r, c] != 0:
            return False
    if skip_last:
        return True
    return grid[r1, c1] == 0


@njit(cache=True)
def segment_clear(grid, r0, c0, r1, c1):
    """Every cell met by the segment, endpoints included, holds 0."""
    return _clear(grid, r0, c0, r1, c1, False, True)


@njit(cache=True)
def sight_clear(grid, r0, c0, r1, c1):
    """Sight line free up to the far endpoint; corners pass if one side is open."""
    return _clear(grid, r0, c0, r1, c1, True, False)


@njit(cache=True)
def _reveal(truth, belief, r, c):
    if belief[r, c] == -1:
        belief[r, c] = truth[r, c]
        return 1
    return 0


@njit(cache=True)
def cast_ray(truth, belief, r0, c0, r1, c1):
    """Walk from (r0, c0) toward (r1, c1), revealing cells up to the first wall.

    The wall that stops the beam is revealed too. At a corner crossing both
    side cells are revealed and the beam continues while either is free.
    """
    dr = r1 - r0
    dc = c1 - c0
    sr = 1 if dr > 0 else -1
    sc = 1 if dc > 0 else -1
    nr = abs(dr)
    nc = abs(dc)
    r = r0
    c = c0
    changed = _reveal(truth, belief, r, c)
    if truth[r, c] != 0:
        return changed
    ir = 0
    ic = 0
    while ir < nr or ic < nc:
        lhs = (2 * ic + 1) * nr
        rhs = (2 * ir + 1) * nc
        if ic < nc and (ir >= nr or lhs < rhs):
            c += sc
            ic += 1
        elif ir < nr and (ic >= nc or rhs < lhs):
            r += sr
            ir += 1
        else:
            changed += _reveal(truth, belief, r, c + sc)
            changed += _reveal(truth, belief, r + sr, c)
            if truth[r, c + sc] != 0 and truth[r + sr, c] != 0:
                return changed
            r += sr
            c += sc
            ir += 1
            ic += 1
        changed += _reveal(truth, belief, r, c)
        if truth[r, c] != 0:
            return changed
    return changed


@njit(cache=True)
def sense_into(truth, belief, r0, c0, radius):
    """Cast a beam toward every still-unknown cell within ``radius`` cells.

    Revealed cells copy the truth, so the belief never disagrees with it.
    Beams stop at the first wall, which is revealed; cells beyond the range
    are never touched. Returns how many cells changed from unknown.
    """
    h, w = truth.shape
    rad = int(np.floor(radius))
    r2 = radius * radius
    changed = 0
    for r in range(max(0, r0 - rad), min(h, r0 + rad + 1)):
        for c in range(max(0, c0 - rad), min(w, c0 + rad + 1)):
            if belief[r, c] != -1:
                continue
            d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0)
            if d2 > r2:
                continue
            changed += cast_ray(truth, belief, r0, c0, r, c)
    return changed


@njit(cache=True)
def visible_counts(belief, node_rc, targets_rc, radius):
    """Per node, the number of target cells in range with a clear belief sight line."""
    n = node_rc.shape[0]
    m = targets_rc.shape[0]
    out = np.zeros(n, dtype=np.int64)
    r2 = radius * radius
    for i in range(n):
        r0 = node_rc[i, 0]
        c0 = node_rc[i, 1]
        cnt = 0
        for j in range(m):
            r1 = targets_rc[j, 0]
            c1 = targets_rc[j, 1]
            d2 = (r1 - r0) * (r1 - r0) + (c1 - c0) * (c1 - c0)
            if d2 > r2:
                continue
            if sight_clear(belief, r0, c0, r1, c1):
                cnt += 1
        out[i] = cnt
    return out


@njit(cache=True)
def pairs_clear(belief, node_rc, pairs):
    """Vectorised ``segment_clear`` over node index pairs."""
    out = np.zeros(pairs.shape[0], dtype=np.bool_)
    for e in range(pairs.shape[0]):
        a = pairs[e, 0]
        b = pairs[e, 1]
        out[e] = segment_clear(belief, node_rc[a, 0], node_rc[a, 1], node_rc[b, 0], node_rc[b, 1])
    return out


@njit(cache=True)
def _root(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def capped_edges(n, pairs, picked, k):
    """Admit ``pairs`` (already ranked shortest first) under a degree cap of ``k``.

    A spanning pass joins components first; a second pass adds the pairs flagged
    in ``picked`` (the k-nearest proposals).
    """
    connected = np.zeros((n, n), dtype=np.bool_)
    degree = np.zeros(n, dtype=np.int64)
    parent = np.arange(n)
    for sweep in range(2):
        for e in range(pairs.shape[0]):
            i = pairs[e, 0]
            j = pairs[e, 1]
            if connected[i, j] or degree[i] >= k or degree[j] >= k:
                continue
            ri = _root(parent, i)
            rj = _root(parent, j)
            if sweep == 0 and ri == rj:
                continue
            if sweep == 1 and not picked[i, j]:
                continue
            connected[i, j] = True
            connected[j, i] = True
            degree[i] += 1
            degree[j] += 1
            parent[ri] = rj
    return connected


@njit(cache=True)
def lattice_nodes(free, res):
    """One node per ``res`` block holding free space: the block's lattice point, or
    the free cell nearest to it (row-major first on ties)."""
    h, w = free.shape
    off = res // 2
    out = np.empty((((h + res - 1) // res) * ((w + res - 1) // res), 2), dtype=np.int64)
    n = 0
    for r0 in range(0, h, res):
        for c0 in range(0, w, res):
            lr = r0 + off
            lc = c0 + off
            best = -1
            br = 0
            bc = 0
            for r in range(r0, min(r0 + res, h)):
                for c in range(c0, min(c0 + res, w)):
                    if free[r, c]:
                        d = (r - lr) ** 2 + (c - lc) ** 2
                        if best < 0 or d < best:
                            best = d
                            br = r
                            bc = c
            if best >= 0:
                out[n, 0] = br
                out[n, 1] = bc
                n += 1
    return out[:n]
