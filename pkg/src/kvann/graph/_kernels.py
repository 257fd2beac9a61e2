"""Compiled inner loops shared by the graph algorithms."""

from __future__ import annotations

import numba
import numpy as np

PRINTED_RULE = 0
RNG_RULE = 1

METRIC_CODES = {"euclidean": 0, "inner_product": 1, "cosine": 2}


@numba.njit(cache=True, nogil=True)
def pq_lookup_multi(tables, offsets, codes, slots):
    """Asymmetric distances for codes that may come from different schema versions."""
    n, m = codes.shape
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        t = slots[i]
        acc = np.float32(offsets[t])
        for j in range(m):
            acc += tables[t, j, codes[i, j]]
        out[i] = acc
    return out


@numba.njit(cache=True, nogil=True)
def scaled_key(d, beta, metric):
    """Navigation key of a filter-matching vertex: its distance scaled down by beta.

    The scaling applies to the internal distance value (squared for euclidean).
    """
    if metric == 1 and d < 0:
        return np.float32(d / beta)
    return np.float32(d * beta)


@numba.njit(cache=True, nogil=True)
def scale_keys(dists, matched, beta, metric):
    out = dists.copy()
    for i in range(dists.shape[0]):
        if matched[i]:
            out[i] = scaled_key(dists[i], beta, metric)
    return out


@numba.njit(cache=True, nogil=True)
def _l2(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        t = a[i] - b[i]
        acc += t * t
    return np.sqrt(acc)


@numba.njit(cache=True, nogil=True)
def prune_kernel(p_vec, cand_vecs, alpha, R, rule):
    """Robust prune over candidates already sorted by ascending id.

    Returns positions into ``cand_vecs`` of the kept neighbors, ordered by
    distance to ``p_vec``.
    """
    n = cand_vecs.shape[0]
    dp = np.empty(n, dtype=np.float64)
    for i in range(n):
        dp[i] = _l2(cand_vecs[i], p_vec)
    order = np.argsort(dp, kind="mergesort")
    kept = np.empty(min(n, R), dtype=np.int64)
    nk = 0
    for oi in range(n):
        q = order[oi]
        add = True
        for ri in range(nk):
            r = kept[ri]
            dqr = _l2(cand_vecs[q], cand_vecs[r])
            if rule == 0:
                if alpha * dp[r] < dqr:
                    add = False
                    break
            else:
                if alpha * dqr <= dp[q]:
                    add = False
                    break
        if add:
            kept[nk] = q
            nk += 1
        if nk == R:
            break
    return kept[:nk]


@numba.njit(cache=True, nogil=True)
def _before(k1, id1, k2, id2):
    return k1 < k2 or (k1 == k2 and id1 < id2)


@numba.njit(cache=True, nogil=True)
def traverse(adj, deg, codes, versions, lut, alive, row_ids, tables, offsets,
             seed_rows, seed_keys, seed_dists, seed_exp, L, match, beta, metric,
             stamps, stamp):
    """Greedy search over dense buffers; mirrors the provider-based search.

    The best list starts from the seed arrays, which must be sorted by
    (key, id), hold at most L entries and already be marked visited. ``match``
    is empty for an unfiltered search, otherwise a per-row flag for
    filter-matching vertices whose keys are scaled by ``beta``. ``stamps`` is
    the visited marker: rows equal to ``stamp`` are visited. ``lut`` maps a
    schema version byte to its slot in ``tables``.

    Returns the best list (rows, keys, distances, expanded flags), the rows
    expanded in order, every newly visited live row with its key and
    distance, and the number of quantized reads issued (one per out-list
    entry of every expanded vertex).
    """
    cap = L + 1
    b_key = np.empty(cap, dtype=np.float32)
    b_dist = np.empty(cap, dtype=np.float32)
    b_row = np.empty(cap, dtype=np.int64)
    b_exp = np.zeros(cap, dtype=np.bool_)
    size = seed_rows.shape[0]
    for i in range(size):
        b_key[i] = seed_keys[i]
        b_dist[i] = seed_dists[i]
        b_row[i] = seed_rows[i]
        b_exp[i] = seed_exp[i]
    expanded = np.empty(16, dtype=np.int64)
    n_exp = 0
    v_row = np.empty(64, dtype=np.int64)
    v_key = np.empty(64, dtype=np.float32)
    v_dist = np.empty(64, dtype=np.float32)
    n_vis = 0
    filtered = match.shape[0] > 0
    m = codes.shape[1]
    reads = 0

    while True:
        pos = -1
        for i in range(size):
            if not b_exp[i]:
                pos = i
                break
        if pos < 0:
            break
        b_exp[pos] = True
        p = b_row[pos]
        if n_exp == expanded.shape[0]:
            grown = np.empty(2 * n_exp, dtype=np.int64)
            grown[:n_exp] = expanded
            expanded = grown
        expanded[n_exp] = p
        n_exp += 1
        reads += deg[p]
        for j in range(deg[p]):
            nb = adj[p, j]
            if stamps[nb] == stamp:
                continue
            stamps[nb] = stamp
            if not alive[nb]:
                continue
            t = lut[versions[nb]]
            d = np.float32(offsets[t])
            for c in range(m):
                d += tables[t, c, codes[nb, c]]
            key = scaled_key(d, beta, metric) if filtered and match[nb] else d
            if n_vis == v_row.shape[0]:
                g1 = np.empty(2 * n_vis, dtype=np.int64)
                g2 = np.empty(2 * n_vis, dtype=np.float32)
                g3 = np.empty(2 * n_vis, dtype=np.float32)
                g1[:n_vis] = v_row
                g2[:n_vis] = v_key
                g3[:n_vis] = v_dist
                v_row, v_key, v_dist = g1, g2, g3
            v_row[n_vis] = nb
            v_key[n_vis] = key
            v_dist[n_vis] = d
            n_vis += 1
            nid = row_ids[nb]
            if size == L and not _before(key, nid, b_key[size - 1], row_ids[b_row[size - 1]]):
                continue
            # insertion point keeping (key, id) order
            ins = size
            while ins > 0 and _before(key, nid, b_key[ins - 1], row_ids[b_row[ins - 1]]):
                ins -= 1
            for t2 in range(size, ins, -1):
                b_key[t2] = b_key[t2 - 1]
                b_dist[t2] = b_dist[t2 - 1]
                b_row[t2] = b_row[t2 - 1]
                b_exp[t2] = b_exp[t2 - 1]
            b_key[ins] = key
            b_dist[ins] = d
            b_row[ins] = nb
            b_exp[ins] = False
            if size < L:
                size += 1
    return (b_row[:size], b_key[:size], b_dist[:size], b_exp[:size], expanded[:n_exp],
            v_row[:n_vis], v_key[:n_vis], v_dist[:n_vis], reads)


@numba.njit(cache=True, nogil=True)
def _fetch(rows, alive, cmarks, stamp, counts):
    """Keep rows whose codes are readable, counting reads of rows not yet cached."""
    out = np.empty(rows.shape[0], dtype=np.int64)
    n = 0
    for r in rows:
        if cmarks[r] != stamp:
            counts[0] += 1
            if alive[r]:
                cmarks[r] = stamp
        if cmarks[r] == stamp:
            out[n] = r
            n += 1
    return out[:n]


@numba.njit(cache=True, nogil=True)
def _decode_rows(rows, codes, versions, lut, cents, dim_off):
    m = codes.shape[1]
    out = np.empty((rows.shape[0], cents.shape[2]), dtype=np.float32)
    for i in range(rows.shape[0]):
        r = rows[i]
        slot = lut[versions[r]]
        for j in range(m):
            c = codes[r, j]
            for d in range(dim_off[j], dim_off[j + 1]):
                out[i, d] = cents[slot, c, d]
    return out


@numba.njit(cache=True, nogil=True)
def _prune_rows(p_row, cand_rows, codes, versions, lut, alive, row_ids, cents, dim_off,
                alpha, R, rule, cmarks, stamp, counts):
    """Robust prune on rows; same reads and ordering as the provider path."""
    ids = row_ids[cand_rows]
    order = np.argsort(ids, kind="mergesort")
    pool = np.empty(cand_rows.shape[0], dtype=np.int64)
    n = 0
    for oi in range(order.shape[0]):
        r = cand_rows[order[oi]]
        if r == p_row or (n > 0 and row_ids[pool[n - 1]] == row_ids[r]):
            continue
        pool[n] = r
        n += 1
    if n == 0:
        return pool[:0]
    p_one = np.empty(1, dtype=np.int64)
    p_one[0] = p_row
    p_ok = _fetch(p_one, alive, cmarks, stamp, counts)
    kept_rows = _fetch(pool[:n], alive, cmarks, stamp, counts)
    if p_ok.shape[0] == 0 or kept_rows.shape[0] == 0:
        return pool[:0]
    p_vec = _decode_rows(p_ok, codes, versions, lut, cents, dim_off)[0]
    vecs = _decode_rows(kept_rows, codes, versions, lut, cents, dim_off)
    keep = prune_kernel(p_vec, vecs, alpha, R, rule)
    counts[2] += kept_rows.shape[0]
    return kept_rows[keep]


@numba.njit(cache=True, nogil=True)
def insert_kernel(adj, deg, has_adj, codes, versions, lut, alive, row_ids, tables, offsets,
                  cents, dim_off, p_row, start_row, L, alpha, R, max_degree, rule,
                  stamps, stamp, cmarks):
    """Search, prune and back-edge update for one new vertex on dense buffers.

    Reproduces the provider-based insert step for step. Returns counters
    (quant reads, adjacency reads, distance computations, hops).
    """
    counts = np.zeros(4, dtype=np.int64)
    # seed read of the start vertex
    counts[0] += 1
    seed_rows = np.empty(1, dtype=np.int64)
    seed_keys = np.empty(1, dtype=np.float32)
    seed_exp = np.zeros(1, dtype=np.bool_)
    expanded = np.empty(0, dtype=np.int64)
    if alive[start_row]:
        one = np.empty((1, codes.shape[1]), dtype=np.uint8)
        one[0] = codes[start_row]
        sl = np.empty(1, dtype=np.int64)
        sl[0] = lut[versions[start_row]]
        seed_keys[0] = pq_lookup_multi(tables, offsets, one, sl)[0]
        seed_rows[0] = start_row
        counts[2] += 1
        stamps[start_row] = stamp
        cmarks[start_row] = stamp
        res = traverse(adj, deg, codes, versions, lut, alive, row_ids, tables, offsets,
                       seed_rows, seed_keys, seed_keys, seed_exp, L, np.empty(0, dtype=np.bool_),
                       np.float32(1.0), 0, stamps, stamp)
        expanded = res[4]
        v_rows = res[5]
        counts[3] += expanded.shape[0]
        counts[1] += expanded.shape[0]
        counts[0] += res[8]
        counts[2] += v_rows.shape[0]
        for r in v_rows:
            cmarks[r] = stamp
    # current out-list of the new vertex (absent)
    counts[1] += 1
    nout = _prune_rows(p_row, expanded, codes, versions, lut, alive, row_ids, cents, dim_off,
                       alpha, R, rule, cmarks, stamp, counts)
    for i in range(nout.shape[0]):
        adj[p_row, i] = nout[i]
    deg[p_row] = nout.shape[0]
    has_adj[p_row] = True
    for j in nout:
        counts[1] += 1
        dj = deg[j]
        present = False
        for t in range(dj):
            if adj[j, t] == p_row:
                present = True
        if present:
            continue
        if dj + 1 > max_degree:
            cand = np.empty(dj + 1, dtype=np.int64)
            cand[:dj] = adj[j, :dj]
            cand[dj] = p_row
            kept = _prune_rows(j, cand, codes, versions, lut, alive, row_ids, cents, dim_off,
                               alpha, R, rule, cmarks, stamp, counts)
            for t in range(kept.shape[0]):
                adj[j, t] = kept[t]
            deg[j] = kept.shape[0]
        else:
            adj[j, dj] = p_row
            deg[j] = dj + 1
    return counts
