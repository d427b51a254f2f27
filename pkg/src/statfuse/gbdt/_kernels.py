"""Compiled kernels for histogram tree growth and traversal.

Trees use a signed child encoding: a non-negative child is an internal node
index, a negative child ``c`` is leaf ``~c``.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def _fill_hist(Xb, g, h, w, idx, start, count, feat_mask, n_bins, hist):
    F = Xb.shape[1]
    for f in range(F):
        if feat_mask[f]:
            for b in range(n_bins[f]):
                for c in range(4):
                    hist[f, b, c] = 0.0
    for ii in range(start, start + count):
        r = idx[ii]
        gi = g[r]
        hi = h[r]
        wi = w[r]
        for f in range(F):
            if feat_mask[f]:
                b = Xb[r, f]
                hist[f, b, 0] += gi
                hist[f, b, 1] += hi
                hist[f, b, 2] += 1.0
                hist[f, b, 3] += wi


@nb.njit(cache=True, nogil=True)
def _leaf_score(G, H, lam):
    d = H + lam
    if d <= 0.0:
        return 0.0
    return G * G / d


@nb.njit(cache=True, nogil=True)
def _best_split(hist, feat_mask, is_cat, n_bins, G, H, C, min_data, min_hess, lam,
                cat_smooth, cat_out):
    """Best (gain, feature, bin) for one leaf; fills ``cat_out`` for categorical winners."""
    parent = _leaf_score(G, H, lam)
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    F = hist.shape[0]
    B = hist.shape[1]
    ratio = np.empty(B)
    present = np.empty(B, dtype=np.int64)
    for f in range(F):
        if not feat_mask[f]:
            continue
        nb_f = n_bins[f]
        if not is_cat[f]:
            gl = 0.0
            hl = 0.0
            cl = 0.0
            for b in range(nb_f - 1):
                gl += hist[f, b, 0]
                hl += hist[f, b, 1]
                cl += hist[f, b, 2]
                if cl < min_data or hl < min_hess:
                    continue
                cr = C - cl
                hr = H - hl
                if cr < min_data or hr < min_hess:
                    break
                gain = _leaf_score(gl, hl, lam) + _leaf_score(G - gl, hr, lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
        else:
            m = 0
            for b in range(nb_f):
                if hist[f, b, 2] > 0:
                    present[m] = b
                    ratio[m] = hist[f, b, 0] / (hist[f, b, 1] + cat_smooth)
                    m += 1
            if m < 2:
                continue
            order = np.argsort(ratio[:m], kind="mergesort")
            gl = 0.0
            hl = 0.0
            cl = 0.0
            best_i = -1
            for i in range(m - 1):
                b = present[order[i]]
                gl += hist[f, b, 0]
                hl += hist[f, b, 1]
                cl += hist[f, b, 2]
                if cl < min_data or hl < min_hess:
                    continue
                cr = C - cl
                hr = H - hl
                if cr < min_data or hr < min_hess:
                    break
                gain = _leaf_score(gl, hl, lam) + _leaf_score(G - gl, hr, lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = -1
                    best_i = i
            if best_i >= 0 and best_f == f:
                for b in range(B):
                    cat_out[b] = False
                for i in range(best_i + 1):
                    cat_out[present[order[i]]] = True
    return best_gain, best_f, best_b


@nb.njit(cache=True, nogil=True)
def build_tree(Xb, g, h, w, rows, feat_mask, is_cat, n_bins, num_leaves, min_data,
               min_hess, lam, cat_smooth):
    """Grow one leaf-wise tree on ``rows``.

    Returns node arrays, Newton leaf values, and the row partition
    (``idx`` with per-leaf ``start``/``count``) for leaf refitting.
    """
    F = Xb.shape[1]
    B = 1
    for f in range(F):
        if n_bins[f] > B:
            B = n_bins[f]
    L = num_leaves
    n_sub = rows.shape[0]
    idx = rows.copy()
    buf = np.empty_like(idx)
    hist = np.empty((L, F, B, 4))
    leaf_start = np.zeros(L, dtype=np.int64)
    leaf_count = np.zeros(L, dtype=np.int64)
    leaf_G = np.zeros(L)
    leaf_H = np.zeros(L)
    leaf_C = np.zeros(L)
    leaf_W = np.zeros(L)
    best_gain = np.full(L, -np.inf)
    best_feat = np.full(L, -1, dtype=np.int64)
    best_bin = np.full(L, -1, dtype=np.int64)
    best_cat = np.zeros((L, B), dtype=np.bool_)
    leaf_parent = np.full(L, -1, dtype=np.int64)
    leaf_is_left = np.zeros(L, dtype=np.bool_)

    n_int = max(L - 1, 1)
    split_feat = np.full(n_int, -1, dtype=np.int32)
    split_bin = np.full(n_int, -1, dtype=np.int32)
    node_cat = np.zeros(n_int, dtype=np.bool_)
    cat_left = np.zeros((n_int, B), dtype=np.bool_)
    cat_seen = np.zeros((n_int, B), dtype=np.bool_)
    left = np.zeros(n_int, dtype=np.int32)
    right = np.zeros(n_int, dtype=np.int32)
    default_left = np.zeros(n_int, dtype=np.bool_)

    leaf_count[0] = n_sub
    for ii in range(n_sub):
        r = idx[ii]
        leaf_G[0] += g[r]
        leaf_H[0] += h[r]
        leaf_W[0] += w[r]
    leaf_C[0] = n_sub
    _fill_hist(Xb, g, h, w, idx, 0, n_sub, feat_mask, n_bins, hist[0])
    if n_sub >= 2 * min_data:
        gain, bf, bb = _best_split(hist[0], feat_mask, is_cat, n_bins, leaf_G[0], leaf_H[0],
                                   leaf_C[0], min_data, min_hess, lam, cat_smooth, best_cat[0])
        best_gain[0] = gain
        best_feat[0] = bf
        best_bin[0] = bb

    n_leaves = 1
    while n_leaves < L:
        l = -1
        top = 0.0
        for k in range(n_leaves):
            if best_feat[k] >= 0 and best_gain[k] > top:
                top = best_gain[k]
                l = k
        if l < 0:
            break
        f = best_feat[l]
        t = best_bin[l]
        s = leaf_start[l]
        c = leaf_count[l]
        nl = 0
        nr = 0
        gL = 0.0
        hL = 0.0
        wL = 0.0
        for ii in range(s, s + c):
            r = idx[ii]
            b = Xb[r, f]
            if is_cat[f]:
                go = best_cat[l, b]
            else:
                go = b <= t
            if go:
                idx[s + nl] = r
                nl += 1
                gL += g[r]
                hL += h[r]
                wL += w[r]
            else:
                buf[nr] = r
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = buf[k]

        new = n_leaves
        node = n_leaves - 1
        split_feat[node] = f
        split_bin[node] = t
        node_cat[node] = is_cat[f]
        if is_cat[f]:
            for b in range(n_bins[f]):
                cat_left[node, b] = best_cat[l, b]
                cat_seen[node, b] = hist[l, f, b, 2] > 0
        left[node] = ~l
        right[node] = ~new
        p = leaf_parent[l]
        if p >= 0:
            if leaf_is_left[l]:
                left[p] = node
            else:
                right[p] = node
        leaf_parent[l] = node
        leaf_is_left[l] = True
        leaf_parent[new] = node
        leaf_is_left[new] = False
        default_left[node] = wL >= leaf_W[l] - wL

        leaf_start[new] = s + nl
        leaf_count[new] = nr
        leaf_count[l] = nl
        leaf_G[new] = leaf_G[l] - gL
        leaf_H[new] = leaf_H[l] - hL
        leaf_W[new] = leaf_W[l] - wL
        leaf_C[new] = nr
        leaf_G[l] = gL
        leaf_H[l] = hL
        leaf_W[l] = wL
        leaf_C[l] = nl

        if nl <= nr:
            small = l
            large = new
        else:
            small = new
            large = l
        if small == l:
            for ff in range(F):
                if feat_mask[ff]:
                    for b in range(n_bins[ff]):
                        for q in range(4):
                            hist[new, ff, b, q] = hist[l, ff, b, q]
        _fill_hist(Xb, g, h, w, idx, leaf_start[small], leaf_count[small], feat_mask, n_bins,
                   hist[small])
        for ff in range(F):
            if feat_mask[ff]:
                for b in range(n_bins[ff]):
                    for q in range(4):
                        hist[large, ff, b, q] -= hist[small, ff, b, q]

        for leaf in (l, new):
            best_gain[leaf] = -np.inf
            best_feat[leaf] = -1
            best_bin[leaf] = -1
            if leaf_C[leaf] >= 2 * min_data:
                gain, bf, bb = _best_split(hist[leaf], feat_mask, is_cat, n_bins, leaf_G[leaf],
                                           leaf_H[leaf], leaf_C[leaf], min_data, min_hess, lam,
                                           cat_smooth, best_cat[leaf])
                best_gain[leaf] = gain
                best_feat[leaf] = bf
                best_bin[leaf] = bb
        n_leaves += 1

    values = np.zeros(n_leaves)
    for k in range(n_leaves):
        d = leaf_H[k] + lam
        if d > 0.0:
            values[k] = -leaf_G[k] / d
    m = n_leaves - 1
    return (split_feat[:m].copy(), split_bin[:m].copy(), node_cat[:m].copy(),
            cat_left[:m].copy(), cat_seen[:m].copy(), left[:m].copy(), right[:m].copy(),
            default_left[:m].copy(), values, idx, leaf_start[:n_leaves].copy(),
            leaf_count[:n_leaves].copy())


@nb.njit(cache=True, nogil=True)
def apply_binned(Xb, rows, split_feat, split_bin, node_cat, cat_left, cat_seen, left, right,
                 default_left, out):
    """Leaf index of the listed rows of the binned matrix, written to ``out[row]``."""
    n_int = split_feat.shape[0]
    for ii in range(rows.shape[0]):
        i = rows[ii]
        if n_int == 0:
            out[i] = 0
            continue
        node = 0
        while True:
            f = split_feat[node]
            b = Xb[i, f]
            if node_cat[node]:
                if cat_left[node, b]:
                    go = True
                elif cat_seen[node, b]:
                    go = False
                else:
                    go = default_left[node]
            else:
                go = b <= split_bin[node]
            nxt = left[node] if go else right[node]
            if nxt < 0:
                out[i] = ~nxt
                break
            node = nxt


@nb.njit(cache=True, nogil=True)
def partition_leaves(idx, leaf_start, leaf_count, out):
    for l in range(leaf_start.shape[0]):
        for k in range(leaf_start[l], leaf_start[l] + leaf_count[l]):
            out[idx[k]] = l


@nb.njit(cache=True, nogil=True)
def leaf_quantiles(idx, leaf_start, leaf_count, resid, w, q, out):
    """Weighted ``q``-quantile of residuals inside each leaf."""
    for l in range(leaf_start.shape[0]):
        s = leaf_start[l]
        c = leaf_count[l]
        if c == 0:
            out[l] = 0.0
            continue
        r = np.empty(c)
        ww = np.empty(c)
        for k in range(c):
            r[k] = resid[idx[s + k]]
            ww[k] = w[idx[s + k]]
        order = np.argsort(r, kind="mergesort")
        total = 0.0
        for k in range(c):
            total += ww[k]
        target = q * total
        cum = 0.0
        val = r[order[c - 1]]
        for k in range(c):
            cum += ww[order[k]]
            if cum >= target:
                val = r[order[k]]
                break
        out[l] = val


@nb.njit(cache=True, nogil=True)
def predict_raw(X, node_off, leaf_off, n_int, tree_class, feat, thr, node_cat, cat_left,
                cat_seen, left, right, default_left, leaf_value, out):
    """Accumulate tree outputs on raw features into ``out`` (N x n_outputs).

    Categorical features carry level codes; a negative code or a level absent
    from a node's training data follows the node's default branch.
    """
    n_trees = node_off.shape[0]
    B = cat_left.shape[1]
    for i in range(X.shape[0]):
        for t in range(n_trees):
            no = node_off[t]
            lo = leaf_off[t]
            if n_int[t] == 0:
                out[i, tree_class[t]] += leaf_value[lo]
                continue
            node = 0
            while True:
                j = no + node
                x = X[i, feat[j]]
                if node_cat[j]:
                    code = int(x) if x >= 0 else -1
                    if code < 0 or code >= B:
                        go = default_left[j]
                    elif cat_left[j, code]:
                        go = True
                    elif cat_seen[j, code]:
                        go = False
                    else:
                        go = default_left[j]
                else:
                    go = x <= thr[j]
                nxt = left[j] if go else right[j]
                if nxt < 0:
                    out[i, tree_class[t]] += leaf_value[lo + ~nxt]
                    break
                node = nxt
