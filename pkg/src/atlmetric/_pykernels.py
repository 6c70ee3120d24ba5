"""Pure numpy versions of the hot kernels.

Used when the compiled extension is unavailable or when
``ATLMETRIC_PURE_PYTHON=1`` is set. Signatures match ``_ckernels``.
"""

import numpy as np

BACKEND = "python"


def topk_neighbors(queries, gallery, k, exclude):
    """Exact k nearest gallery rows for every query row.

    Distances are Euclidean, computed from explicit differences. Ties go to
    the lower gallery index. ``exclude[q]`` is a gallery row skipped for
    query ``q`` (use -1 for none).

    Returns ``(indices, distances)``, both of shape ``(num_queries, k)``.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    gallery = np.ascontiguousarray(gallery, dtype=np.float64)
    exclude = np.asarray(exclude, dtype=np.int64)
    if gallery.shape[1] != queries.shape[1]:
        raise ValueError("query and gallery dimensions differ")
    if k < 1 or k > gallery.shape[0]:
        raise ValueError("k out of range")
    nq = queries.shape[0]
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_dist = np.empty((nq, k), dtype=np.float64)
    for q in range(nq):
        diff = gallery - queries[q]
        d2 = np.einsum("ij,ij->i", diff, diff)
        ex = exclude[q]
        if ex >= 0:
            d2[ex] = np.inf
        order = np.argsort(d2, kind="stable")[:k]
        out_idx[q] = order
        out_dist[q] = np.sqrt(d2[order])
    out_idx[np.isinf(out_dist)] = -1
    return out_idx, out_dist


def triplet_hinge(emb, a, p, n, margin):
    """Summed squared-distance triplet hinge and its gradient.

    Triplets are accumulated in the order given; callers sort them first.
    Returns ``(loss, grad, num_active)``.
    """
    emb = np.ascontiguousarray(emb, dtype=np.float64)
    ua, up, un = emb[a], emb[p], emb[n]
    dap = ua - up
    dan = ua - un
    h = np.einsum("ij,ij->i", dap, dap) - np.einsum("ij,ij->i", dan, dan) + margin
    active = h > 0.0
    grad = np.zeros_like(emb)
    if not active.any():
        return 0.0, grad, 0
    loss = 0.0
    for v in h[active]:
        loss += v
    dap2 = 2.0 * dap[active]
    dan2 = 2.0 * dan[active]
    np.add.at(grad, a[active], dap2 - dan2)
    np.add.at(grad, p[active], -dap2)
    np.add.at(grad, n[active], dan2)
    return float(loss), grad, int(active.sum())
