"""Differentiable components: scoring, losses, TransE, interaction blocks and
the three user encoders, with hand-written analytic gradients.

Per-example operations are the reference surface; the ``*_batch`` helpers are
the vectorized paths used by training and evaluation and compute the same
functions (they share the same formulas, so agreement is exact up to float
associativity).  Every forward that participates in training returns a cache
consumed by the matching backward, which accumulates into a
:class:`~kgmd.params.GradBuffer`.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

# Salt for the deterministic neighbor subsample; independent of training seed
# so a user's capped neighborhood is stable across train and eval.
_NEIGHBOR_SALT = 0x6B676D64


# ---------------------------------------------------------------------------
# Scoring and losses


def score(u_emb, v_emb):
    """Inner product of two equal-length embedding vectors."""
    u = np.asarray(u_emb, dtype=float)
    v = np.asarray(v_emb, dtype=float)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"dim mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def rec_loss(f_pos, f_neg, margin):
    """Margin ranking loss max(0, f_neg - f_pos + margin)."""
    return float(max(0.0, f_neg - f_pos + margin))


def kge_loss(d_pos, d_neg, margin):
    """Margin ranking loss over TransE distances: max(0, d_pos - d_neg + margin)."""
    return float(max(0.0, d_pos - d_neg + margin))


def transe_distance(h_idx, r_idx, t_idx, params):
    """L2 norm of E_ent(h) + E_rel(r) - E_ent(t)."""
    ents, rels = params["entity_emb"], params["relation_emb"]
    for idx, n in ((h_idx, len(ents)), (r_idx, len(rels)), (t_idx, len(ents))):
        if not (0 <= idx < n):
            raise IndexError(f"index {idx} out of range [0,{n})")
    g = ents[h_idx] + rels[r_idx] - ents[t_idx]
    return float(np.linalg.norm(g))


def transe_distance_batch(params, h_idx, r_idx, t_idx):
    """Distances plus the raw translation vectors (needed by the backward)."""
    g = params["entity_emb"][h_idx] + params["relation_emb"][r_idx] - params["entity_emb"][t_idx]
    return np.linalg.norm(g, axis=1), g


def transe_backward_batch(gd, g, d, h_idx, r_idx, t_idx, buf):
    """Accumulate d(distance)/d(rows) given upstream gradients ``gd``."""
    safe = np.where(d > 0, d, 1.0)
    Gg = (gd / safe)[:, None] * g
    Gg[d == 0] = 0.0  # subgradient choice at the non-differentiable origin
    buf.add_rows("entity_emb", h_idx, Gg)
    buf.add_rows("relation_emb", r_idx, Gg)
    buf.add_rows("entity_emb", t_idx, -Gg)


# ---------------------------------------------------------------------------
# Interaction blocks (item/entity fusion)


def _mint_forward_batch(Xv, Xe, params):
    h = Xv.shape[1]
    X = np.concatenate([Xv, Xe], axis=1)
    Z1 = X @ params["mint.w1"].T + params["mint.b1"]
    A1 = np.maximum(Z1, 0.0)
    Y = A1 @ params["mint.w2"].T + params["mint.b2"]
    return Y[:, :h], Y[:, h:], {"kind": "mint", "X": X, "Z1": Z1, "A1": A1, "h": h}


def _mint_backward_batch(cache, Gv, Ge, params, buf):
    GY = np.concatenate([Gv, Ge], axis=1)
    buf.add_dense("mint.w2", GY.T @ cache["A1"])
    buf.add_dense("mint.b2", GY.sum(axis=0))
    GA1 = GY @ params["mint.w2"]
    GZ1 = GA1 * (cache["Z1"] > 0)
    buf.add_dense("mint.w1", GZ1.T @ cache["X"])
    buf.add_dense("mint.b1", GZ1.sum(axis=0))
    GX = GZ1 @ params["mint.w1"]
    h = cache["h"]
    return GX[:, :h], GX[:, h:]


def _cnc_forward_batch(Xv, Xe, params):
    s1 = Xe @ params["cnc.w_vv"]
    s2 = Xv @ params["cnc.w_ev"]
    s3 = Xe @ params["cnc.w_ve"]
    s4 = Xv @ params["cnc.w_ee"]
    v2 = s1[:, None] * Xv + s2[:, None] * Xe + params["cnc.b_v"]
    e2 = s3[:, None] * Xv + s4[:, None] * Xe + params["cnc.b_e"]
    return v2, e2, {"kind": "cnc", "Xv": Xv, "Xe": Xe, "s": (s1, s2, s3, s4)}


def _cnc_backward_batch(cache, Gv, Ge, params, buf):
    Xv, Xe = cache["Xv"], cache["Xe"]
    s1, s2, s3, s4 = cache["s"]
    gv_dot_v = np.einsum("nh,nh->n", Gv, Xv)
    gv_dot_e = np.einsum("nh,nh->n", Gv, Xe)
    ge_dot_v = np.einsum("nh,nh->n", Ge, Xv)
    ge_dot_e = np.einsum("nh,nh->n", Ge, Xe)
    buf.add_dense("cnc.w_vv", gv_dot_v @ Xe)
    buf.add_dense("cnc.w_ev", gv_dot_e @ Xv)
    buf.add_dense("cnc.b_v", Gv.sum(axis=0))
    buf.add_dense("cnc.w_ve", ge_dot_v @ Xe)
    buf.add_dense("cnc.w_ee", ge_dot_e @ Xv)
    buf.add_dense("cnc.b_e", Ge.sum(axis=0))
    GXv = s1[:, None] * Gv + gv_dot_e[:, None] * params["cnc.w_ev"]
    GXv += s3[:, None] * Ge + ge_dot_e[:, None] * params["cnc.w_ee"]
    GXe = gv_dot_v[:, None] * params["cnc.w_vv"] + s2[:, None] * Gv
    GXe += ge_dot_v[:, None] * params["cnc.w_ve"] + s4[:, None] * Ge
    return GXv, GXe


def _block_forward(Xv, Xe, params):
    if params.config.interaction_block == "mint":
        return _mint_forward_batch(Xv, Xe, params)
    return _cnc_forward_batch(Xv, Xe, params)


def _block_backward(cache, Gv, Ge, params, buf):
    if cache["kind"] == "mint":
        return _mint_backward_batch(cache, Gv, Ge, params, buf)
    return _cnc_backward_batch(cache, Gv, Ge, params, buf)


def mint_forward(v_emb, e_emb, params):
    """Concat-MLP interaction block; returns (v', e')."""
    v2, e2, _ = _mint_forward_batch(np.asarray(v_emb, float)[None, :], np.asarray(e_emb, float)[None, :], params)
    return v2[0], e2[0]


def cnc_forward(v_emb, e_emb, params):
    """Cross&Compress: pairwise-product matrix compressed per side; returns (v', e')."""
    v = np.asarray(v_emb, float)
    e = np.asarray(e_emb, float)
    if v.shape != e.shape or v.ndim != 1:
        raise ValueError(f"dim mismatch: {v.shape} vs {e.shape}")
    v2, e2, _ = _cnc_forward_batch(v[None, :], e[None, :], params)
    return v2[0], e2[0]


# ---------------------------------------------------------------------------
# Item encoder


def encode_items_batch(item_idx, params, links):
    """Item embeddings for an index array; linked items pass the interaction block."""
    item_idx = np.asarray(item_idx, dtype=np.int64)
    rows = params["item_emb"][item_idx]
    if not params.config.kge or not links:
        return rows.copy(), {"idx": item_idx, "kge": False}
    ent_idx = np.array([links.get(int(i), -1) for i in item_idx], dtype=np.int64)
    linked = ent_idx >= 0
    out = rows.copy()
    cache = {"idx": item_idx, "kge": True, "linked": linked, "ent_idx": ent_idx[linked]}
    if linked.any():
        Xe = params["entity_emb"][ent_idx[linked]]
        v2, e2, bc = _block_forward(rows[linked], Xe, params)
        out[linked] = v2
        cache["block"] = bc
        cache["e2"] = e2  # computed but not consumed by any loss by default
    return out, cache


def items_backward_batch(cache, G, params, buf):
    idx = cache["idx"]
    if not cache["kge"]:
        buf.add_rows("item_emb", idx, G)
        return
    linked = cache["linked"]
    if linked.any():
        zero = np.zeros_like(G[linked])
        GXv, GXe = _block_backward(cache["block"], G[linked], zero, params, buf)
        buf.add_rows("item_emb", idx[linked], GXv)
        buf.add_rows("entity_emb", cache["ent_idx"], GXe)
    if (~linked).any():
        buf.add_rows("item_emb", idx[~linked], G[~linked])


def encode_item(item, domain, params, config=None, links=None):
    """Single-item encoder: table row, or interaction-block output when linked."""
    out, _ = encode_items_batch(np.array([item]), params, links)
    return out[0]


def enhanced_item_matrix(params, links, item_idx):
    """Vectorized encoded embeddings for a fixed item set (evaluation path)."""
    out, _ = encode_items_batch(item_idx, params, links)
    return out


# ---------------------------------------------------------------------------
# User encoders


def _rd_forward(d, X, params):
    Z1 = X @ params[f"rd.{d}.w1"].T + params[f"rd.{d}.b1"]
    A1 = np.maximum(Z1, 0.0)
    out = A1 @ params[f"rd.{d}.w2"].T + params[f"rd.{d}.b2"]
    return out, {"d": d, "X": X, "Z1": Z1, "A1": A1}


def _rd_backward(cache, G, params, buf):
    d = cache["d"]
    buf.add_dense(f"rd.{d}.w2", G.T @ cache["A1"])
    buf.add_dense(f"rd.{d}.b2", G.sum(axis=0))
    GA1 = G @ params[f"rd.{d}.w2"]
    GZ1 = GA1 * (cache["Z1"] > 0)
    buf.add_dense(f"rd.{d}.w1", GZ1.T @ cache["X"])
    buf.add_dense(f"rd.{d}.b1", GZ1.sum(axis=0))
    return GZ1 @ params[f"rd.{d}.w1"]


def encode_users_batch_base(user_idx, params):
    user_idx = np.asarray(user_idx, dtype=np.int64)
    return params["user_emb"][user_idx].copy(), {"kind": "base", "idx": user_idx}


def encode_users_batch_multidomain(user_idx, domain, params):
    user_idx = np.asarray(user_idx, dtype=np.int64)
    X = np.concatenate(
        [params["user_shared_emb"][user_idx], params[f"user_dom_emb.{domain}"][user_idx]], axis=1
    )
    out, rd_cache = _rd_forward(domain, X, params)
    return out, {"kind": "multd", "idx": user_idx, "d": domain, "rd": rd_cache}


def cap_neighbors(idx, cap, user):
    """Deterministic per-user subsample of an oversized neighborhood (sorted)."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) <= cap:
        return idx
    rng = np.random.default_rng((_NEIGHBOR_SALT, user))
    keep = np.sort(rng.choice(len(idx), size=cap, replace=False))
    return idx[keep]


def _gnn_prefix(group):
    return f"gnn.{group}."


def _gnn_forward_batch(group, q0, X, mask, params, layers):
    """Iterated additive attention over neighbor embeddings.

    q^0 is the domain query; each layer attends over the neighbors with
    s_i = wa . tanh(Wq q + Wk x_i), aggregates m = sum_i alpha_i Wv x_i and
    updates q <- tanh(Ws q + m).  Users without neighbors keep m = 0.
    """
    p = _gnn_prefix(group)
    wq, wk, wv, ws, wa = (params[p + n] for n in ("wq", "wk", "wv", "ws", "wa"))
    B = X.shape[0]
    K = X @ wk.T
    WvX = X @ wv.T
    has_nb = mask.any(axis=1)
    q = np.repeat(q0[None, :], B, axis=0)
    steps = []
    for _ in range(layers):
        pre = (q @ wq.T)[:, None, :] + K
        t = np.tanh(pre)
        s = np.where(mask, t @ wa, -np.inf)
        smax = np.where(has_nb, s.max(axis=1, initial=-np.inf), 0.0)
        ex = np.where(mask, np.exp(s - smax[:, None]), 0.0)
        denom = ex.sum(axis=1)
        alpha = ex / np.where(denom > 0, denom, 1.0)[:, None]
        m = np.matmul(alpha[:, None, :], WvX)[:, 0, :]
        q_new = np.tanh(q @ ws.T + m)
        steps.append({"q_prev": q, "t": t, "alpha": alpha, "q_new": q_new})
        q = q_new
    return q, {"group": group, "X": X, "mask": mask, "WvX": WvX, "steps": steps}


def _gnn_backward_batch(cache, Gq, params, buf):
    """Returns (grad wrt q0 summed over the batch, grad wrt X)."""
    p = _gnn_prefix(cache["group"])
    wq, wk, wv, ws, wa = (params[p + n] for n in ("wq", "wk", "wv", "ws", "wa"))
    X, mask, WvX = cache["X"], cache["mask"], cache["WvX"]
    GX = np.zeros_like(X)
    gwq = np.zeros_like(wq)
    gwk = np.zeros_like(wk)
    gwv = np.zeros_like(wv)
    gws = np.zeros_like(ws)
    gwa = np.zeros_like(wa)
    h = X.shape[2]
    for step in reversed(cache["steps"]):
        q_prev, t, alpha, q_new = step["q_prev"], step["t"], step["alpha"], step["q_new"]
        Gz = Gq * (1.0 - q_new**2)
        gws += Gz.T @ q_prev
        Gq_prev = Gz @ ws
        Galpha = np.matmul(WvX, Gz[:, :, None])[:, :, 0]
        gwv += Gz.T @ np.matmul(alpha[:, None, :], X)[:, 0, :]
        GX += alpha[:, :, None] * (Gz @ wv)[:, None, :]
        Gs = alpha * (Galpha - (alpha * Galpha).sum(axis=1)[:, None])
        gwa += Gs.reshape(-1) @ t.reshape(-1, h)
        Gpre = (Gs[:, :, None] * wa[None, None, :]) * (1.0 - t**2)
        GU = Gpre.sum(axis=1)
        gwq += GU.T @ q_prev
        Gq_prev += GU @ wq
        gwk += Gpre.reshape(-1, h).T @ X.reshape(-1, h)
        GX += Gpre @ wk
        Gq = Gq_prev
    buf.add_dense(p + "wq", gwq)
    buf.add_dense(p + "wk", gwk)
    buf.add_dense(p + "wv", gwv)
    buf.add_dense(p + "ws", gws)
    buf.add_dense(p + "wa", gwa)
    return Gq.sum(axis=0), GX


def _pad_neighbors(neighbor_lists):
    B = len(neighbor_lists)
    N = max(1, max((len(n) for n in neighbor_lists), default=0))
    padded = np.zeros((B, N), dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    for i, nb in enumerate(neighbor_lists):
        padded[i, : len(nb)] = nb
        mask[i, : len(nb)] = True
    return padded, mask


def encode_users_batch_gnn(user_idx, domain, neighbor_lists, params, config):
    """GNN user encoder for a batch of same-domain users.

    ``neighbor_lists`` holds each user's (already capped) neighbor item
    indices across all domains.
    """
    user_idx = np.asarray(user_idx, dtype=np.int64)
    padded, mask = _pad_neighbors(neighbor_lists)
    X = params["item_emb"][padded]
    X = np.where(mask[:, :, None], X, 0.0)
    q0 = params["domain_emb"][domain]
    q_shared, c_shared = _gnn_forward_batch("shared", q0, X, mask, params, config.gnn_layers)
    q_dom, c_dom = _gnn_forward_batch(f"dom.{domain}", q0, X, mask, params, config.gnn_layers)
    out, rd_cache = _rd_forward(domain, np.concatenate([q_shared, q_dom], axis=1), params)
    cache = {
        "kind": "gnn",
        "idx": user_idx,
        "d": domain,
        "padded": padded,
        "mask": mask,
        "shared": c_shared,
        "dom": c_dom,
        "rd": rd_cache,
    }
    return out, cache


def users_backward_batch(cache, G, params, buf):
    kind = cache["kind"]
    if kind == "base":
        buf.add_rows("user_emb", cache["idx"], G)
        return
    GX = _rd_backward(cache["rd"], G, params, buf)
    h = params.config.embedding_dim
    if kind == "multd":
        buf.add_rows("user_shared_emb", cache["idx"], GX[:, :h])
        buf.add_rows(f"user_dom_emb.{cache['d']}", cache["idx"], GX[:, h:])
        return
    gq0_shared, GX_items_s = _gnn_backward_batch(cache["shared"], GX[:, :h], params, buf)
    gq0_dom, GX_items_d = _gnn_backward_batch(cache["dom"], GX[:, h:], params, buf)
    buf.add_row("domain_emb", cache["d"], gq0_shared + gq0_dom)
    mask = cache["mask"]
    GX_items = GX_items_s + GX_items_d
    if mask.any():
        buf.add_rows("item_emb", cache["padded"][mask], GX_items[mask])


def encode_user_base(user, params):
    """Single-domain user encoder: the embedding table row."""
    return params["user_emb"][user].copy()


def encode_user_multidomain(user, domain, params, config=None):
    """Shared + domain user rows combined by the domain-specific two-layer MLP."""
    out, _ = encode_users_batch_multidomain(np.array([user]), domain, params)
    return out[0]


def encode_user_gnn(user, domain, neighbors, params, config):
    """GNN user encoder for one user given N(u) (all domains)."""
    idx = _neighbor_index_array(neighbors)
    idx = cap_neighbors(idx, config.gnn_neighbor_cap, user)
    out, _ = encode_users_batch_gnn(np.array([user]), domain, [idx], params, config)
    return out[0]


def _neighbor_index_array(neighbors):
    if len(neighbors) and hasattr(neighbors[0], "index"):
        return np.array([n.index for n in neighbors], dtype=np.int64)
    return np.asarray(neighbors, dtype=np.int64)


def encode_users_for_domain(user_idx, domain, params, config, graph):
    """Batch-encode users for one domain, dispatching on the variant."""
    if config.gnn:
        nb = [
            cap_neighbors(graph.neighbor_indices(int(u)), config.gnn_neighbor_cap, int(u))
            for u in user_idx
        ]
        return encode_users_batch_gnn(user_idx, domain, nb, params, config)
    if config.multi_domain:
        return encode_users_batch_multidomain(user_idx, domain, params)
    return encode_users_batch_base(user_idx, params)


# ---------------------------------------------------------------------------
# Full scoring with cache (reference composition)


def forward_score(user, item, domain, params, config=None, neighbors=None, links=None):
    """Score one (user, item, domain) and cache intermediates for backward."""
    config = config or params.config
    if config.gnn:
        if neighbors is None:
            raise DataError("forward_score with a GNN variant needs the user's neighbors")
        idx = cap_neighbors(_neighbor_index_array(neighbors), config.gnn_neighbor_cap, user)
        u_vec, u_cache = encode_users_batch_gnn(np.array([user]), domain, [idx], params, config)
    elif config.multi_domain:
        u_vec, u_cache = encode_users_batch_multidomain(np.array([user]), domain, params)
    else:
        u_vec, u_cache = encode_users_batch_base(np.array([user]), params)
    v_vec, v_cache = encode_items_batch(np.array([item]), params, links)
    cache = {"params": params, "u": u_vec[0], "v": v_vec[0], "u_cache": u_cache, "v_cache": v_cache}
    return score(u_vec[0], v_vec[0]), cache


def backward(cache, upstream, buf):
    """Accumulate d(upstream * score)/d(theta) for a cached forward_score."""
    params = cache["params"]
    gu = upstream * cache["v"]
    gv = upstream * cache["u"]
    users_backward_batch(cache["u_cache"], gu[None, :], params, buf)
    items_backward_batch(cache["v_cache"], gv[None, :], params, buf)
