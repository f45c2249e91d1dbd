"""Negative sampling and the multi-task training loop over L_rec and L_KGE.

One rec batch contributes the mean over its positives of the summed hinge
losses against ``k_neg`` sampled negatives; after every rec batch, ``kg_ratio``
KG batches contribute ``kge_weight`` times the mean triple hinge loss.  The
whole loop is a deterministic function of (bundle, configs, seed).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import model
from .errors import ConfigError, DataError, TrainingError
from .params import Dims, GradBuffer, init_parameters
from .optim import make_optimizer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    k_neg: int = 4
    margin_rec: float = 1.0
    margin_kge: float = 1.0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kg_ratio: int = 1
    kge_weight: float = 1.0
    entity_renorm: bool = True
    grad_clip_norm: float | None = None
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.k_neg < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and k_neg >= 1 required")
        if self.margin_rec < 0 or self.margin_kge < 0:
            raise ConfigError("margins must be >= 0")
        if self.kg_ratio < 0 or self.kge_weight < 0:
            raise ConfigError("kg_ratio and kge_weight must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d).validate()


_MAX_NEG_RETRIES = 100


def sample_negatives_rec(rng, graph, user, domain, k_neg):
    """k uniform draws from the domain's items, rejecting the user's train positives.

    After 100 retries a possibly-positive draw is accepted so the sampler
    always terminates (collisions are negligible at real sparsity).
    """
    items = graph.items_by_domain[domain]
    if len(items) == 0:
        raise DataError(f"domain {domain} has no items to sample negatives from")
    positives = graph.positives(user)
    out = []
    for _ in range(k_neg):
        draw = items[rng.integers(0, len(items))]
        tries = 0
        while draw in positives and tries < _MAX_NEG_RETRIES:
            draw = items[rng.integers(0, len(items))]
            tries += 1
        out.append(int(draw))
    return out


def sample_negatives_kg(rng, kg, triple):
    """Corrupt the tail: t- uniform over all entities except the true tail."""
    h, r, t = triple
    if kg.num_entities < 2:
        raise DataError("tail corruption needs at least two entities")
    draw = int(rng.integers(0, kg.num_entities - 1))
    t_neg = draw + (1 if draw >= t else 0)
    return (int(h), int(r), int(t_neg))


class _TripleStream:
    """Endless shuffled stream over triple indices (reshuffles when exhausted)."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count):
        chunks = []
        taken = 0
        while taken < count:
            grab = min(count - taken, self.n - self.pos)
            chunks.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            taken += grab
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(chunks)


def _rec_batch_step(rows, negs, params, config, graph, links, margin, buf):
    """Forward+backward for one rec batch; returns the batch mean loss."""
    m_total = len(rows)
    h = config.embedding_dim
    pos_items = rows[:, 1]
    all_items = np.concatenate([pos_items, negs.ravel()])
    uniq_items, item_inv = np.unique(all_items, return_inverse=True)
    V, v_cache = model.encode_items_batch(uniq_items, params, links)
    GV = np.zeros_like(V)
    pos_slots_all = item_inv[:m_total]
    neg_slots_all = item_inv[m_total:].reshape(negs.shape)

    total = 0.0
    c = 1.0 / m_total
    for d in np.unique(rows[:, 2]):
        sel = rows[:, 2] == d
        users = rows[sel, 0]
        uniq_u, u_inv = np.unique(users, return_inverse=True)
        U_enc, u_cache = model.encode_users_for_domain(uniq_u, int(d), params, config, graph)
        Ue = U_enc[u_inv]
        pos_slots = pos_slots_all[sel]
        neg_slots = neg_slots_all[sel]
        f_pos = (Ue * V[pos_slots]).sum(axis=1)
        f_neg = np.matmul(V[neg_slots], Ue[:, :, None])[:, :, 0]
        viol = f_neg - f_pos[:, None] + margin
        act = (viol > 0).astype(float)
        total += float(np.sum(viol * act))
        cnt = act.sum(axis=1)
        GU = c * (np.matmul(act[:, None, :], V[neg_slots])[:, 0, :] - cnt[:, None] * V[pos_slots])
        GU_uniq = np.zeros((len(uniq_u), h))
        np.add.at(GU_uniq, u_inv, GU)
        model.users_backward_batch(u_cache, GU_uniq, params, buf)
        np.add.at(GV, pos_slots, -c * cnt[:, None] * Ue)
        np.add.at(GV, neg_slots.ravel(), (c * act[:, :, None] * Ue[:, None, :]).reshape(-1, h))
    model.items_backward_batch(v_cache, GV, params, buf)
    return total / m_total


def _kg_batch_step(tidx, t_neg, params, kg, margin, weight, buf, links_rev=None):
    """Forward+backward for one KG batch; returns the unweighted mean loss."""
    triples = kg.triples[tidx]
    h_idx, r_idx, t_idx = triples[:, 0], triples[:, 1], triples[:, 2]
    use_block = params.config.kge_use_block_entity and links_rev
    if use_block:
        d_pos, bwd_pos = _block_entity_distance(params, h_idx, r_idx, t_idx, links_rev)
        d_neg, bwd_neg = _block_entity_distance(params, h_idx, r_idx, t_neg, links_rev)
    else:
        d_pos, g_pos = model.transe_distance_batch(params, h_idx, r_idx, t_idx)
        d_neg, g_neg = model.transe_distance_batch(params, h_idx, r_idx, t_neg)
    viol = d_pos - d_neg + margin
    act = (viol > 0).astype(float)
    loss = float(np.mean(np.maximum(viol, 0.0)))
    coeff = weight * act / len(tidx)
    if use_block:
        bwd_pos(coeff, buf)
        bwd_neg(-coeff, buf)
    else:
        model.transe_backward_batch(coeff, g_pos, d_pos, h_idx, r_idx, t_idx, buf)
        model.transe_backward_batch(-coeff, g_neg, d_neg, h_idx, r_idx, t_neg, buf)
    return loss


def _block_entity_distance(params, h_idx, r_idx, t_idx, links_rev):
    """Ablation path: entities linked from items enter TransE via the block's e'."""
    emb = {}
    sides = []
    for side, idx in (("h", h_idx), ("t", t_idx)):
        rows = params["entity_emb"][idx].copy()
        item_idx = np.array([links_rev.get(int(e), -1) for e in idx], dtype=np.int64)
        linked = item_idx >= 0
        bc = None
        if linked.any():
            Xv = params["item_emb"][item_idx[linked]]
            _, e2, bc = model._block_forward(Xv, rows[linked], params)
            rows[linked] = e2
        sides.append((side, idx, item_idx, linked, bc))
        emb[side] = rows
    g = emb["h"] + params["relation_emb"][r_idx] - emb["t"]
    d = np.linalg.norm(g, axis=1)

    def backward(gd, buf):
        safe = np.where(d > 0, d, 1.0)
        Gg = (gd / safe)[:, None] * g
        Gg[d == 0] = 0.0
        buf.add_rows("relation_emb", r_idx, Gg)
        for side, idx, item_idx, linked, bc in sides:
            Gside = Gg if side == "h" else -Gg
            if bc is not None:
                zero = np.zeros_like(Gside[linked])
                GXv, GXe = model._block_backward(bc, zero, Gside[linked], params, buf)
                buf.add_rows("item_emb", item_idx[linked], GXv)
                buf.add_rows("entity_emb", idx[linked], GXe)
            if (~linked).any():
                buf.add_rows("entity_emb", idx[~linked], Gside[~linked])

    return d, backward


def _renorm_entities(params, touched):
    rows = touched.get("entity_emb")
    if rows is None or not len(rows):
        return
    block = params["entity_emb"][rows]
    norms = np.linalg.norm(block, axis=1)
    ok = norms > 0
    block[ok] /= norms[ok][:, None]
    params["entity_emb"][rows] = block


def train(bundle, model_config, train_config, domain=None, return_optimizer=False):
    """Train one model; returns ``(Parameters, history)``.

    Multi-domain variants train a single model over all interactions and
    require ``domain=None``.  Single-domain variants train on one domain's
    interactions (``domain`` required); use :func:`train_all_domains` for the
    full per-domain family.  With ``return_optimizer`` the optimizer is
    returned as a third element (for checkpointing).
    """
    model_config.validate()
    train_config.validate()
    if model_config.multi_domain:
        if domain is not None:
            raise ConfigError("multi-domain variants train one model over all domains")
    elif domain is None:
        raise ConfigError("single-domain variants need a target domain (see train_all_domains)")

    dims = Dims.from_bundle(bundle)
    params = init_parameters(model_config, dims, seed=train_config.seed)
    history = []
    if train_config.epochs == 0:
        if return_optimizer:
            return params, history, make_optimizer(train_config, params)
        return params, history

    edges = bundle.train.edges()
    if domain is not None:
        edges = edges[edges[:, 2] == domain]
    if len(edges) == 0:
        raise DataError("no training interactions for the requested scope")

    rng = np.random.default_rng(train_config.seed)
    graph = bundle.train
    links = bundle.links if model_config.kge else None
    links_rev = None
    if model_config.kge and model_config.kge_use_block_entity and bundle.links:
        links_rev = {}
        for item, ent in sorted(bundle.links.items()):
            links_rev.setdefault(ent, item)

    run_kg = model_config.kge and train_config.kg_ratio > 0 and len(bundle.kg) > 0
    stream = _TripleStream(len(bundle.kg), rng) if run_kg else None
    opt = make_optimizer(train_config, params)
    buf = GradBuffer(params)
    B = train_config.batch_size
    step = 0

    for epoch in range(train_config.epochs):
        perm = rng.permutation(len(edges))
        rec_losses = []
        kge_losses = []
        for start in range(0, len(edges), B):
            rows = edges[perm[start:start + B]]
            negs = np.array(
                [
                    sample_negatives_rec(rng, graph, int(u), int(d), train_config.k_neg)
                    for u, _, d in rows
                ],
                dtype=np.int64,
            )
            buf.clear()
            loss = _rec_batch_step(
                rows, negs, params, model_config, graph, links, train_config.margin_rec, buf
            )
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite rec loss at epoch {epoch} step {step}: "
                    f"users={rows[:4, 0].tolist()} items={rows[:4, 1].tolist()}"
                )
            touched = opt.step(params, buf, scale=_clip_scale(buf, train_config))
            if train_config.entity_renorm:
                _renorm_entities(params, touched)
            rec_losses.append(loss)

            if run_kg:
                for _ in range(train_config.kg_ratio):
                    tidx = stream.take(B)
                    t_neg = np.array(
                        [sample_negatives_kg(rng, bundle.kg, bundle.kg.triples[j])[2] for j in tidx],
                        dtype=np.int64,
                    )
                    buf.clear()
                    kg_loss = _kg_batch_step(
                        tidx,
                        t_neg,
                        params,
                        bundle.kg,
                        train_config.margin_kge,
                        train_config.kge_weight,
                        buf,
                        links_rev,
                    )
                    step += 1
                    if not np.isfinite(kg_loss):
                        raise TrainingError(
                            f"non-finite KG loss at epoch {epoch} step {step}: triples={tidx[:4].tolist()}"
                        )
                    touched = opt.step(params, buf, scale=_clip_scale(buf, train_config))
                    if train_config.entity_renorm:
                        _renorm_entities(params, touched)
                    kge_losses.append(kg_loss)

        row = {"epoch": epoch, "rec_loss": float(np.mean(rec_losses))}
        row["kge_loss"] = float(np.mean(kge_losses)) if kge_losses else None
        history.append(row)
    if return_optimizer:
        return params, history, opt
    return params, history


def _clip_scale(buf, train_config):
    if train_config.grad_clip_norm is None:
        return 1.0
    norm = buf.global_norm()
    if norm <= train_config.grad_clip_norm or norm == 0.0:
        return 1.0
    return train_config.grad_clip_norm / norm


def train_all_domains(bundle, model_config, train_config):
    """Train one single-domain model per domain; returns ({domain: params}, {domain: history})."""
    if model_config.multi_domain:
        raise ConfigError("train_all_domains is for single-domain variants")
    params_by_domain = {}
    history_by_domain = {}
    for d in range(len(bundle.domains)):
        params, history = train(bundle, model_config, train_config, domain=d)
        params_by_domain[d] = params
        history_by_domain[d] = history
    return params_by_domain, history_by_domain


def train_kg_embeddings(kg, model_config, train_config):
    """Train entity/relation embeddings on the KG objective alone."""
    if not model_config.kge:
        raise ConfigError("train_kg_embeddings requires a kge-enabled model config")
    if len(kg) == 0:
        raise DataError("empty knowledge graph")
    dims = Dims(num_users=1, num_items=1, num_entities=kg.num_entities,
                num_relations=kg.num_relations, num_domains=1)
    params = init_parameters(model_config, dims, seed=train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    stream = _TripleStream(len(kg), rng)
    opt = make_optimizer(train_config, params)
    buf = GradBuffer(params)
    B = train_config.batch_size
    history = []
    batches_per_epoch = max(1, int(np.ceil(len(kg) / B)))
    for epoch in range(train_config.epochs):
        losses = []
        for _ in range(batches_per_epoch):
            tidx = stream.take(min(B, len(kg)))
            t_neg = np.array(
                [sample_negatives_kg(rng, kg, kg.triples[j])[2] for j in tidx], dtype=np.int64
            )
            buf.clear()
            loss = _kg_batch_step(
                tidx, t_neg, params, kg, train_config.margin_kge, 1.0, buf, None
            )
            touched = opt.step(params, buf, scale=_clip_scale(buf, train_config))
            if train_config.entity_renorm:
                _renorm_entities(params, touched)
            losses.append(loss)
        history.append({"epoch": epoch, "kge_loss": float(np.mean(losses))})
    return params, history
