"""Finite-difference validation of the analytic gradients.

Builds a tiny random instance (a few users/items/entities across three
domains), computes the combined hinge loss analytically and by central
differences, and reports the max relative error per parameter group.  The
instance is resampled (deterministically) until it sits at least 1e-3 away
from every hinge/ReLU kink, where the comparison is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .data import KnowledgeGraph, build_graph, Interaction, ItemRef
from .params import Dims, GradBuffer, ModelConfig, init_parameters
from .training import _block_entity_distance, _kg_batch_step, _rec_batch_step

DEFAULT_TOLERANCE = 1e-4
_EPS = 1e-4
_KINK_MARGIN = 1e-3
_REL_FLOOR = 1e-6


def model_zoo(embedding_dim=32, **overrides):
    """The six compared variants, keyed by their canonical names."""
    base = dict(embedding_dim=embedding_dim, **overrides)
    return {
        "base": ModelConfig(**base),
        "kge": ModelConfig(kge=True, **base),
        "multd": ModelConfig(multi_domain=True, **base),
        "multd_kge": ModelConfig(multi_domain=True, kge=True, **base),
        "multd_gnn": ModelConfig(multi_domain=True, gnn=True, **base),
        "multd_kge_gnn": ModelConfig(multi_domain=True, kge=True, gnn=True, **base),
    }


@dataclass
class GroupResult:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    variant: str
    seed: int
    retries: int
    tolerance: float
    groups: list

    @property
    def passed(self):
        return all(g.passed for g in self.groups)

    @property
    def max_rel_err(self):
        return max((g.max_rel_err for g in self.groups), default=0.0)

    def format(self):
        lines = [f"[{self.variant}] seed={self.seed} retries={self.retries} tol={self.tolerance:g}"]
        for g in self.groups:
            flag = "ok  " if g.passed else "FAIL"
            lines.append(f"  {flag} {g.name:<24} max_rel_err={g.max_rel_err:.3e} ({g.checked} entries)")
        return "\n".join(lines)


@dataclass
class _Instance:
    params: object
    graph: object
    kg: object
    links: dict
    rows: np.ndarray  # (m, 3) user, pos item, domain
    negs: np.ndarray  # (m, k)
    tidx: np.ndarray
    t_neg: np.ndarray
    margin_rec: float = 0.5
    margin_kge: float = 0.5
    kge_weight: float = 0.7


def _build_instance(config, seed, num_users=5, items_per_domain=10, num_domains=3,
                    num_entities=12, num_relations=3):
    rng = np.random.default_rng(seed)
    num_items = items_per_domain * num_domains
    dims = Dims(num_users, num_items, num_entities, num_relations, num_domains)
    params = init_parameters(config, dims, seed=seed)
    item_domain = np.repeat(np.arange(num_domains), items_per_domain)

    interactions = []
    for u in range(num_users - 1):  # leave the last user isolated (cold GNN path)
        picks = rng.choice(num_items, size=rng.integers(2, 6), replace=False)
        for v in sorted(int(x) for x in picks):
            interactions.append(Interaction(u, ItemRef(v, int(item_domain[v])), 0))
    domains = [f"d{d}" for d in range(num_domains)]
    graph = build_graph(interactions, domains, num_users=num_users, num_items=num_items,
                        item_domain=item_domain)

    rows = []
    for d in range(num_domains):
        lo = d * items_per_domain
        for _ in range(2):
            rows.append((int(rng.integers(0, num_users)), int(lo + rng.integers(0, items_per_domain)), d))
    rows = np.array(rows, dtype=np.int64)
    negs = np.array(
        [
            [int(d * items_per_domain + rng.integers(0, items_per_domain)) for _ in range(2)]
            for _, _, d in rows
        ],
        dtype=np.int64,
    )

    triples = []
    for _ in range(4):
        h = int(rng.integers(0, num_entities))
        r = int(rng.integers(0, num_relations))
        t = int(rng.integers(0, num_entities))
        triples.append((h, r, t))
    kg = KnowledgeGraph(num_entities, num_relations, np.array(triples, dtype=np.int64))
    tidx = np.arange(len(kg))
    draws = rng.integers(0, num_entities - 1, size=len(kg))
    t_neg = draws + (draws >= kg.triples[:, 2])

    links = {i: i for i in range(num_entities)}  # items beyond |E| stay unlinked
    return _Instance(params=params, graph=graph, kg=kg, links=links, rows=rows, negs=negs,
                     tidx=tidx, t_neg=t_neg)


def _loss(inst, params):
    config = params.config
    links = inst.links if config.kge else None
    m = len(inst.rows)
    all_items = np.concatenate([inst.rows[:, 1], inst.negs.ravel()])
    uniq, inv = np.unique(all_items, return_inverse=True)
    V, _ = model.encode_items_batch(uniq, params, links)
    pos_slots, neg_slots = inv[:m], inv[m:].reshape(inst.negs.shape)
    total = 0.0
    for d in np.unique(inst.rows[:, 2]):
        sel = inst.rows[:, 2] == d
        uniq_u, u_inv = np.unique(inst.rows[sel, 0], return_inverse=True)
        U, _ = model.encode_users_for_domain(uniq_u, int(d), params, config, inst.graph)
        Ue = U[u_inv]
        f_pos = np.einsum("mh,mh->m", Ue, V[pos_slots[sel]])
        f_neg = np.einsum("mh,mkh->mk", Ue, V[neg_slots[sel]])
        total += float(np.sum(np.maximum(f_neg - f_pos[:, None] + inst.margin_rec, 0.0)))
    loss = total / m
    if config.kge and len(inst.kg):
        tri = inst.kg.triples[inst.tidx]
        rev = _links_rev(inst, config)
        if rev:
            d_pos, _ = _block_entity_distance(params, tri[:, 0], tri[:, 1], tri[:, 2], rev)
            d_neg, _ = _block_entity_distance(params, tri[:, 0], tri[:, 1], inst.t_neg, rev)
        else:
            d_pos, _ = model.transe_distance_batch(params, tri[:, 0], tri[:, 1], tri[:, 2])
            d_neg, _ = model.transe_distance_batch(params, tri[:, 0], tri[:, 1], inst.t_neg)
        loss += inst.kge_weight * float(np.mean(np.maximum(d_pos - d_neg + inst.margin_kge, 0.0)))
    return loss


def _links_rev(inst, config):
    if not config.kge_use_block_entity:
        return None
    rev = {}
    for item, ent in sorted(inst.links.items()):
        rev.setdefault(ent, item)
    return rev


def _analytic(inst, params):
    buf = GradBuffer(params)
    links = inst.links if params.config.kge else None
    _rec_batch_step(inst.rows, inst.negs, params, params.config, inst.graph, links,
                    inst.margin_rec, buf)
    if params.config.kge and len(inst.kg):
        _kg_batch_step(inst.tidx, inst.t_neg, params, inst.kg, inst.margin_kge,
                       inst.kge_weight, buf, _links_rev(inst, params.config))
    return buf.dense_grads_for(params), buf


def _kink_distance(inst, params):
    """Smallest distance of any hinge / ReLU pre-activation from zero."""
    config = params.config
    links = inst.links if config.kge else None
    worst = np.inf
    m = len(inst.rows)
    all_items = np.concatenate([inst.rows[:, 1], inst.negs.ravel()])
    uniq, inv = np.unique(all_items, return_inverse=True)
    V, v_cache = model.encode_items_batch(uniq, params, links)
    if v_cache.get("kge") and "block" in v_cache and v_cache["block"]["kind"] == "mint":
        worst = min(worst, float(np.abs(v_cache["block"]["Z1"]).min()))
    pos_slots, neg_slots = inv[:m], inv[m:].reshape(inst.negs.shape)
    for d in np.unique(inst.rows[:, 2]):
        sel = inst.rows[:, 2] == d
        uniq_u, u_inv = np.unique(inst.rows[sel, 0], return_inverse=True)
        U, u_cache = model.encode_users_for_domain(uniq_u, int(d), params, config, inst.graph)
        if "rd" in u_cache:
            worst = min(worst, float(np.abs(u_cache["rd"]["Z1"]).min()))
        Ue = U[u_inv]
        f_pos = np.einsum("mh,mh->m", Ue, V[pos_slots[sel]])
        f_neg = np.einsum("mh,mkh->mk", Ue, V[neg_slots[sel]])
        worst = min(worst, float(np.abs(f_neg - f_pos[:, None] + inst.margin_rec).min()))
    if config.kge and len(inst.kg):
        tri = inst.kg.triples[inst.tidx]
        rev = _links_rev(inst, config)
        if rev:
            d_pos, _ = _block_entity_distance(params, tri[:, 0], tri[:, 1], tri[:, 2], rev)
            d_neg, _ = _block_entity_distance(params, tri[:, 0], tri[:, 1], inst.t_neg, rev)
        else:
            d_pos, _ = model.transe_distance_batch(params, tri[:, 0], tri[:, 1], tri[:, 2])
            d_neg, _ = model.transe_distance_batch(params, tri[:, 0], tri[:, 1], inst.t_neg)
        worst = min(worst, float(np.abs(d_pos - d_neg + inst.margin_kge).min()))
    return worst


def _entries_to_check(params, buf):
    """Every dense entry; for tables the touched rows plus two untouched ones."""
    out = {}
    for name in params.names():
        shape = params[name].shape
        if params.kind(name) != "table":
            out[name] = [tuple(ix) for ix in np.ndindex(shape)]
            continue
        touched = set(int(i) for i in buf.touched_rows(name))
        rows = sorted(touched)
        untouched = [r for r in range(shape[0]) if r not in touched][:2]
        entries = []
        for r in rows + untouched:
            entries.extend((r, c) for c in range(shape[1]))
        out[name] = entries
    return out


def grad_check(model_config, seed=0, tolerance=DEFAULT_TOLERANCE, corrupt_group=None):
    """Compare analytic and central finite-difference gradients per group."""
    model_config.validate()
    retries = 0
    inst = _build_instance(model_config, seed)
    while _kink_distance(inst, inst.params) < _KINK_MARGIN:
        retries += 1
        inst = _build_instance(model_config, seed + 1000 * retries)
        if retries > 20:
            raise RuntimeError("could not find a kink-free gradcheck instance")

    params = inst.params
    analytic, buf = _analytic(inst, params)
    if corrupt_group is not None and corrupt_group in analytic:
        analytic[corrupt_group] = analytic[corrupt_group] + 1e-2

    groups = []
    for name, entries in _entries_to_check(params, buf).items():
        arr = params[name]
        worst = 0.0
        for ix in entries:
            keep = arr[ix]
            arr[ix] = keep + _EPS
            up = _loss(inst, params)
            arr[ix] = keep - _EPS
            down = _loss(inst, params)
            arr[ix] = keep
            fd = (up - down) / (2 * _EPS)
            a = analytic[name][ix]
            err = abs(a - fd) / max(abs(a), abs(fd), _REL_FLOOR)
            worst = max(worst, err)
        groups.append(GroupResult(name=name, max_rel_err=worst, checked=len(entries),
                                  passed=worst <= tolerance))
    return GradCheckReport(variant=model_config.variant_name(), seed=seed, retries=retries,
                           tolerance=tolerance, groups=groups)


def grad_check_all(embedding_dim=8, seed=0, tolerance=DEFAULT_TOLERANCE, corrupt_group=None):
    """Run the finite-difference suite over the full model zoo."""
    return [
        grad_check(config, seed=seed, tolerance=tolerance, corrupt_group=corrupt_group)
        for config in model_zoo(embedding_dim).values()
    ]
