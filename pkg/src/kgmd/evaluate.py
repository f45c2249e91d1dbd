"""Filtered ranking evaluation: exact per-domain ranking, MRR / Hits@K,
per-domain / All / zero-shot slices, plus the full-sort brute-force oracle
and a Monte-Carlo random-ranking baseline.

Ties are handled pessimistically: the target is placed after every equal
scored candidate, so reported metrics are never inflated by ties.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import model
from .data import zero_shot_users
from .errors import ConfigError, DataError
from .params import Dims


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (100,)
    zero_shot: bool = True

    def validate(self):
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("hits@K cutoffs must be >= 1")
        return self


@dataclass
class SliceMetrics:
    count: int
    mrr: float
    hits: dict  # K -> fraction


@dataclass
class EvalReport:
    ks: tuple
    general: dict  # domain name (or "All"/"All_macro") -> SliceMetrics
    zero_shot: dict | None
    model_digest: str
    config_digest: str

    def to_json_dict(self):
        def block(metrics):
            return {
                name: {"count": m.count, "mrr": m.mrr, "hits": {str(k): v for k, v in m.hits.items()}}
                for name, m in metrics.items()
            }

        return {
            "ks": list(self.ks),
            "model_digest": self.model_digest,
            "config_digest": self.config_digest,
            "general": block(self.general),
            "zero_shot": block(self.zero_shot) if self.zero_shot is not None else None,
        }

    def to_tsv_rows(self):
        rows = []
        blocks = [("general", self.general)]
        if self.zero_shot is not None:
            blocks.append(("zero_shot", self.zero_shot))
        for slice_name, metrics in blocks:
            for name, m in metrics.items():
                rows.append((slice_name, name, "mrr", repr(m.mrr), m.count))
                for k in sorted(m.hits):
                    rows.append((slice_name, name, f"hits@{k}", repr(m.hits[k]), m.count))
        return rows


def mrr(ranks):
    """Mean reciprocal rank of a non-empty list of ranks (>= 1)."""
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ValueError("mrr of an empty rank list")
    if (ranks < 1).any():
        raise ValueError("ranks must be >= 1")
    return float(np.mean(1.0 / ranks))


def hits_at_k(ranks, k):
    """Fraction of ranks <= k (inclusive boundary)."""
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise ValueError("hits@k of an empty rank list")
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(ranks <= k))


def _params_for_domain(params, domain):
    if isinstance(params, dict):
        try:
            return params[domain]
        except KeyError:
            raise DataError(f"no parameters for domain {domain}") from None
    return params


def _config_of(params):
    return next(iter(params.values())).config if isinstance(params, dict) else params.config


def _check_dims(params, bundle):
    expected = Dims.from_bundle(bundle)
    plist = params.values() if isinstance(params, dict) else [params]
    for p in plist:
        if p.dims != expected:
            raise DataError(
                f"parameters were built for {p.dims}, bundle has {expected} "
                "(vocabulary mismatch)"
            )


def _user_vector(user, domain, params, bundle):
    """Per-example user encoding (identical to the op-level reference path)."""
    config = params.config
    graph = bundle.train
    if config.gnn:
        idx = model.cap_neighbors(graph.neighbor_indices(user), config.gnn_neighbor_cap, user)
        out, _ = model.encode_users_batch_gnn(np.array([user]), domain, [idx], params, config)
        return out[0]
    if config.multi_domain:
        out, _ = model.encode_users_batch_multidomain(np.array([user]), domain, params)
        return out[0]
    return model.encode_user_base(user, params)


def _domain_item_matrix(params, bundle, domain):
    items = bundle.train.items_by_domain[domain]
    links = bundle.links if params.config.kge else None
    return items, model.enhanced_item_matrix(params, links, items)


def _candidate_mask(bundle, user, domain, items, pos_of):
    """Mask over the domain's items excluding the user's train and eval positives."""
    mask = np.ones(len(items), dtype=bool)
    train_pos = bundle.train.adjacency(user, domain)
    if len(train_pos):
        mask[pos_of[train_pos]] = False
    for v in bundle.eval_positive_items(user, domain):
        mask[pos_of[v]] = False
    return mask


def _position_index(items, num_items):
    pos_of = np.full(num_items, -1, dtype=np.int64)
    pos_of[items] = np.arange(len(items))
    return pos_of


def _rank_from_scores(scores, base_mask, target_pos):
    s_t = scores[target_pos]
    base = scores[base_mask]
    return int(1 + np.sum(base > s_t) + np.sum(base == s_t))


def filtered_rank(user, target_item, domain, params, bundle):
    """Pessimistic filtered rank of the target among the domain's candidates.

    Candidates are the domain's items minus the user's train positives and
    the user's *other* eval positives; the target stays in.
    """
    params = _params_for_domain(params, domain)
    items, M = _domain_item_matrix(params, bundle, domain)
    pos_of = _position_index(items, bundle.train.num_items)
    if pos_of[target_item] < 0:
        raise DataError(f"item {target_item} is not in domain {domain}")
    if target_item in bundle.train.positives(user):
        raise DataError(
            f"target ({user}, {target_item}) is a train positive: it would be filtered out"
        )
    u_vec = _user_vector(user, domain, params, bundle)
    scores = M @ u_vec
    base_mask = _candidate_mask(bundle, user, domain, items, pos_of)
    target_pos = pos_of[target_item]
    base_mask[target_pos] = False  # target handled explicitly
    return _rank_from_scores(scores, base_mask, target_pos)


def brute_force_filtered_rank(user, target_item, domain, params, bundle):
    """Independent oracle: per-example scoring and an explicit full sort."""
    params = _params_for_domain(params, domain)
    config = params.config
    links = bundle.links if config.kge else None
    graph = bundle.train
    if config.gnn:
        from .data import neighbors as graph_neighbors

        nb = graph_neighbors(graph, user)
        u_vec = model.encode_user_gnn(user, domain, nb, params, config)
    elif config.multi_domain:
        u_vec = model.encode_user_multidomain(user, domain, params)
    else:
        u_vec = model.encode_user_base(user, params)

    train_pos = set(int(i) for i in graph.adjacency(user, domain))
    if target_item in train_pos:
        raise DataError("target is a train positive")
    other_eval = bundle.eval_positive_items(user, domain) - {target_item}
    scored = []
    for item in graph.items_by_domain[domain]:
        item = int(item)
        if item in train_pos or item in other_eval:
            continue
        v_vec = model.encode_item(item, domain, params, config, links=links)
        scored.append((model.score(u_vec, v_vec), item))
    # Pessimistic: higher score first; among equal scores the target goes last.
    scored.sort(key=lambda t: (-t[0], t[1] == target_item, t[1]))
    for position, (_, item) in enumerate(scored, start=1):
        if item == target_item:
            return position
    raise DataError("target missing from the candidate set (malformed bundle)")


def rank_topk(user, domain, k, params, bundle, filter_known=True):
    """Exact top-k (item, score) pairs; ties broken by ascending item index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    params = _params_for_domain(params, domain)
    items, M = _domain_item_matrix(params, bundle, domain)
    u_vec = _user_vector(user, domain, params, bundle)
    scores = M @ u_vec
    keep = np.ones(len(items), dtype=bool)
    if filter_known:
        pos_of = _position_index(items, bundle.train.num_items)
        train_pos = bundle.train.adjacency(user, domain)
        if len(train_pos):
            keep[pos_of[train_pos]] = False
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((items[idx], -scores[idx]))]
    top = order[:k]
    return [(int(items[i]), float(scores[i])) for i in top]


def eval_candidate_sizes(bundle, domain=None, interactions=None):
    """Filtered candidate-set size for each eval interaction (baseline input)."""
    out = []
    rows = interactions if interactions is not None else bundle.eval_interactions
    for it in rows:
        d = it.item.domain
        if domain is not None and d != domain:
            continue
        n_items = len(bundle.train.items_by_domain[d])
        n_train = len(bundle.train.adjacency(it.user, d))
        n_eval = len(bundle.eval_positive_items(it.user, d))
        out.append(n_items - n_train - (n_eval - 1))
    return np.array(out, dtype=np.int64)


def random_ranking_baseline(candidate_sizes, ks=(100,), num_sims=1000, seed=0):
    """Monte-Carlo MRR / Hits@K of uniform random ranks over the given set sizes."""
    sizes = np.asarray(candidate_sizes, dtype=np.int64)
    if sizes.size == 0:
        raise ValueError("no candidate sizes to simulate")
    rng = np.random.default_rng(seed)
    ranks = rng.integers(1, sizes[None, :] + 1, size=(num_sims, sizes.size))
    mrr_sims = (1.0 / ranks).mean(axis=1)
    out = {
        "mrr": float(mrr_sims.mean()),
        "mrr_se": float(mrr_sims.std(ddof=1) / np.sqrt(num_sims)),
        "hits": {},
        "hits_se": {},
    }
    for k in ks:
        h = (ranks <= k).mean(axis=1)
        out["hits"][k] = float(h.mean())
        out["hits_se"][k] = float(h.std(ddof=1) / np.sqrt(num_sims))
    return out


def _metrics(ranks, ks):
    return SliceMetrics(
        count=len(ranks),
        mrr=mrr(ranks),
        hits={k: hits_at_k(ranks, k) for k in ks},
    )


def _macro(metrics_by_domain, ks):
    if not metrics_by_domain:
        return None
    return SliceMetrics(
        count=sum(m.count for m in metrics_by_domain.values()),
        mrr=float(np.mean([m.mrr for m in metrics_by_domain.values()])),
        hits={
            k: float(np.mean([m.hits[k] for m in metrics_by_domain.values()])) for k in ks
        },
    )


def _digest_params(params):
    if isinstance(params, dict):
        h = hashlib.sha256()
        for d in sorted(params):
            h.update(str(d).encode())
            h.update(params[d].digest().encode())
        return h.hexdigest()
    return params.digest()


def evaluate(bundle, params, model_config=None, eval_config=None, collect_ranks=False):
    """Filtered-rank every eval interaction and aggregate MRR / Hits@K slices.

    ``params`` is a single :class:`Parameters` for multi-domain variants or a
    ``{domain_index: Parameters}`` mapping for single-domain families (which
    report no pooled "All" row, mirroring per-domain training).
    """
    config = model_config or _config_of(params)
    eval_config = (eval_config or EvalConfig()).validate()
    _check_dims(params, bundle)
    multi = config.multi_domain

    ranks_by_domain = {}
    zs_ranks_by_domain = {}
    collected = []
    for d in range(len(bundle.domains)):
        pairs = [it for it in bundle.eval_interactions if it.item.domain == d]
        if not pairs:
            continue
        p = _params_for_domain(params, d)
        if p.config != config:
            raise ConfigError("per-domain parameter sets must share one model config")
        items, M = _domain_item_matrix(p, bundle, d)
        pos_of = _position_index(items, bundle.train.num_items)
        zs_users = zero_shot_users(bundle, d) if eval_config.zero_shot else set()

        by_user = {}
        for it in pairs:
            by_user.setdefault(it.user, []).append(it)
        dom_ranks = []
        zs_ranks = []
        for user in sorted(by_user):
            u_vec = _user_vector(user, d, p, bundle)
            scores = M @ u_vec
            base_mask = _candidate_mask(bundle, user, d, items, pos_of)
            for it in by_user[user]:
                tpos = pos_of[it.item.index]
                if tpos < 0 or it.item.index in bundle.train.positives(user):
                    raise DataError(
                        f"eval pair ({user}, {it.item.index}) is filtered out; "
                        "run validate_bundle"
                    )
                rank = _rank_from_scores(scores, base_mask, tpos)
                dom_ranks.append(rank)
                if user in zs_users:
                    zs_ranks.append(rank)
                if collect_ranks:
                    collected.append((it, rank))
        ranks_by_domain[d] = dom_ranks
        if zs_ranks:
            zs_ranks_by_domain[d] = zs_ranks

    ks = tuple(eval_config.ks)
    general = {}
    for d, ranks in ranks_by_domain.items():
        general[bundle.domains[d].name] = _metrics(ranks, ks)
    by_name_only = dict(general)
    if multi and ranks_by_domain:
        all_ranks = [r for ranks in ranks_by_domain.values() for r in ranks]
        general["All"] = _metrics(all_ranks, ks)
        general["All_macro"] = _macro(by_name_only, ks)

    zero_shot = None
    if eval_config.zero_shot:
        zero_shot = {}
        zs_by_name = {}
        for d, ranks in zs_ranks_by_domain.items():
            m = _metrics(ranks, ks)
            zero_shot[bundle.domains[d].name] = m
            zs_by_name[bundle.domains[d].name] = m
        if multi and zs_ranks_by_domain:
            all_zs = [r for ranks in zs_ranks_by_domain.values() for r in ranks]
            zero_shot["All"] = _metrics(all_zs, ks)
            zero_shot["All_macro"] = _macro(zs_by_name, ks)

    report = EvalReport(
        ks=ks,
        general=general,
        zero_shot=zero_shot,
        model_digest=_digest_params(params),
        config_digest=config.digest(),
    )
    if collect_ranks:
        return report, collected
    return report
