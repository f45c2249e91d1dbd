"""Seeded generator of multi-domain interaction data with an aligned KG.

The generator plants recoverable latent structure: item latents cluster by
genre, per-domain user latents are linear images of one shared core (so
cross-domain preferences correlate), and the KG ties items to their genre
entities.  Everything is a pure function of the config, including the split
into train/eval and the per-domain zero-shot user sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle_io import write_bundle  # re-exported: generator owns bundle output
from .data import DatasetBundle, DomainId, Interaction, ItemRef, KnowledgeGraph, build_graph
from .errors import ConfigError, DataError

__all__ = ["SynthConfig", "GroundTruth", "generate", "write_bundle"]

# Scale of per-item Gaussian noise around the genre centroid (centroids are N(0, I)).
GENRE_NOISE = 0.35

_TS_START = 1_600_000_000
_TS_SPAN = 35 * 24 * 3600


def _per_domain(value, n, name):
    if np.isscalar(value):
        return tuple([value] * n)
    value = tuple(value)
    if len(value) != n:
        raise ConfigError(f"{name} must be a scalar or one value per domain")
    return value


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_users: int = 2000
    items_per_domain: tuple = (500, 600, 100)
    num_genres: object = 10  # scalar or per-domain
    latent_dim: int = 16
    tau: float = 0.5
    interactions_per_user: object = (8.0, 6.0, 3.0)  # per-domain means
    zero_shot_fraction: object = 0.1  # scalar or per-domain
    eval_fraction: float = 0.1
    kg_extra_relations: int = 2
    domain_names: tuple = ("music", "video", "books")

    def resolved(self):
        """Validate and normalize per-domain fields; returns plain tuples."""
        n = len(self.domain_names)
        if n < 1:
            raise ConfigError("at least one domain required")
        if len(set(self.domain_names)) != n:
            raise ConfigError("domain names must be unique")
        items = tuple(int(x) for x in self.items_per_domain)
        if len(items) != n:
            raise ConfigError("items_per_domain must list one count per domain")
        genres = tuple(int(g) for g in _per_domain(self.num_genres, n, "num_genres"))
        means = tuple(float(m) for m in _per_domain(self.interactions_per_user, n, "interactions_per_user"))
        zs = tuple(float(z) for z in _per_domain(self.zero_shot_fraction, n, "zero_shot_fraction"))
        if self.num_users < 1 or self.latent_dim < 1 or min(items) < 1 or min(genres) < 1:
            raise ConfigError("all counts must be >= 1")
        if min(means) < 1.0:
            raise ConfigError("interactions_per_user means must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not all(0.0 <= z < 1.0 for z in zs) or not (0.0 <= self.eval_fraction < 1.0):
            raise ConfigError("fractions must lie in [0, 1)")
        if sum(zs) > 1.0:
            raise ConfigError("zero_shot_fraction values must sum to <= 1 (sets are disjoint)")
        if self.kg_extra_relations < 0:
            raise ConfigError("kg_extra_relations must be >= 0")
        return items, genres, means, zs


@dataclass
class GroundTruth:
    """Planted latent structure; written for test oracles, never read by training."""

    latent_dim: int
    user_core: np.ndarray  # (U, k)
    user_domain: dict  # domain index -> (U, k)
    domain_maps: dict  # domain index -> (k, k)
    item_latent: np.ndarray  # (V, k)
    item_genre: np.ndarray  # (V,) genre index within the item's domain
    zero_shot: dict  # domain index -> sorted user index array

    def to_json_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "user_core": self.user_core.tolist(),
            "user_domain": {str(d): m.tolist() for d, m in self.user_domain.items()},
            "domain_maps": {str(d): m.tolist() for d, m in self.domain_maps.items()},
            "item_latent": self.item_latent.tolist(),
            "item_genre": self.item_genre.tolist(),
            "zero_shot": {str(d): u.tolist() for d, u in self.zero_shot.items()},
        }


def generate(config):
    """Generate ``(DatasetBundle, GroundTruth)`` deterministically from the config.

    Per user and domain the interaction count is ``1 + Poisson(mean - 1)``;
    items are drawn without replacement from ``softmax(affinity / tau)`` via
    Gumbel top-k.  A disjoint ``zero_shot_fraction`` of users per domain has
    all of that domain's interactions routed to the eval split; from the
    rest, the last ``eval_fraction`` per user by timestamp goes to eval,
    never emptying a user's remaining train presence in a domain (so the
    planted zero-shot sets are exactly the zero-shot users of the bundle).
    """
    items_per_domain, genres_per_domain, means, zs_fracs = config.resolved()
    n_dom = len(config.domain_names)
    k = config.latent_dim
    U = config.num_users
    rng = np.random.default_rng(config.seed)

    domains = [DomainId(index=d, name=config.domain_names[d]) for d in range(n_dom)]
    offsets = np.concatenate([[0], np.cumsum(items_per_domain)])
    V = int(offsets[-1])

    centroids = {d: rng.normal(size=(genres_per_domain[d], k)) for d in range(n_dom)}
    item_genre = np.zeros(V, dtype=np.int64)
    item_latent = np.zeros((V, k))
    for d in range(n_dom):
        lo, hi = offsets[d], offsets[d + 1]
        g = rng.integers(0, genres_per_domain[d], size=items_per_domain[d])
        item_genre[lo:hi] = g
        item_latent[lo:hi] = centroids[d][g] + GENRE_NOISE * rng.normal(size=(items_per_domain[d], k))

    user_core = rng.normal(size=(U, k))
    domain_maps = {d: rng.normal(size=(k, k)) / np.sqrt(k) for d in range(n_dom)}
    user_domain = {d: user_core @ domain_maps[d].T for d in range(n_dom)}

    # Interaction sampling: Gumbel top-k == sampling without replacement from
    # softmax(affinity / tau).
    sampled = []  # (user, item, domain, timestamp)
    for d in range(n_dom):
        lo, hi = offsets[d], offsets[d + 1]
        counts = 1 + rng.poisson(means[d] - 1.0, size=U)
        if counts.max() > items_per_domain[d]:
            raise DataError(
                f"requested interactions exceed domain catalog: {counts.max()} > "
                f"{items_per_domain[d]} in domain {config.domain_names[d]}"
            )
        affinity = user_domain[d] @ item_latent[lo:hi].T
        gumbel = rng.gumbel(size=affinity.shape)
        keys = affinity / config.tau + gumbel
        ts = rng.integers(_TS_START, _TS_START + _TS_SPAN, size=int(counts.sum()))
        pos = 0
        for u in range(U):
            n_u = int(counts[u])
            picked = np.argpartition(-keys[u], n_u - 1)[:n_u]
            for j, local in enumerate(np.sort(picked)):
                sampled.append((u, int(lo + local), d, int(ts[pos + j])))
            pos += n_u

    # Disjoint zero-shot user slices per domain.
    perm = rng.permutation(U)
    zero_shot = {}
    start = 0
    for d in range(n_dom):
        c = int(np.floor(zs_fracs[d] * U))
        zero_shot[d] = np.sort(perm[start:start + c]).astype(np.int64)
        start += c
    zs_sets = {d: set(zero_shot[d].tolist()) for d in range(n_dom)}

    by_user = {}
    for u, v, d, ts in sampled:
        by_user.setdefault(u, []).append((u, v, d, ts))

    train_rows, eval_rows = [], []
    for u in range(U):
        rows = by_user.get(u, [])
        held = [r for r in rows if u in zs_sets[r[2]]]
        rest = [r for r in rows if u not in zs_sets[r[2]]]
        eval_rows.extend(held)
        quota = int(np.floor(config.eval_fraction * len(rest)))
        remaining = {d: sum(1 for r in rest if r[2] == d) for d in range(n_dom)}
        taken = 0
        keep = []
        for r in sorted(rest, key=lambda r: (r[3], r[2], r[1]), reverse=True):
            # Never empty a (user, domain) train bucket: zero-shot sets stay exact.
            if taken < quota and remaining[r[2]] > 1:
                eval_rows.append(r)
                remaining[r[2]] -= 1
                taken += 1
            else:
                keep.append(r)
        train_rows.extend(sorted(keep, key=lambda r: (r[3], r[2], r[1])))

    def to_interaction(row):
        u, v, d, ts = row
        return Interaction(user=u, item=ItemRef(index=v, domain=d), timestamp=ts)

    train_interactions = [to_interaction(r) for r in train_rows]
    eval_interactions = [to_interaction(r) for r in sorted(eval_rows, key=lambda r: (r[0], r[3], r[1]))]

    item_domain = np.zeros(V, dtype=np.int64)
    for d in range(n_dom):
        item_domain[offsets[d]:offsets[d + 1]] = d
    graph = build_graph(train_interactions, domains, num_users=U, num_items=V, item_domain=item_domain)

    # KG: one entity per item, one per (domain, genre); relation 0 = has_genre,
    # extra relations connect random same-genre item pairs as distractors.
    genre_entity_base = V + np.concatenate([[0], np.cumsum(genres_per_domain)])
    num_entities = V + int(sum(genres_per_domain))
    num_relations = 1 + config.kg_extra_relations
    triples = []
    for i in range(V):
        d = int(item_domain[i])
        triples.append((i, 0, int(genre_entity_base[d] + item_genre[i])))
    genre_members = {}
    for i in range(V):
        genre_members.setdefault((int(item_domain[i]), int(item_genre[i])), []).append(i)
    for r in range(config.kg_extra_relations):
        for i in range(V):
            members = genre_members[(int(item_domain[i]), int(item_genre[i]))]
            if len(members) < 2:
                continue
            j = members[int(rng.integers(0, len(members)))]
            if j == i:
                continue  # skip rather than redraw: keeps the draw count fixed
            triples.append((i, 1 + r, j))
    kg = KnowledgeGraph(
        num_entities=num_entities,
        num_relations=num_relations,
        triples=np.array(triples, dtype=np.int64),
    )
    links = {i: i for i in range(V)}

    user_names = [f"u{u:05d}" for u in range(U)]
    item_names = [
        f"{config.domain_names[item_domain[i]]}_i{i - offsets[item_domain[i]]:05d}" for i in range(V)
    ]
    entity_names = [f"e_{name}" for name in item_names] + [
        f"e_genre_{config.domain_names[d]}_{g:03d}"
        for d in range(n_dom)
        for g in range(genres_per_domain[d])
    ]
    relation_names = ["has_genre"] + [f"related_{r}" for r in range(config.kg_extra_relations)]

    bundle = DatasetBundle(
        train=graph,
        eval_interactions=eval_interactions,
        kg=kg,
        links=links,
        domains=domains,
        user_names=user_names,
        item_names=item_names,
        entity_names=entity_names,
        relation_names=relation_names,
        train_interactions=train_interactions,
    )
    truth = GroundTruth(
        latent_dim=k,
        user_core=user_core,
        user_domain=user_domain,
        domain_maps=domain_maps,
        item_latent=item_latent,
        item_genre=item_genre,
        zero_shot=zero_shot,
    )
    return bundle, truth
