"""Multi-domain interaction graph and knowledge graph data model.

Users, items, entities and relations are dense integer indices; string ids
are interned first-seen through :class:`Vocab` and persisted with the bundle
so that indices stay interpretable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class DomainId:
    index: int
    name: str


@dataclass(frozen=True)
class ItemRef:
    index: int
    domain: int


@dataclass(frozen=True)
class Interaction:
    user: int
    item: ItemRef
    timestamp: int


class Vocab:
    """Append-only string <-> dense-index interning table."""

    def __init__(self, names=(), frozen=False):
        self._names = list(names)
        self._index = {n: i for i, n in enumerate(self._names)}
        self.frozen = frozen
        if len(self._index) != len(self._names):
            raise DataError("duplicate names in vocabulary")

    def __len__(self):
        return len(self._names)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, idx):
        return self._names[idx]

    def names(self):
        return list(self._names)

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown id {name!r}") from None

    def intern(self, name):
        idx = self._index.get(name)
        if idx is None:
            if self.frozen:
                raise DataError(f"unknown id {name!r} (vocabulary is frozen)")
            idx = len(self._names)
            self._names.append(name)
            self._index[name] = idx
        return idx


@dataclass
class LoadedVocabs:
    """Vocabularies produced or extended while parsing an interactions file."""

    users: Vocab
    items: Vocab
    domains: Vocab


def load_interactions(path, users=None, items=None, domains=None):
    """Parse ``user<TAB>item<TAB>domain<TAB>timestamp`` rows into interactions.

    Rows are returned in file order; blank lines and ``#`` comments are
    skipped.  String ids are interned first-seen into the given vocabularies
    (fresh ones when omitted, mutated in place otherwise).  Pass a frozen
    ``domains`` vocab to reject unknown domain labels.  Duplicate pairs are
    kept; deduplication happens in :func:`build_graph`.

    Returns ``(interactions, vocabs)``.
    """
    users = users if users is not None else Vocab()
    items = items if items is not None else Vocab()
    domains = domains if domains is not None else Vocab()
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            user_s, item_s, domain_s, ts_s = parts
            try:
                ts = int(ts_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts_s!r}") from None
            try:
                d = domains.intern(domain_s)
            except DataError:
                raise DataError(f"{path}:{lineno}: unknown domain label {domain_s!r}") from None
            u = users.intern(user_s)
            v = items.intern(item_s)
            out.append(Interaction(user=u, item=ItemRef(index=v, domain=d), timestamp=ts))
    return out, LoadedVocabs(users=users, items=items, domains=domains)


class InteractionGraph:
    """Deduplicated multi-domain interaction graph with per-domain adjacency.

    Immutable after construction; safe for concurrent readers.  Built via
    :func:`build_graph`.
    """

    def __init__(self, num_users, num_items, domains, item_domain, edges):
        # edges: (n, 2) int64 array of unique (user, item), item_domain: (num_items,)
        self.num_users = num_users
        self.num_items = num_items
        self.domains = list(domains)
        self.item_domain = np.asarray(item_domain, dtype=np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else np.array([], dtype=np.int64)
        self._edges = edges[order] if len(edges) else edges.reshape(0, 2)
        self._edge_domain = (
            self.item_domain[self._edges[:, 1]] if len(self._edges) else np.array([], dtype=np.int64)
        )

        self.items_by_domain = [
            np.flatnonzero(self.item_domain == d.index).astype(np.int64) for d in self.domains
        ]

        self._adj_all = [np.array([], dtype=np.int64)] * num_users
        self._adj_dom = [[np.array([], dtype=np.int64)] * len(self.domains) for _ in range(num_users)]
        if len(self._edges):
            users = self._edges[:, 0]
            starts = np.searchsorted(users, np.arange(num_users), side="left")
            ends = np.searchsorted(users, np.arange(num_users), side="right")
            for u in range(num_users):
                if starts[u] == ends[u]:
                    continue
                items = self._edges[starts[u]:ends[u], 1]
                self._adj_all[u] = items  # already sorted by lexsort
                doms = self.item_domain[items]
                for d in range(len(self.domains)):
                    sel = items[doms == d]
                    if len(sel):
                        self._adj_dom[u][d] = sel
        self._pos_sets = [frozenset(a.tolist()) for a in self._adj_all]

        self.num_interactions = len(self._edges)
        self.interactions_per_domain = np.array(
            [int((self._edge_domain == d).sum()) for d in range(len(self.domains))], dtype=np.int64
        )
        self.users_per_domain = np.array(
            [sum(1 for u in range(num_users) if len(self._adj_dom[u][d])) for d in range(len(self.domains))],
            dtype=np.int64,
        )

    def edges(self):
        """(n, 3) array of (user, item, domain) in deterministic order."""
        return np.column_stack([self._edges, self._edge_domain])

    def neighbor_indices(self, user):
        """Sorted item indices of N(u) across all domains."""
        return self._adj_all[user]

    def adjacency(self, user, domain):
        """Sorted item indices the user interacted with in one domain."""
        return self._adj_dom[user][domain]

    def positives(self, user):
        """Frozen set of all train-positive item indices for the user."""
        return self._pos_sets[user]


def build_graph(interactions, domains, num_users=None, num_items=None, item_domain=None):
    """Build a deduplicated :class:`InteractionGraph` from raw interactions.

    ``domains`` is a list of :class:`DomainId` (or names).  ``item_domain``
    optionally pre-assigns items to domains (needed for items that never
    occur in ``interactions``); rows must agree with it.
    """
    if domains and not isinstance(domains[0], DomainId):
        domains = [DomainId(index=i, name=str(n)) for i, n in enumerate(domains)]
    n_dom = len(domains)
    max_u = max((it.user for it in interactions), default=-1)
    max_v = max((it.item.index for it in interactions), default=-1)
    num_users = num_users if num_users is not None else max_u + 1
    num_items = num_items if num_items is not None else max_v + 1
    if max_u >= num_users or max_v >= num_items:
        raise DataError("interaction index out of vocabulary bounds")

    dom_of = np.full(num_items, -1, dtype=np.int64)
    if item_domain is not None:
        dom_arr = np.asarray(item_domain, dtype=np.int64)
        if dom_arr.shape != (num_items,):
            raise DataError("item_domain length does not match num_items")
        dom_of[:] = dom_arr

    seen = set()
    edges = []
    for it in interactions:
        v, d = it.item.index, it.item.domain
        if not (0 <= it.user < num_users) or not (0 <= v < num_items) or not (0 <= d < n_dom):
            raise DataError(f"interaction index out of bounds: {it}")
        if dom_of[v] == -1:
            dom_of[v] = d
        elif dom_of[v] != d:
            raise DataError(
                f"item {v} assigned to two domains ({domains[dom_of[v]].name}, {domains[d].name})"
            )
        key = (it.user, v)
        if key not in seen:
            seen.add(key)
            edges.append(key)
    edge_arr = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), dtype=np.int64)
    return InteractionGraph(num_users, num_items, domains, dom_of, edge_arr)


def neighbors(graph, user):
    """N(u): every item the user interacted with, all domains, sorted by index."""
    if not (0 <= user < graph.num_users):
        raise DataError(f"user index {user} out of range")
    return [ItemRef(index=int(i), domain=int(graph.item_domain[i])) for i in graph.neighbor_indices(user)]


@dataclass
class KnowledgeGraph:
    """Triple store ``(head, relation, tail)`` over dense entity/relation indices."""

    num_entities: int
    num_relations: int
    triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        arr = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if len(arr):
            _, first = np.unique(arr, axis=0, return_index=True)
            arr = arr[np.sort(first)]  # dedup, keep first occurrence
        self.triples = arr

    def __len__(self):
        return len(self.triples)


ItemEntityLinks = dict  # partial map: item index -> entity index


@dataclass
class DatasetBundle:
    """Train graph, eval interactions, KG, item-entity links and vocabularies."""

    train: InteractionGraph
    eval_interactions: list
    kg: KnowledgeGraph
    links: ItemEntityLinks
    domains: list
    user_names: list
    item_names: list
    entity_names: list
    relation_names: list
    # Raw train rows with timestamps; the graph itself only keeps the edge set.
    train_interactions: list | None = None

    def eval_positive_items(self, user, domain):
        """Item indices of the user's eval interactions in one domain."""
        return {
            it.item.index
            for it in self.eval_interactions
            if it.user == user and it.item.domain == domain
        }


def zero_shot_users(bundle, domain):
    """Users evaluated in ``domain`` that have no train interaction there."""
    if not (0 <= domain < len(bundle.domains)):
        raise DataError(f"domain index {domain} out of range")
    users = set()
    for it in bundle.eval_interactions:
        if it.item.domain == domain and len(bundle.train.adjacency(it.user, domain)) == 0:
            users.add(it.user)
    return users


def sparsity(graph, domain):
    """1 - |I_d| / (|U_d| * |V_d|) with |U_d| the users active in the domain."""
    if not (0 <= domain < len(graph.domains)):
        raise DataError(f"domain index {domain} out of range")
    n_users = int(graph.users_per_domain[domain])
    n_items = len(graph.items_by_domain[domain])
    if n_users == 0 or n_items == 0:
        raise DataError(f"domain {graph.domains[domain].name} has no interactions or no items")
    n_edges = int(graph.interactions_per_domain[domain])
    return 1.0 - n_edges / (n_users * n_items)


def sparsity_from_counts(num_users, num_items, num_edges):
    """Same formula from raw counts (e.g. published dataset statistics)."""
    if num_users <= 0 or num_items <= 0:
        raise DataError("sparsity needs at least one active user and one item")
    return 1.0 - num_edges / (num_users * num_items)


def validate_bundle(bundle):
    """Check every bundle invariant; returns violations as strings (empty = ok)."""
    v = []
    g = bundle.train
    n_dom = len(bundle.domains)

    for i, it in enumerate(bundle.eval_interactions):
        if not (0 <= it.user < g.num_users):
            v.append(f"index-range: eval interaction {i} user {it.user} out of [0,{g.num_users})")
            continue
        if not (0 <= it.item.index < g.num_items):
            v.append(f"index-range: eval interaction {i} item {it.item.index} out of [0,{g.num_items})")
            continue
        if not (0 <= it.item.domain < n_dom):
            v.append(f"index-range: eval interaction {i} domain {it.item.domain} out of [0,{n_dom})")
            continue
        if g.item_domain[it.item.index] not in (-1, it.item.domain):
            v.append(
                f"domain-partition: eval interaction {i} places item {it.item.index} in domain "
                f"{it.item.domain}, train graph has {int(g.item_domain[it.item.index])}"
            )
        if it.item.index in g.positives(it.user):
            v.append(
                f"previously unseen: eval pair (user={it.user}, item={it.item.index}) "
                "already present in the train graph"
            )

    for j, (h, r, t) in enumerate(bundle.kg.triples):
        if not (0 <= h < bundle.kg.num_entities) or not (0 <= t < bundle.kg.num_entities):
            v.append(f"index-range: triple {j} entity out of [0,{bundle.kg.num_entities})")
        if not (0 <= r < bundle.kg.num_relations):
            v.append(f"index-range: triple {j} relation {r} out of [0,{bundle.kg.num_relations})")

    for item, ent in bundle.links.items():
        if not (0 <= item < g.num_items):
            v.append(f"index-range: link item {item} out of [0,{g.num_items})")
        if not (0 <= ent < bundle.kg.num_entities):
            v.append(f"index-range: link entity {ent} out of [0,{bundle.kg.num_entities})")

    total = int(g.interactions_per_domain.sum())
    if total != g.num_interactions:
        v.append(f"domain-partition: sum of per-domain edges {total} != |I| {g.num_interactions}")
    return v
