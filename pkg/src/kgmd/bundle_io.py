"""Bundle directory layout: TSV tables, vocabularies and meta.json.

Layout (format version "1"): ``interactions.train.tsv``,
``interactions.eval.tsv``, ``kg.tsv``, ``links.tsv``, ``vocab.users.tsv``,
``vocab.items.tsv`` (with a domain column), ``vocab.entities.tsv``,
``vocab.relations.tsv`` and ``meta.json``.  All files are UTF-8 TSV with
``#`` comment lines ignored; writes are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .data import (
    DatasetBundle,
    DomainId,
    KnowledgeGraph,
    Vocab,
    build_graph,
    load_interactions,
)
from .errors import DataError

FORMAT_VERSION = "1"

_VOCAB_FILES = {
    "users": "vocab.users.tsv",
    "items": "vocab.items.tsv",
    "entities": "vocab.entities.tsv",
    "relations": "vocab.relations.tsv",
}


def _read_rows(path, n_fields):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise DataError(f"{path}:{lineno}: expected {n_fields} fields, got {len(parts)}")
            rows.append((lineno, parts))
    return rows


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def bundle_digests(directory):
    """SHA-256 digests of the vocabulary files, keyed by vocabulary name."""
    out = {}
    for key, fname in _VOCAB_FILES.items():
        out[key] = _sha256_file(os.path.join(directory, fname))
    return out


def write_bundle(bundle, directory, ground_truth=None):
    """Write the bundle layout into ``directory`` (created if missing).

    Byte-identical across repeat calls for the same bundle.  When
    ``ground_truth`` is given it is written as ``ground_truth.json`` (test
    oracle only; never read back by training).
    """
    os.makedirs(directory, exist_ok=True)
    g = bundle.train

    _write_lines(
        os.path.join(directory, _VOCAB_FILES["users"]),
        [f"{i}\t{name}" for i, name in enumerate(bundle.user_names)],
    )
    _write_lines(
        os.path.join(directory, _VOCAB_FILES["items"]),
        [
            f"{i}\t{name}\t{bundle.domains[g.item_domain[i]].name}"
            for i, name in enumerate(bundle.item_names)
        ],
    )
    _write_lines(
        os.path.join(directory, _VOCAB_FILES["entities"]),
        [f"{i}\t{name}" for i, name in enumerate(bundle.entity_names)],
    )
    _write_lines(
        os.path.join(directory, _VOCAB_FILES["relations"]),
        [f"{i}\t{name}" for i, name in enumerate(bundle.relation_names)],
    )

    def fmt(it):
        return (
            f"{bundle.user_names[it.user]}\t{bundle.item_names[it.item.index]}"
            f"\t{bundle.domains[it.item.domain].name}\t{it.timestamp}"
        )

    def sort_key(it):
        return (it.user, it.timestamp, it.item.index)

    if bundle.train_interactions is not None:
        train_lines = [fmt(it) for it in sorted(bundle.train_interactions, key=sort_key)]
    else:
        # Graph only keeps the deduplicated edge set; timestamps default to 0.
        train_lines = [
            f"{bundle.user_names[u]}\t{bundle.item_names[v]}\t{bundle.domains[d].name}\t0"
            for u, v, d in g.edges()
        ]
    _write_lines(os.path.join(directory, "interactions.train.tsv"), train_lines)

    _write_lines(
        os.path.join(directory, "interactions.eval.tsv"),
        [fmt(it) for it in sorted(bundle.eval_interactions, key=sort_key)],
    )

    _write_lines(
        os.path.join(directory, "kg.tsv"),
        [
            f"{bundle.entity_names[h]}\t{bundle.relation_names[r]}\t{bundle.entity_names[t]}"
            for h, r, t in bundle.kg.triples
        ],
    )
    _write_lines(
        os.path.join(directory, "links.tsv"),
        [
            f"{bundle.item_names[item]}\t{bundle.entity_names[ent]}"
            for item, ent in sorted(bundle.links.items())
        ],
    )

    digests = bundle_digests(directory)
    meta = {
        "format_version": FORMAT_VERSION,
        "domains": [d.name for d in bundle.domains],
        "num_users": g.num_users,
        "num_items": g.num_items,
        "num_entities": bundle.kg.num_entities,
        "num_relations": bundle.kg.num_relations,
        "counts": {
            "train": int(g.num_interactions),
            "eval": len(bundle.eval_interactions),
            "triples": int(len(bundle.kg)),
            "links": len(bundle.links),
            "items_per_domain": {
                d.name: int(len(g.items_by_domain[d.index])) for d in bundle.domains
            },
            "train_per_domain": {
                d.name: int(g.interactions_per_domain[d.index]) for d in bundle.domains
            },
        },
        "vocab_digests": digests,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if ground_truth is not None:
        with open(os.path.join(directory, "ground_truth.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(ground_truth.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def load_bundle(directory):
    """Load a bundle directory written by :func:`write_bundle`."""
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{directory}: meta.json not found")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported bundle format version {meta.get('format_version')!r}")

    def read_vocab(key, n_fields=2):
        rows = _read_rows(os.path.join(directory, _VOCAB_FILES[key]), n_fields)
        names = []
        extra = []
        for lineno, parts in rows:
            if int(parts[0]) != len(names):
                raise DataError(f"{_VOCAB_FILES[key]}:{lineno}: non-dense index {parts[0]}")
            names.append(parts[1])
            if n_fields > 2:
                extra.append(parts[2])
        return names, extra

    user_names, _ = read_vocab("users")
    item_names, item_domain_names = read_vocab("items", n_fields=3)
    entity_names, _ = read_vocab("entities")
    relation_names, _ = read_vocab("relations")

    domains = [DomainId(index=i, name=n) for i, n in enumerate(meta["domains"])]
    dom_index = {d.name: d.index for d in domains}
    try:
        item_domain = np.array([dom_index[n] for n in item_domain_names], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"item vocabulary references unknown domain {exc.args[0]!r}") from None

    users = Vocab(user_names, frozen=True)
    items = Vocab(item_names, frozen=True)
    dom_vocab = Vocab([d.name for d in domains], frozen=True)

    train, _ = load_interactions(os.path.join(directory, "interactions.train.tsv"), users, items, dom_vocab)
    eval_rows, _ = load_interactions(os.path.join(directory, "interactions.eval.tsv"), users, items, dom_vocab)

    graph = build_graph(
        train, domains, num_users=len(user_names), num_items=len(item_names), item_domain=item_domain
    )

    entities = Vocab(entity_names, frozen=True)
    relations = Vocab(relation_names, frozen=True)
    triples = []
    for lineno, (h, r, t) in _read_rows(os.path.join(directory, "kg.tsv"), 3):
        triples.append((entities.index(h), relations.index(r), entities.index(t)))
    kg = KnowledgeGraph(
        num_entities=len(entity_names),
        num_relations=len(relation_names),
        triples=np.array(triples, dtype=np.int64) if triples else np.zeros((0, 3), dtype=np.int64),
    )

    links = {}
    for lineno, (item_s, ent_s) in _read_rows(os.path.join(directory, "links.tsv"), 2):
        item, ent = items.index(item_s), entities.index(ent_s)
        if item in links and links[item] != ent:
            raise DataError(f"links.tsv:{lineno}: item {item_s!r} linked to two entities")
        links[item] = ent

    return DatasetBundle(
        train=graph,
        eval_interactions=eval_rows,
        kg=kg,
        links=links,
        domains=domains,
        user_names=user_names,
        item_names=item_names,
        entity_names=entity_names,
        relation_names=relation_names,
        train_interactions=train,
    )
