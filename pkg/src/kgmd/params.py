"""Model configuration, parameter tables and gradient accumulation.

A :class:`Parameters` object owns every embedding table and network weight
of one model variant as named float64 arrays in a fixed registry order; the
order is the serialization order of checkpoints and the grouping used by
gradient checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

VARIANT_BLOCKS = ("mint", "cnc")


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 32
    multi_domain: bool = False
    kge: bool = False
    gnn: bool = False
    interaction_block: str = "mint"
    gnn_layers: int = 2
    gnn_neighbor_cap: int = 64
    r_d_hidden: int | None = None  # default: embedding_dim
    mint_hidden: int | None = None  # default: 2 * embedding_dim
    # Ablation: feed the interaction block's updated entity embedding into the
    # KG objective instead of the raw table row.  Off by default.
    kge_use_block_entity: bool = False

    def validate(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.gnn and not self.multi_domain:
            raise ConfigError("the GNN encoder requires multi_domain")
        if self.interaction_block not in VARIANT_BLOCKS:
            raise ConfigError(f"interaction_block must be one of {VARIANT_BLOCKS}")
        if self.gnn and (self.gnn_layers < 1 or self.gnn_neighbor_cap < 1):
            raise ConfigError("gnn_layers and gnn_neighbor_cap must be >= 1")
        return self

    @property
    def rd_hidden_dim(self):
        return self.r_d_hidden if self.r_d_hidden is not None else self.embedding_dim

    @property
    def mint_hidden_dim(self):
        return self.mint_hidden if self.mint_hidden is not None else 2 * self.embedding_dim

    def variant_name(self):
        parts = ["multd"] if self.multi_domain else ["base"]
        if self.kge:
            parts.append("kge")
        if self.gnn:
            parts.append("gnn")
        name = "_".join(parts)
        return {"base_kge": "kge"}.get(name, name)

    def to_json_dict(self):
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d).validate()

    def digest(self):
        payload = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class Dims:
    num_users: int
    num_items: int
    num_entities: int
    num_relations: int
    num_domains: int

    @classmethod
    def from_bundle(cls, bundle):
        return cls(
            num_users=bundle.train.num_users,
            num_items=bundle.train.num_items,
            num_entities=bundle.kg.num_entities,
            num_relations=bundle.kg.num_relations,
            num_domains=len(bundle.domains),
        )

    def to_json_dict(self):
        return asdict(self)


GNN_WEIGHT_NAMES = ("wq", "wk", "wv", "ws", "wa")


def parameter_registry(config, dims):
    """Ordered list of (name, shape, kind); kind in {table, dense, bias}."""
    h = config.embedding_dim
    entries = [("item_emb", (dims.num_items, h), "table")]
    if not config.multi_domain:
        entries.append(("user_emb", (dims.num_users, h), "table"))
    elif not config.gnn:
        entries.append(("user_shared_emb", (dims.num_users, h), "table"))
        for d in range(dims.num_domains):
            entries.append((f"user_dom_emb.{d}", (dims.num_users, h), "table"))
    else:
        entries.append(("domain_emb", (dims.num_domains, h), "table"))
    if config.kge:
        entries.append(("entity_emb", (dims.num_entities, h), "table"))
        entries.append(("relation_emb", (dims.num_relations, h), "table"))
    if config.multi_domain:
        hr = config.rd_hidden_dim
        for d in range(dims.num_domains):
            entries += [
                (f"rd.{d}.w1", (hr, 2 * h), "dense"),
                (f"rd.{d}.b1", (hr,), "bias"),
                (f"rd.{d}.w2", (h, hr), "dense"),
                (f"rd.{d}.b2", (h,), "bias"),
            ]
    if config.kge:
        if config.interaction_block == "mint":
            hm = config.mint_hidden_dim
            entries += [
                ("mint.w1", (hm, 2 * h), "dense"),
                ("mint.b1", (hm,), "bias"),
                ("mint.w2", (2 * h, hm), "dense"),
                ("mint.b2", (2 * h,), "bias"),
            ]
        else:
            entries += [
                ("cnc.w_vv", (h,), "dense"),
                ("cnc.w_ev", (h,), "dense"),
                ("cnc.w_ve", (h,), "dense"),
                ("cnc.w_ee", (h,), "dense"),
                ("cnc.b_v", (h,), "bias"),
                ("cnc.b_e", (h,), "bias"),
            ]
    if config.gnn:
        groups = ["shared"] + [f"dom.{d}" for d in range(dims.num_domains)]
        for grp in groups:
            for w in GNN_WEIGHT_NAMES:
                shape = (h,) if w == "wa" else (h, h)
                entries.append((f"gnn.{grp}.{w}", shape, "dense"))
    return entries


class Parameters:
    """All tables and weights of one configured variant, in registry order."""

    def __init__(self, config, dims, arrays):
        self.config = config
        self.dims = dims
        self._registry = parameter_registry(config, dims)
        self._arrays = arrays
        for name, shape, _ in self._registry:
            if arrays[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {arrays[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def names(self):
        return [name for name, _, _ in self._registry]

    def table_names(self):
        return [name for name, _, kind in self._registry if kind == "table"]

    def kind(self, name):
        for n, _, kind in self._registry:
            if n == name:
                return kind
        raise KeyError(name)

    def copy(self):
        return Parameters(self.config, self.dims, {k: v.copy() for k, v in self._arrays.items()})

    def digest(self):
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def allclose(self, other, **kw):
        return self.names() == other.names() and all(
            np.allclose(self[n], other[n], **kw) for n in self.names()
        )

    def equal_bytes(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[n], other[n]) for n in self.names()
        )


def init_parameters(config, dims, seed):
    """Seeded init: Uniform(-1/sqrt(h), 1/sqrt(h)) everywhere, biases zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(config.embedding_dim)
    arrays = {}
    for name, shape, kind in parameter_registry(config, dims):
        if kind == "bias":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return Parameters(config, dims, arrays)


class GradBuffer:
    """Additive gradient accumulator.

    Table gradients stay sparse (row index + row gradient pairs, consolidated
    on demand); network weights accumulate densely.
    """

    def __init__(self, params):
        self._params = params
        self._dense = {}
        self._rows = {}

    def add_dense(self, name, grad):
        if name in self._dense:
            self._dense[name] += grad
        else:
            self._dense[name] = np.array(grad, dtype=float)

    def add_rows(self, name, idx, grads):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        grads = np.atleast_2d(np.asarray(grads, dtype=float))
        if len(idx):
            self._rows.setdefault(name, []).append((idx, grads))

    def add_row(self, name, idx, grad):
        self.add_rows(name, np.array([idx]), np.asarray(grad)[None, :])

    def dense_names(self):
        return sorted(self._dense)

    def table_names(self):
        return sorted(self._rows)

    def dense_grad(self, name):
        return self._dense[name]

    def consolidated_rows(self, name):
        """(unique_sorted_idx, summed_grads) for one table.

        Rows whose summed gradient is exactly zero are dropped: they are not
        "touched" (no update, no renormalization), which keeps inactive-hinge
        batches and zero-weighted objectives from perturbing parameters.
        """
        chunks = self._rows.get(name, [])
        if not chunks:
            h = self._params[name].shape[1]
            return np.zeros(0, dtype=np.int64), np.zeros((0, h))
        idx = np.concatenate([c[0] for c in chunks])
        grads = np.concatenate([c[1] for c in chunks], axis=0)
        uniq, inv = np.unique(idx, return_inverse=True)
        out = np.zeros((len(uniq), grads.shape[1]))
        np.add.at(out, inv, grads)
        nonzero = np.any(out != 0.0, axis=1)
        return uniq[nonzero], out[nonzero]

    def row_grads(self, name):
        """Consolidated sparse gradient of one table as {row: vector}."""
        uniq, grads = self.consolidated_rows(name)
        return {int(i): grads[j] for j, i in enumerate(uniq)}

    def touched_rows(self, name):
        uniq, _ = self.consolidated_rows(name)
        return uniq

    def dense_grads_for(self, params):
        """Materialize the full gradient of every parameter (tests / gradcheck)."""
        out = {}
        for name in params.names():
            if params.kind(name) == "table":
                full = np.zeros_like(params[name])
                uniq, grads = self.consolidated_rows(name)
                if len(uniq):
                    full[uniq] = grads
                out[name] = full
            else:
                out[name] = np.array(self._dense.get(name, np.zeros_like(params[name])))
        return out

    def global_norm(self):
        total = 0.0
        for g in self._dense.values():
            total += float(np.sum(g * g))
        for name in list(self._rows):
            _, grads = self.consolidated_rows(name)
            total += float(np.sum(grads * grads))
        return float(np.sqrt(total))

    def clear(self):
        self._dense.clear()
        self._rows.clear()
