import hashlib
import os

import numpy as np
import pytest

from kgmd.bundle_io import load_bundle, write_bundle
from kgmd.data import validate_bundle, zero_shot_users
from kgmd.errors import ConfigError, DataError
from kgmd.synthgen import SynthConfig, generate

SMALL = SynthConfig(
    seed=5,
    num_users=200,
    items_per_domain=(50, 40, 30),
    num_genres=5,
    interactions_per_user=(5.0, 4.0, 3.0),
)


def dir_digest(directory):
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        h.update(name.encode())
        h.update(open(os.path.join(directory, name), "rb").read())
    return h.hexdigest()


class TestConfigValidation:
    def test_zero_users_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(num_users=0).resolved()

    def test_fraction_out_of_range(self):
        with pytest.raises(ConfigError):
            SynthConfig(eval_fraction=1.0).resolved()

    def test_zero_shot_fractions_must_fit_disjointly(self):
        with pytest.raises(ConfigError):
            SynthConfig(zero_shot_fraction=(0.5, 0.4, 0.3)).resolved()

    def test_catalog_too_small_for_request(self):
        cfg = SynthConfig(seed=0, num_users=20, items_per_domain=(20, 30, 30),
                          interactions_per_user=(60.0, 2.0, 2.0))
        with pytest.raises(DataError, match="exceed domain catalog"):
            generate(cfg)


class TestGenerate:
    def test_no_eval_when_fractions_zero(self):
        cfg = SynthConfig(seed=1, num_users=50, items_per_domain=(20, 20, 20),
                          interactions_per_user=(3.0, 3.0, 3.0),
                          zero_shot_fraction=0.0, eval_fraction=0.0)
        bundle, _ = generate(cfg)
        assert bundle.eval_interactions == []

    def test_single_genre_degenerates_cleanly(self):
        cfg = SynthConfig(seed=1, num_users=40, items_per_domain=(30, 20, 10), num_genres=1,
                          interactions_per_user=(3.0, 2.0, 2.0))
        bundle, truth = generate(cfg)
        assert set(truth.item_genre.tolist()) == {0}
        assert validate_bundle(bundle) == []

    def test_zero_shot_users_have_no_train_edges_and_some_eval(self):
        bundle, truth = generate(SMALL)
        for d in range(3):
            recovered = zero_shot_users(bundle, d)
            assert recovered == set(truth.zero_shot[d].tolist())
            for u in truth.zero_shot[d]:
                assert len(bundle.train.adjacency(int(u), d)) == 0

    def test_train_side_users_cover_at_least_two_domains(self):
        bundle, truth = generate(SMALL)
        zs_any = set()
        for d in range(3):
            zs_any |= set(truth.zero_shot[d].tolist())
        for u in range(bundle.train.num_users):
            active = sum(1 for d in range(3) if len(bundle.train.adjacency(u, d)))
            assert active >= 2, f"user {u} has train interactions in {active} domain(s)"

    def test_eval_never_contains_train_pairs(self):
        bundle, _ = generate(SMALL)
        assert validate_bundle(bundle) == []

    def test_planted_affinity_signal(self):
        bundle, truth = generate(SynthConfig(seed=9))
        rows = bundle.train_interactions
        assert len(rows) >= 10_000
        sampled = np.array(
            [truth.user_domain[it.item.domain][it.user] @ truth.item_latent[it.item.index]
             for it in rows[:10_000]]
        )
        rng = np.random.default_rng(0)
        rand = []
        for it in rows[:10_000]:
            d = it.item.domain
            items = bundle.train.items_by_domain[d]
            v = int(items[rng.integers(0, len(items))])
            rand.append(truth.user_domain[d][it.user] @ truth.item_latent[v])
        assert sampled.mean() > np.mean(rand)

    def test_kg_groups_items_by_latent_similarity(self):
        bundle, truth = generate(SMALL)
        rng = np.random.default_rng(1)
        same, cross = [], []
        for d in range(3):
            items = bundle.train.items_by_domain[d]
            for _ in range(2000):
                i, j = items[rng.integers(0, len(items), size=2)]
                if i == j:
                    continue
                dist = np.linalg.norm(truth.item_latent[i] - truth.item_latent[j])
                if truth.item_genre[i] == truth.item_genre[j]:
                    same.append(dist)
                else:
                    cross.append(dist)
        assert np.mean(same) < np.mean(cross)

    def test_kg_shape(self):
        bundle, _ = generate(SMALL)
        n_items = bundle.train.num_items
        assert bundle.kg.num_entities == n_items + 3 * 5
        assert bundle.kg.num_relations == 1 + SMALL.kg_extra_relations
        assert all(bundle.links[i] == i for i in range(n_items))


class TestWriteBundle:
    def test_write_is_byte_reproducible(self, tmp_path):
        bundle, truth = generate(SMALL)
        a, b = tmp_path / "a", tmp_path / "b"
        write_bundle(bundle, str(a), ground_truth=truth)
        write_bundle(bundle, str(b), ground_truth=truth)
        assert dir_digest(str(a)) == dir_digest(str(b))

    def test_same_seed_same_bytes_different_seed_differs(self, tmp_path):
        b1, t1 = generate(SMALL)
        b2, t2 = generate(SMALL)
        b3, _ = generate(SynthConfig(**{**SMALL.__dict__, "seed": 6}))
        for d, bundle in (("x", b1), ("y", b2), ("z", b3)):
            write_bundle(bundle, str(tmp_path / d))
        digest = lambda d: dir_digest(str(tmp_path / d))
        assert digest("x") == digest("y")
        assert digest("x") != digest("z")

    def test_round_trip_load(self, tmp_path):
        bundle, truth = generate(SMALL)
        out = str(tmp_path / "bundle")
        write_bundle(bundle, out, ground_truth=truth)
        loaded = load_bundle(out)
        assert validate_bundle(loaded) == []
        assert loaded.user_names == bundle.user_names
        assert loaded.item_names == bundle.item_names
        assert np.array_equal(loaded.train.edges(), bundle.train.edges())
        assert np.array_equal(loaded.kg.triples, bundle.kg.triples)
        assert loaded.links == bundle.links
        assert loaded.eval_interactions == sorted(
            bundle.eval_interactions, key=lambda it: (it.user, it.timestamp, it.item.index)
        )

    def test_rewrite_after_load_is_identical(self, tmp_path):
        bundle, _ = generate(SMALL)
        first, second = str(tmp_path / "first"), str(tmp_path / "second")
        write_bundle(bundle, first)
        write_bundle(load_bundle(first), second)
        assert dir_digest(first) == dir_digest(second)
