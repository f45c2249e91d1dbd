import hashlib
import json
import os

import pytest

from kgmd.cli import main
from kgmd.data import sparsity
from kgmd.bundle_io import load_bundle

SMALL_GEN = [
    "--set", "num_users=120",
    "--set", "items_per_domain=30,25,20",
    "--set", "num_genres=4",
    "--set", "interactions_per_user=4,3,3",
]
SMALL_TRAIN = ["--set", "epochs=1", "--set", "embedding_dim=8"]


def run(args):
    return main(args)


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "bundle")
    assert run(["gen", "--out", out] + SMALL_GEN) == 0
    return out


def file_digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestGen:
    def test_writes_bundle_and_meta(self, bundle_dir):
        assert os.path.exists(os.path.join(bundle_dir, "meta.json"))
        assert os.path.exists(os.path.join(bundle_dir, "config.resolved.cfg"))
        assert os.path.exists(os.path.join(bundle_dir, "ground_truth.json"))

    def test_zero_users_is_a_config_error(self, tmp_path):
        assert run(["gen", "--out", str(tmp_path / "x"), "--set", "num_users=0"]) == 2

    def test_unknown_key_rejected(self, tmp_path):
        assert run(["gen", "--out", str(tmp_path / "x"), "--set", "nope=1"]) == 2

    def test_unknown_key_in_config_file_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("num_users = 50\nwhat_is_this = 3\n", encoding="utf-8")
        assert run(["gen", "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 2

    def test_printed_sparsity_matches_operation(self, bundle_dir, capsys):
        # regenerate into a fresh dir to capture the stderr block
        out = bundle_dir + "_again"
        assert run(["gen", "--out", out] + SMALL_GEN) == 0
        err = capsys.readouterr().err
        bundle = load_bundle(out)
        for d in bundle.domains:
            expected = f"{100.0 * sparsity(bundle.train, d.index):.4f}%"
            line = next(l for l in err.splitlines() if l.startswith(d.name))
            assert expected in line

    def test_repeat_runs_are_byte_identical(self, bundle_dir, tmp_path):
        again = str(tmp_path / "again")
        assert run(["gen", "--out", again] + SMALL_GEN) == 0
        for name in os.listdir(bundle_dir):
            a, b = os.path.join(bundle_dir, name), os.path.join(again, name)
            assert file_digest(a) == file_digest(b), name


class TestTrain:
    def test_gnn_without_multi_domain_rejected_before_work(self, bundle_dir, tmp_path):
        out = str(tmp_path / "run")
        assert run(["train", "--bundle", bundle_dir, "--out", out, "--gnn"] + SMALL_TRAIN) == 2
        assert not os.path.exists(out)

    def test_single_domain_variant_writes_per_domain_checkpoints(self, bundle_dir, tmp_path):
        out = str(tmp_path / "base")
        assert run(["train", "--bundle", bundle_dir, "--out", out] + SMALL_TRAIN) == 0
        names = sorted(os.listdir(out))
        assert [n for n in names if n.endswith(".ckpt")] == [
            "model.books.ckpt", "model.music.ckpt", "model.video.ckpt",
        ]
        assert "history.music.tsv" in names

    def test_multi_domain_single_checkpoint(self, bundle_dir, tmp_path):
        out = str(tmp_path / "multd")
        assert run(["train", "--bundle", bundle_dir, "--out", out, "--multi-domain"] + SMALL_TRAIN) == 0
        assert os.path.exists(os.path.join(out, "model.ckpt"))
        assert os.path.exists(os.path.join(out, "history.tsv"))

    def test_same_seed_reruns_byte_identical(self, bundle_dir, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["--bundle", bundle_dir, "--multi-domain", "--kge"] + SMALL_TRAIN
        assert run(["train", "--out", a] + args) == 0
        assert run(["train", "--out", b] + args) == 0
        assert file_digest(os.path.join(a, "model.ckpt")) == file_digest(os.path.join(b, "model.ckpt"))
        assert file_digest(os.path.join(a, "history.tsv")) == file_digest(os.path.join(b, "history.tsv"))

    def test_missing_bundle_is_a_data_error(self, tmp_path):
        assert run(["train", "--bundle", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


@pytest.fixture(scope="module")
def trained_multd(bundle_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train") / "multd")
    assert run(["train", "--bundle", bundle_dir, "--out", out, "--multi-domain"] + SMALL_TRAIN) == 0
    return os.path.join(out, "model.ckpt")


@pytest.fixture(scope="module")
def trained_base(bundle_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train") / "base")
    assert run(["train", "--bundle", bundle_dir, "--out", out] + SMALL_TRAIN) == 0
    return [os.path.join(out, f"model.{d}.ckpt") for d in ("music", "video", "books")]


class TestEval:
    def test_multi_domain_report(self, bundle_dir, trained_multd, tmp_path):
        out = str(tmp_path / "rep")
        assert run(["eval", "--bundle", bundle_dir, "--checkpoint", trained_multd,
                    "--out", out, "--zero-shot"]) == 0
        doc = json.load(open(os.path.join(out, "report.json")))
        assert set(doc["general"]) == {"music", "video", "books", "All", "All_macro"}
        assert doc["zero_shot"] is not None

    def test_single_domain_family_report_has_no_all(self, bundle_dir, trained_base, tmp_path):
        out = str(tmp_path / "rep")
        args = ["eval", "--bundle", bundle_dir, "--out", out]
        for p in trained_base:
            args += ["--checkpoint", p]
        assert run(args) == 0
        doc = json.load(open(os.path.join(out, "report.json")))
        assert set(doc["general"]) == {"music", "video", "books"}

    def test_json_and_tsv_agree(self, bundle_dir, trained_multd, tmp_path):
        out = str(tmp_path / "rep")
        assert run(["eval", "--bundle", bundle_dir, "--checkpoint", trained_multd, "--out", out]) == 0
        doc = json.load(open(os.path.join(out, "report.json")))
        rows = [l.rstrip("\n").split("\t")
                for l in open(os.path.join(out, "report.tsv")).readlines()[1:]]
        assert rows
        for slice_name, domain, metric, value, count in rows:
            block = doc[slice_name][domain]
            got = block["mrr"] if metric == "mrr" else block["hits"][metric.split("@")[1]]
            assert repr(got) == value
            assert str(block["count"]) == count

    def test_digest_mismatch_refused(self, trained_multd, tmp_path):
        # different item vocabulary -> different digests -> refuse
        other = str(tmp_path / "other")
        assert run(["gen", "--out", other] + SMALL_GEN[:2] +
                   ["--set", "items_per_domain=31,25,20"]) == 0
        assert run(["eval", "--bundle", other, "--checkpoint", trained_multd,
                    "--out", str(tmp_path / "rep")]) == 3

    def test_no_zero_shot_bundle_is_flagged_but_ok(self, tmp_path, capsys):
        flat = str(tmp_path / "flat")
        assert run(["gen", "--out", flat] + SMALL_GEN +
                   ["--set", "zero_shot_fraction=0", "--set", "eval_fraction=0.2"]) == 0
        train_out = str(tmp_path / "t")
        assert run(["train", "--bundle", flat, "--out", train_out, "--multi-domain"] + SMALL_TRAIN) == 0
        capsys.readouterr()
        rc = run(["eval", "--bundle", flat, "--checkpoint", os.path.join(train_out, "model.ckpt"),
                  "--out", str(tmp_path / "rep"), "--zero-shot"])
        assert rc == 0
        assert "zero-shot slice is empty" in capsys.readouterr().err


class TestRank:
    def test_k1_prints_single_line(self, bundle_dir, trained_multd, capsys):
        assert run(["rank", "--bundle", bundle_dir, "--checkpoint", trained_multd,
                    "--user", "u00003", "--domain", "music", "-k", "1"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1 and "\t" in out[0]

    def test_known_positive_excluded_and_order_matches_library(self, bundle_dir, trained_multd, capsys):
        from kgmd.checkpoint import load_checkpoint
        from kgmd.evaluate import rank_topk

        bundle = load_bundle(bundle_dir)
        user = 3
        assert run(["rank", "--bundle", bundle_dir, "--checkpoint", trained_multd,
                    "--user", "u00003", "--domain", "music", "-k", "5"]) == 0
        printed = [l.split("\t")[0] for l in capsys.readouterr().out.strip().splitlines()]
        params = load_checkpoint(trained_multd).params
        expected = [bundle.item_names[i] for i, _ in rank_topk(user, 0, 5, params, bundle)]
        assert printed == expected
        positives = {bundle.item_names[i] for i in bundle.train.adjacency(user, 0)}
        assert not positives & set(printed)

    def test_unknown_user_or_domain(self, bundle_dir, trained_multd, tmp_path):
        assert run(["rank", "--bundle", bundle_dir, "--checkpoint", trained_multd,
                    "--user", "ghost", "--domain", "music"]) == 3
        assert run(["rank", "--bundle", bundle_dir, "--checkpoint", trained_multd,
                    "--user", "u00003", "--domain", "podcasts"]) == 3


class TestGradcheck:
    def test_stock_build_passes(self, capsys):
        assert run(["gradcheck", "--dim", "4"]) == 0
        err = capsys.readouterr().err
        assert sum(1 for l in err.splitlines() if l.startswith("[")) >= 6

    def test_fault_injection_fails(self, capsys):
        assert run(["gradcheck", "--dim", "4", "--corrupt-group", "item_emb"]) == 4
