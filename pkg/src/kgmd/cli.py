"""Command line interface: gen / train / eval / rank / gradcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 check failure.
Human-readable output goes to stderr; reports and checkpoints go to files
(the ``rank`` listing is the one stdout producer, as machine-readable TSV).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .bundle_io import bundle_digests, load_bundle, write_bundle
from .checkpoint import load_checkpoint, save_checkpoint
from .data import sparsity, validate_bundle
from .errors import CheckpointError, ConfigError, DataError, TrainingError
from .evaluate import evaluate
from .evaluate import rank_topk
from .gradcheck import grad_check_all
from .runconfig import load_run_config
from .synthgen import generate
from .training import train, train_all_domains


def _err(msg):
    print(msg, file=sys.stderr)


def _echo_config(rc, out_dir):
    rc.echo_to(os.path.join(out_dir, "config.resolved.cfg"))


def cmd_gen(args):
    rc = load_run_config(args.config, args.set)
    synth = rc.synth_config()
    bundle, truth = generate(synth)
    os.makedirs(args.out, exist_ok=True)
    write_bundle(bundle, args.out, ground_truth=truth)
    _echo_config(rc, args.out)
    _err(f"bundle written to {args.out}")
    _err(f"{'domain':<10}{'users':>8}{'items':>8}{'edges':>10}  sparsity")
    g = bundle.train
    for d in bundle.domains:
        s = sparsity(g, d.index)
        _err(
            f"{d.name:<10}{int(g.users_per_domain[d.index]):>8}"
            f"{len(g.items_by_domain[d.index]):>8}"
            f"{int(g.interactions_per_domain[d.index]):>10}  {100.0 * s:.4f}%"
        )
    _err(f"train interactions: {g.num_interactions}, eval interactions: {len(bundle.eval_interactions)}")
    return 0


def _write_history(path, history):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\trec_loss\tkge_loss\n")
        for row in history:
            kge = "" if row.get("kge_loss") is None else repr(row["kge_loss"])
            rec = "" if row.get("rec_loss") is None else repr(row["rec_loss"])
            fh.write(f"{row['epoch']}\t{rec}\t{kge}\n")


def cmd_train(args):
    rc = load_run_config(args.config, args.set)
    if args.multi_domain:
        rc.values["multi_domain"] = True
    if args.kge:
        rc.values["kge"] = True
    if args.gnn:
        rc.values["gnn"] = True
    if args.block:
        rc.values["interaction_block"] = args.block
    model_config = rc.model_config().validate()  # reject inconsistent flags up front
    train_config = rc.train_config().validate()

    bundle = load_bundle(args.bundle)
    violations = validate_bundle(bundle)
    if violations:
        for v in violations[:10]:
            _err(f"bundle violation: {v}")
        raise DataError(f"bundle failed validation with {len(violations)} violation(s)")
    digests = bundle_digests(args.bundle)

    os.makedirs(args.out, exist_ok=True)
    _echo_config(rc, args.out)
    if model_config.multi_domain:
        params, history, opt = train(bundle, model_config, train_config, return_optimizer=True)
        path = os.path.join(args.out, "model.ckpt")
        save_checkpoint(params, opt, path, digests, step=opt.t, seed=train_config.seed,
                        train_config=train_config)
        _write_history(os.path.join(args.out, "history.tsv"), history)
        _err(f"checkpoint written to {path}")
    else:
        for d in range(len(bundle.domains)):
            name = bundle.domains[d].name
            params, history, opt = train(bundle, model_config, train_config, domain=d,
                                         return_optimizer=True)
            path = os.path.join(args.out, f"model.{name}.ckpt")
            save_checkpoint(params, opt, path, digests, step=opt.t, seed=train_config.seed,
                            domain=d, train_config=train_config)
            _write_history(os.path.join(args.out, f"history.{name}.tsv"), history)
            _err(f"checkpoint written to {path}")
    return 0


def _load_params_arg(paths, digests):
    """One multi-domain checkpoint, or a {domain: params} family."""
    cps = [load_checkpoint(p, expected_digests=digests) for p in paths]
    if len(cps) == 1 and cps[0].domain is None:
        return cps[0].params
    by_domain = {}
    for cp in cps:
        if cp.domain is None:
            raise DataError("cannot mix multi-domain and per-domain checkpoints")
        if cp.domain in by_domain:
            raise DataError(f"two checkpoints for domain {cp.domain}")
        by_domain[cp.domain] = cp.params
    return by_domain


def cmd_eval(args):
    rc = load_run_config(args.config, args.set)
    bundle = load_bundle(args.bundle)
    digests = bundle_digests(args.bundle)
    params = _load_params_arg(args.checkpoint, digests)
    eval_config = rc.eval_config(zero_shot=True if args.zero_shot else None)
    report = evaluate(bundle, params, eval_config=eval_config)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(rc, args.out)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    with open(os.path.join(args.out, "report.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("slice\tdomain\tmetric\tvalue\tcount\n")
        for row in report.to_tsv_rows():
            fh.write("\t".join(str(x) for x in row) + "\n")
    if report.zero_shot is not None and not report.zero_shot:
        _err("zero-shot slice is empty (no zero-shot users in this bundle)")
    for name, m in report.general.items():
        hits = " ".join(f"h@{k}={m.hits[k]:.4f}" for k in sorted(m.hits))
        _err(f"general {name:<10} n={m.count:<6} mrr={m.mrr:.4f} {hits}")
    if report.zero_shot:
        for name, m in report.zero_shot.items():
            hits = " ".join(f"h@{k}={m.hits[k]:.4f}" for k in sorted(m.hits))
            _err(f"zero-shot {name:<10} n={m.count:<6} mrr={m.mrr:.4f} {hits}")
    _err(f"report written to {args.out}")
    return 0


def cmd_rank(args):
    bundle = load_bundle(args.bundle)
    digests = bundle_digests(args.bundle)
    params = _load_params_arg(args.checkpoint, digests)
    dom_index = {d.name: d.index for d in bundle.domains}
    if args.domain not in dom_index:
        raise DataError(f"unknown domain {args.domain!r}; bundle has {sorted(dom_index)}")
    d = dom_index[args.domain]
    try:
        user = bundle.user_names.index(args.user)
    except ValueError:
        raise DataError(f"unknown user id {args.user!r}") from None
    top = rank_topk(user, d, args.k, params, bundle, filter_known=True)
    for item, score_value in top:
        print(f"{bundle.item_names[item]}\t{score_value!r}")
    return 0


def cmd_gradcheck(args):
    reports = grad_check_all(embedding_dim=args.dim, seed=args.seed,
                             corrupt_group=args.corrupt_group)
    ok = True
    for report in reports:
        _err(report.format())
        ok = ok and report.passed
    if not ok:
        _err("gradient check FAILED")
        return 4
    _err("gradient check passed for all variants")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="kgmd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"kgmd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--multi-domain", action="store_true", dest="multi_domain")
    p.add_argument("--kge", action="store_true")
    p.add_argument("--gnn", action="store_true")
    p.add_argument("--block", choices=("mint", "cnc"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoint(s) on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zero-shot", action="store_true", dest="zero_shot")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank", help="print top-k recommendations for one user")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("gradcheck", help="finite-difference check across all variants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--corrupt-group", dest="corrupt_group", help="fault injection for testing")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except (DataError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        _err(f"data error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
