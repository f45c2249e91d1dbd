"""Flat ``key = value`` run configuration shared by all CLI commands.

Unknown keys are rejected; every run echoes its fully-resolved config into
the output directory so a run is reproducible from that file alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .evaluate import EvalConfig
from .params import ModelConfig
from .synthgen import SynthConfig
from .training import TrainConfig

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(s):
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {s!r}") from None


def _parse_opt_float(s):
    s = s.strip().lower()
    return None if s in ("none", "") else float(s)


def _parse_opt_int(s):
    s = s.strip().lower()
    return None if s in ("none", "") else int(s)


def _parse_csv(cast):
    def parse(s):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ConfigError("expected a comma-separated list")
        return tuple(cast(p) for p in parts)

    return parse


def _parse_scalar_or_csv(cast):
    def parse(s):
        if "," in s:
            return _parse_csv(cast)(s)
        return cast(s)

    return parse


_PARSERS = {
    # shared
    "seed": int,
    # synthgen
    "num_users": int,
    "items_per_domain": _parse_csv(int),
    "num_genres": _parse_scalar_or_csv(int),
    "latent_dim": int,
    "tau": float,
    "interactions_per_user": _parse_scalar_or_csv(float),
    "zero_shot_fraction": _parse_scalar_or_csv(float),
    "eval_fraction": float,
    "kg_extra_relations": int,
    "domain_names": _parse_csv(str),
    # model
    "embedding_dim": int,
    "multi_domain": _parse_bool,
    "kge": _parse_bool,
    "gnn": _parse_bool,
    "interaction_block": str,
    "gnn_layers": int,
    "gnn_neighbor_cap": int,
    "r_d_hidden": _parse_opt_int,
    "mint_hidden": _parse_opt_int,
    "kge_use_block_entity": _parse_bool,
    # training
    "epochs": int,
    "batch_size": int,
    "k_neg": int,
    "margin_rec": float,
    "margin_kge": float,
    "learning_rate": float,
    "optimizer": str,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "kg_ratio": int,
    "kge_weight": float,
    "entity_renorm": _parse_bool,
    "grad_clip_norm": _parse_opt_float,
    # eval
    "hits_k": _parse_csv(int),
    "eval_zero_shot": _parse_bool,
}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls):
        synth = SynthConfig()
        mc = ModelConfig()
        tc = TrainConfig()
        ec = EvalConfig()
        values = {
            "seed": synth.seed,
            "num_users": synth.num_users,
            "items_per_domain": tuple(synth.items_per_domain),
            "num_genres": synth.num_genres,
            "latent_dim": synth.latent_dim,
            "tau": synth.tau,
            "interactions_per_user": tuple(synth.interactions_per_user),
            "zero_shot_fraction": synth.zero_shot_fraction,
            "eval_fraction": synth.eval_fraction,
            "kg_extra_relations": synth.kg_extra_relations,
            "domain_names": tuple(synth.domain_names),
            "embedding_dim": mc.embedding_dim,
            "multi_domain": mc.multi_domain,
            "kge": mc.kge,
            "gnn": mc.gnn,
            "interaction_block": mc.interaction_block,
            "gnn_layers": mc.gnn_layers,
            "gnn_neighbor_cap": mc.gnn_neighbor_cap,
            "r_d_hidden": mc.r_d_hidden,
            "mint_hidden": mc.mint_hidden,
            "kge_use_block_entity": mc.kge_use_block_entity,
            "epochs": tc.epochs,
            "batch_size": tc.batch_size,
            "k_neg": tc.k_neg,
            "margin_rec": tc.margin_rec,
            "margin_kge": tc.margin_kge,
            "learning_rate": tc.learning_rate,
            "optimizer": tc.optimizer,
            "adam_beta1": tc.adam_beta1,
            "adam_beta2": tc.adam_beta2,
            "adam_eps": tc.adam_eps,
            "kg_ratio": tc.kg_ratio,
            "kge_weight": tc.kge_weight,
            "entity_renorm": tc.entity_renorm,
            "grad_clip_norm": tc.grad_clip_norm,
            "hits_k": tuple(ec.ks),
            "eval_zero_shot": False,
        }
        return cls(values=values)

    def set(self, key, raw):
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = _PARSERS[key](raw)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None

    def apply_file(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                try:
                    self.set(key.strip(), raw.strip())
                except ConfigError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None

    def apply_overrides(self, pairs):
        for pair in pairs or []:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} must look like key=value")
            key, _, raw = pair.partition("=")
            self.set(key.strip(), raw.strip())

    def synth_config(self):
        v = self.values
        return SynthConfig(
            seed=v["seed"],
            num_users=v["num_users"],
            items_per_domain=tuple(v["items_per_domain"]),
            num_genres=v["num_genres"],
            latent_dim=v["latent_dim"],
            tau=v["tau"],
            interactions_per_user=v["interactions_per_user"],
            zero_shot_fraction=v["zero_shot_fraction"],
            eval_fraction=v["eval_fraction"],
            kg_extra_relations=v["kg_extra_relations"],
            domain_names=tuple(v["domain_names"]),
        )

    def model_config(self):
        v = self.values
        return ModelConfig(
            embedding_dim=v["embedding_dim"],
            multi_domain=v["multi_domain"],
            kge=v["kge"],
            gnn=v["gnn"],
            interaction_block=v["interaction_block"],
            gnn_layers=v["gnn_layers"],
            gnn_neighbor_cap=v["gnn_neighbor_cap"],
            r_d_hidden=v["r_d_hidden"],
            mint_hidden=v["mint_hidden"],
            kge_use_block_entity=v["kge_use_block_entity"],
        )

    def train_config(self):
        v = self.values
        return TrainConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            k_neg=v["k_neg"],
            margin_rec=v["margin_rec"],
            margin_kge=v["margin_kge"],
            learning_rate=v["learning_rate"],
            optimizer=v["optimizer"],
            adam_beta1=v["adam_beta1"],
            adam_beta2=v["adam_beta2"],
            adam_eps=v["adam_eps"],
            kg_ratio=v["kg_ratio"],
            kge_weight=v["kge_weight"],
            entity_renorm=v["entity_renorm"],
            grad_clip_norm=v["grad_clip_norm"],
            seed=v["seed"],
        )

    def eval_config(self, zero_shot=None):
        zs = self.values["eval_zero_shot"] if zero_shot is None else zero_shot
        return EvalConfig(ks=tuple(self.values["hits_k"]), zero_shot=zs)

    def echo_lines(self):
        def fmt(value):
            if value is None:
                return "none"
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, tuple):
                return ",".join(fmt(x) for x in value)
            if isinstance(value, float):
                return repr(value)
            return str(value)

        return [f"{k} = {fmt(self.values[k])}" for k in sorted(self.values)]

    def echo_to(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.echo_lines():
                fh.write(line + "\n")


def load_run_config(config_path=None, overrides=None):
    """Defaults, then the config file, then ``key=value`` overrides."""
    rc = RunConfig.defaults()
    if config_path:
        rc.apply_file(config_path)
    rc.apply_overrides(overrides)
    return rc
