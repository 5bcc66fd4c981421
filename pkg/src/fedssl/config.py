"""Experiment configuration: schema, strict parsing, defaults, round-tripping.

Configs are plain JSON documents with an explicit ``schema_version``.
Unknown keys are rejected at every level so a typo never silently falls back
to a default.  An empty document resolves to the default desk-scale setup:
5 clients, 2 classes per client, 5 local epochs, and the divergence-aware
EMA strategy with autoscaler tau = 0.7.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugSpec
from .methods import MethodConfig, preset
from .nn import MlpSpec

SCHEMA_VERSION = 1

STRATEGY_KINDS = ("replace", "update_both", "fedema", "constant_mu", "standalone")
DIVERGENCE_GROUP_CHOICES = ("encoder", "encoder+predictor")


class ConfigError(ValueError):
    """A config document is malformed or violates a constraint."""


@dataclass
class AugConfig:
    noise_sigma: float = 1.0
    mask_prob: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1


@dataclass
class DataConfig:
    num_classes: int = 10
    per_class: int = 100
    test_per_class: int = 25
    dim: int = 32
    spread: float = 1.0
    path: str | None = None
    aug: AugConfig = field(default_factory=AugConfig)


@dataclass
class StrategyConfig:
    kind: str = "fedema"
    lambda_: float | None = None
    tau: float | None = None   # fedema with neither value set gets tau = 0.7
    mu_encoder: float | None = None
    mu_predictor: float | None = None


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    method: str = "byol"
    method_overrides: dict = field(default_factory=dict)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    num_clients: int = 5
    clients_per_round: int | None = None
    classes_per_client: int = 2
    rounds: int = 40
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    encoder_hidden: tuple = (64,)
    embedding_dim: int = 32
    predictor_hidden: tuple = (64,)
    data: DataConfig = field(default_factory=DataConfig)
    eval_every: int = 5
    knn_k: int = 5
    linear_epochs: int = 200
    linear_lr: float = 0.5
    workers: int = 1
    divergence_groups: str = "encoder"

    # -- derived objects -----------------------------------------------------

    def method_config(self) -> MethodConfig:
        return preset(self.method, **self.method_overrides)

    def encoder_spec(self) -> MlpSpec:
        widths = (self.data.dim, *self.encoder_hidden, self.embedding_dim)
        normalize = self.method_config().loss_kind == "info_nce_queue"
        return MlpSpec(widths, activation="relu", normalize_output=normalize)

    def predictor_spec(self) -> MlpSpec:
        widths = (self.embedding_dim, *self.predictor_hidden, self.embedding_dim)
        return MlpSpec(widths, activation="relu", standardize_hidden=True)

    def aug_spec(self) -> AugSpec:
        a = self.data.aug
        return AugSpec(noise_sigma=a.noise_sigma, mask_prob=a.mask_prob,
                       scale_range=(a.scale_min, a.scale_max))

    def participants_per_round(self) -> int:
        return self.num_clients if self.clients_per_round is None else self.clients_per_round

    def divergence_group_names(self) -> tuple:
        if self.divergence_groups == "encoder":
            return ("encoder",)
        return ("encoder", "predictor")


# -- validation ----------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.schema_version == SCHEMA_VERSION,
             f"unsupported schema_version {cfg.schema_version}")
    _require(cfg.seed >= 0, "seed must be nonnegative")
    for name in ("num_clients", "local_epochs", "batch_size",
                 "eval_every", "knn_k", "workers", "embedding_dim"):
        _require(getattr(cfg, name) >= 1, f"{name} must be positive")
    _require(cfg.rounds >= 0, "rounds must be nonnegative")
    _require(cfg.linear_epochs >= 0, "linear_epochs must be nonnegative")
    _require(cfg.lr >= 0, "lr must be nonnegative")  # 0 allowed: fixed-point runs
    _require(cfg.linear_lr > 0, "linear_lr must be positive")
    if cfg.clients_per_round is not None:
        _require(1 <= cfg.clients_per_round <= cfg.num_clients,
                 "clients_per_round must lie in [1, num_clients]")
    _require(cfg.divergence_groups in DIVERGENCE_GROUP_CHOICES,
             f"divergence_groups must be one of {DIVERGENCE_GROUP_CHOICES}")

    d = cfg.data
    _require(d.num_classes >= 2, "num_classes must be at least 2")
    _require(d.per_class >= 2, "per_class must be at least 2")
    _require(d.test_per_class >= 1, "test_per_class must be positive")
    _require(d.dim >= 1, "dim must be positive")
    _require(d.spread > 0, "spread must be positive")
    _require(d.aug.noise_sigma >= 0, "noise_sigma must be nonnegative")
    _require(0.0 <= d.aug.mask_prob <= 1.0, "mask_prob must lie in [0, 1]")
    _require(0.0 < d.aug.scale_min <= d.aug.scale_max,
             "scale range must satisfy 0 < min <= max")

    _require(1 <= cfg.classes_per_client <= d.num_classes,
             "classes_per_client must lie in [1, num_classes]")
    _require((cfg.num_clients * cfg.classes_per_client) % d.num_classes == 0,
             "num_clients * classes_per_client must be a multiple of num_classes")

    s = cfg.strategy
    _require(s.kind in STRATEGY_KINDS, f"unknown strategy kind {s.kind!r}")
    if s.kind == "fedema":
        _require((s.lambda_ is None) != (s.tau is None),
                 "fedema requires exactly one of lambda_ or tau")
        if s.tau is not None:
            _require(0.0 <= s.tau < 1.0,
                     "tau must lie in [0, 1); tau = 1 keeps only local knowledge")
        if s.lambda_ is not None:
            _require(s.lambda_ >= 0, "lambda_ must be nonnegative")
        _require(s.mu_encoder is None and s.mu_predictor is None,
                 "mu_encoder/mu_predictor are only valid for constant_mu")
    elif s.kind == "constant_mu":
        _require(s.mu_encoder is not None and s.mu_predictor is not None,
                 "constant_mu requires mu_encoder and mu_predictor")
        _require(0.0 <= s.mu_encoder <= 1.0 and 0.0 <= s.mu_predictor <= 1.0,
                 "constant mu values must lie in [0, 1]")
        _require(s.lambda_ is None and s.tau is None,
                 "lambda_/tau are only valid for fedema")
    else:
        _require(s.lambda_ is None and s.tau is None
                 and s.mu_encoder is None and s.mu_predictor is None,
                 f"strategy {s.kind!r} takes no parameters")

    try:
        mc = cfg.method_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if mc.loss_kind == "nt_xent":
        _require(cfg.batch_size >= 2, "nt_xent needs batch_size >= 2")
    return cfg


# -- parsing / emission ----------------------------------------------------------


def _from_mapping(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = f"{path}.{name}" if path else name
        if name == "data":
            kwargs[name] = _from_mapping(DataConfig, value, sub)
        elif name == "aug":
            kwargs[name] = _from_mapping(AugConfig, value, sub)
        elif name == "strategy":
            kwargs[name] = _from_mapping(StrategyConfig, value, sub)
        elif name in ("encoder_hidden", "predictor_hidden"):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub} must be a list of widths")
            kwargs[name] = tuple(int(v) for v in value)
        elif name == "method_overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"{sub} must be a mapping")
            kwargs[name] = dict(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value at {path or 'top level'}: {e}") from e


def parse_config(source: dict | str | Path | None = None,
                 overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from a JSON file, a mapping, or nothing.

    ``overrides`` maps dotted paths (e.g. ``"strategy.tau"``) to values and
    is applied on top of the document before validation.
    """
    if source is None:
        doc: dict = {}
    elif isinstance(source, dict):
        doc = json.loads(json.dumps(source))
    else:
        text = Path(source).read_text()
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {source}: {e}") from e
    for dotted, value in (overrides or {}).items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-mapping key {p!r}")
        node[leaf] = value
    cfg = _from_mapping(ExperimentConfig, doc, "")
    return validate_config(cfg)


def emit_config(cfg: ExperimentConfig) -> dict:
    """JSON-safe dict such that ``parse_config(emit_config(cfg)) == cfg``."""
    out = dataclasses.asdict(cfg)
    out["encoder_hidden"] = list(cfg.encoder_hidden)
    out["predictor_hidden"] = list(cfg.predictor_hidden)
    return out


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(emit_config(cfg), indent=2, sort_keys=True)
