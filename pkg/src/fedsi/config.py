"""Experiment configuration: schema, validation, canonical hashing, parsing.

Config files are JSON with three sections (experiment, model, data).
Unknown keys anywhere are hard errors so that a typo can never silently
change an experiment.  The config hash covers every field that influences
results; output locations and timestamps live outside the config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

ALGORITHMS = ("fedsi", "fedsi_fac", "fedavg", "fedavg_ft", "local_only")
DATA_KINDS = ("synthetic", "idx")
SUBSETS = ("small", "large", "full")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    n_clients: int = 10
    labels_per_client: int = 5
    # idx corpora
    dataset_name: str = "mnist"
    subset: str = "full"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    # synthetic corpora
    n_classes: int = 10
    dim: int = 784
    per_class: int = 1000
    separation: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run, minus file-system locations.

    The strict (0, 1] bound on subnet_ratio applies to config files; a
    ratio of exactly 0 can be constructed programmatically to force empty
    subnetworks in reduction experiments.
    """

    algorithm: str = "fedsi"
    seed: int = 0
    rounds: int = 100
    clients_per_round: int = 10
    local_epochs: int = 10
    batch_size: int = 50
    lr: float = 1e-2
    alpha: float = 1e-4
    subnet_ratio: float = 0.05
    fine_tune_epochs: int = 10
    ece_bins: int = 15
    checkpoint_interval: int = 0  # 0: final checkpoint only
    noise_variance: float = 1.0
    novel_client: int | None = None
    exact_marginals: bool = False
    hidden_dim: int = 64
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate(strict_ratio=False)

    def validate(self, strict_ratio: bool = True) -> None:
        d = self.data
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"experiment.algorithm must be one of {ALGORITHMS}, "
                              f"got {self.algorithm!r}")
        if d.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {d.kind!r}")
        if d.n_clients < 1:
            raise ConfigError("data.n_clients must be >= 1")
        if not 1 <= self.clients_per_round <= d.n_clients:
            raise ConfigError(
                f"experiment.clients_per_round must lie in [1, n_clients={d.n_clients}], "
                f"got {self.clients_per_round}")
        if self.rounds < 0:
            raise ConfigError("experiment.rounds must be >= 0")
        if self.local_epochs < 1:
            raise ConfigError("experiment.local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("experiment.batch_size must be >= 1")
        if not self.lr >= 0.0:
            raise ConfigError("experiment.lr must be >= 0")
        if not self.alpha > 0.0:
            raise ConfigError("experiment.alpha must be > 0")
        low_ok = self.subnet_ratio > 0.0 or (not strict_ratio and self.subnet_ratio == 0.0)
        if not (low_ok and self.subnet_ratio <= 1.0):
            raise ConfigError("experiment.subnet_ratio must lie in (0, 1], "
                              f"got {self.subnet_ratio}")
        if self.fine_tune_epochs < 0:
            raise ConfigError("experiment.fine_tune_epochs must be >= 0")
        if self.ece_bins < 1:
            raise ConfigError("experiment.ece_bins must be >= 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("experiment.checkpoint_interval must be >= 0")
        if self.noise_variance < 0.0:
            raise ConfigError("experiment.noise_variance must be >= 0")
        if self.novel_client is not None and not 0 <= self.novel_client < d.n_clients:
            raise ConfigError(
                f"experiment.novel_client must name a client in [0, {d.n_clients})")
        if self.hidden_dim < 1:
            raise ConfigError("model.hidden_dim must be >= 1")
        if d.labels_per_client < 1:
            raise ConfigError("data.labels_per_client must be >= 1")
        if d.kind == "idx":
            if d.subset not in SUBSETS:
                raise ConfigError(f"data.subset must be one of {SUBSETS}, got {d.subset!r}")
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(d, key) is None:
                    raise ConfigError(f"data.{key} is required when data.kind is 'idx'")
        else:
            if d.n_classes < 2:
                raise ConfigError("data.n_classes must be >= 2")
            if d.dim < 1:
                raise ConfigError("data.dim must be >= 1")
            if d.per_class < 1:
                raise ConfigError("data.per_class must be >= 1")
            if not d.separation > 0.0:
                raise ConfigError("data.separation must be > 0")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


_SECTION_FIELDS = {
    "experiment": [f.name for f in fields(ExperimentConfig)
                   if f.name not in ("data", "hidden_dim")],
    "model": ["hidden_dim"],
    "data": [f.name for f in fields(DataConfig)],
}


def config_from_sections(raw: dict) -> ExperimentConfig:
    """Build a validated config from the nested file layout."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown_sections = set(raw) - set(_SECTION_FIELDS)
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
    flat: dict = {}
    for section, allowed in _SECTION_FIELDS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a JSON object")
        unknown = set(body) - set(allowed)
        if unknown:
            raise ConfigError(
                f"unknown key(s) in section {section!r}: {sorted(unknown)}")
        if section == "data":
            try:
                flat["data"] = DataConfig(**body)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad data section: {exc}") from exc
        else:
            flat.update(body)
    try:
        cfg = ExperimentConfig(**flat)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate(strict_ratio=True)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_sections(raw)


def config_to_sections(cfg: ExperimentConfig) -> dict:
    """Inverse of config_from_sections, for writing config files."""
    blob = asdict(cfg)
    data = blob.pop("data")
    hidden = blob.pop("hidden_dim")
    return {"experiment": blob, "model": {"hidden_dim": hidden}, "data": data}
