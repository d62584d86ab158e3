"""Flat ``key = value`` run configuration files.

Every key is optional; unknown keys are rejected. Defaults:

    dataset         MUTAG        TUDataset name (directory <data_dir>/<dataset>)
    data_dir        data         parent directory of the dataset folder
    feature_scheme  auto         auto | node-label-onehot | degree-onehot
    max_degree      63           clamp for degree one-hot features
    subset          0            if > 0, a stratified subset of this many graphs
    K               4            latent factors per primary capsule
    h               32           capsule dimension (multiple of K)
    hidden_capsules 8            comma list of hidden capsule counts
    R               3            routing iterations
    disentangle     true         false = ablation A1
    residual        true         false = ablation A2
    recon           true         false = ablation A3
    m_plus          0.9
    m_minus         0.1
    lambda          0.5          down-weighting of absent-class margin terms
    beta            0.1          reconstruction loss weight
    epochs          100
    learning_rate   0.001
    batch_size      20           graphs per Adam step
    adam_beta1      0.9
    adam_beta2      0.999
    adam_eps        1e-8
    seed            0
    criterion       shared       shared | cstar
    folds           10
    threads         1            worker processes for folds
    ablation        none         none | A1 | A2 | A3 (applied on top of the flags)

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .graphs import Dataset, build_features, parse_tudataset, stratified_subset
from .model import ModelConfig
from .objectives import MarginConfig, ObjectiveConfig
from .train import ABLATIONS, CSTAR, SHARED, ExperimentConfig, TrainConfig, apply_ablation


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}

# config key -> dataclass field where the two differ
_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    dataset: str = "MUTAG"
    data_dir: str = "data"
    feature_scheme: str = "auto"
    max_degree: int = 63
    subset: int = 0
    K: int = 4
    h: int = 32
    hidden_capsules: tuple = (8,)
    R: int = 3
    disentangle: bool = True
    residual: bool = True
    recon: bool = True
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    beta: float = 0.1
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    criterion: str = SHARED
    folds: int = 10
    threads: int = 1
    ablation: str = "none"

    def __post_init__(self):
        if self.feature_scheme not in ("auto", "node-label-onehot", "degree-onehot"):
            raise ConfigError(f"feature_scheme: unknown value {self.feature_scheme!r}")
        if self.criterion not in (SHARED, CSTAR):
            raise ConfigError(f"criterion: expected shared or cstar, got {self.criterion!r}")
        if self.ablation != "none" and self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation: expected none, A1, A2 or A3, got {self.ablation!r}")

    # -- parsing -----------------------------------------------------------

    @staticmethod
    def keys() -> list[str]:
        inverse = {v: k for k, v in _ALIASES.items()}
        return [inverse.get(f.name, f.name) for f in fields(RunConfig)]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            name = _ALIASES.get(key, key)
            if name not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[name] = _convert(types[name], value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(), source=str(path))

    def override(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        """Canonical text form: every key, in declaration order."""
        inverse = {v: k for k, v in _ALIASES.items()}
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{inverse.get(f.name, f.name)} = {text}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    # -- building ------------------------------------------------------------

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) / self.dataset

    def load_dataset(self) -> Dataset:
        ds = parse_tudataset(self.dataset_dir, self.dataset)
        scheme = self.feature_scheme
        if scheme == "auto":
            scheme = "node-label-onehot" if ds.node_label_values is not None else "degree-onehot"
        ds = build_features(ds, scheme, self.max_degree)
        if self.subset:
            ds = stratified_subset(ds, self.subset, self.seed)
        return ds

    def experiment(self, input_dim: int, num_classes: int) -> ExperimentConfig:
        cfg = ExperimentConfig(
            model=ModelConfig.for_dataset(input_dim, num_classes, hidden=self.hidden_capsules,
                                          K=self.K, h=self.h, R=self.R,
                                          disentangle=self.disentangle, residual=self.residual),
            margin=MarginConfig(self.m_plus, self.m_minus, self.lam),
            objective=ObjectiveConfig(self.beta, self.recon),
            train=TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.adam_beta1,
                              self.adam_beta2, self.adam_eps, self.seed, self.criterion),
        )
        return apply_ablation(cfg, None if self.ablation == "none" else self.ablation)


def _convert(kind, value: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected true/false, got {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "tuple":
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value
