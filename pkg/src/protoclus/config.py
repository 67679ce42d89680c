"""Run configuration with canonical JSON serialization."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

CLUSTER_BRANCHES = ("both", "attr_only", "obj_only", "none")
CLUSTERING_STRATEGIES = ("gcg_local", "classical_ot", "cosine")
WORLDS = ("closed", "open", "both")


@dataclass
class RunConfig:
    # prototypes: an int, or [k_min, k_max] to size each primitive by its training share
    K: object = 5
    mu: float = 0.99
    kappa: float = 1.0
    epsilon: float = 0.05
    max_outer: int = 10
    alpha: float = 0.2
    beta: float = 0.5
    tau: float = 0.1
    tau_cls: float = 0.1
    lambda_a: float = 1.0
    lambda_o: float = 1.0
    lambda_c: float = 1.0
    # model
    embed_dim: int = 16
    residual: bool = True
    # optimizer
    lr: float = 1e-4
    weight_decay: float = 5e-5
    epochs: int = 15
    batch_size: int = 64
    seed: int = 0
    # evaluation
    world: str = "closed"
    calibration: bool = True
    # ablation toggles
    enable_pcl: bool = True
    enable_pdl: bool = True
    cluster_branch: str = "both"
    clustering_strategy: str = "gcg_local"

    def __post_init__(self):
        if isinstance(self.K, (list, tuple)):
            if len(self.K) != 2 or not all(isinstance(k, int) and k >= 1 for k in self.K) \
                    or self.K[0] > self.K[1]:
                raise ConfigError("K: a range must be [k_min, k_max] with 1 <= k_min <= k_max")
            self.K = [int(self.K[0]), int(self.K[1])]
        elif not isinstance(self.K, int) or isinstance(self.K, bool) or self.K < 1:
            raise ConfigError("K: must be a positive int or [k_min, k_max]")
        for name in ("mu",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        for name in ("kappa", "alpha", "beta", "lambda_a", "lambda_o", "lambda_c", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        for name in ("epsilon", "tau", "tau_cls", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0")
        for name in ("embed_dim", "epochs", "batch_size", "max_outer"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2")
        if self.world not in WORLDS:
            raise ConfigError(f"world: must be one of {WORLDS}")
        if self.cluster_branch not in CLUSTER_BRANCHES:
            raise ConfigError(f"cluster_branch: must be one of {CLUSTER_BRANCHES}")
        if self.clustering_strategy not in CLUSTERING_STRATEGIES:
            raise ConfigError(f"clustering_strategy: must be one of {CLUSTERING_STRATEGIES}")
        if self.cluster_branch == "none" and (
                (self.enable_pcl and self.alpha > 0) or (self.enable_pdl and self.beta > 0)):
            raise ConfigError("cluster_branch: prototype losses are enabled but clustering is 'none'")
        if self.clustering_strategy == "classical_ot":
            self.kappa = 0.0
        for f in fields(self):
            if f.type is float:
                setattr(self, f.name, float(getattr(self, f.name)))

    @property
    def effective_alpha(self):
        return self.alpha if self.enable_pcl else 0.0

    @property
    def effective_beta(self):
        return self.beta if self.enable_pdl else 0.0

    @property
    def clustering_active(self):
        return self.cluster_branch != "none" and (self.effective_alpha > 0 or self.effective_beta > 0)

    @property
    def branches(self):
        return {"both": ("attribute", "object"), "attr_only": ("attribute",),
                "obj_only": ("object",), "none": ()}[self.cluster_branch]

    def to_dict(self):
        return asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        for f in fields(cls):
            if f.name not in data:
                continue
            v = data[f.name]
            if f.type is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{f.name}: expected a number, got {v!r}")
            if f.type is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name}: expected an integer, got {v!r}")
            if f.type is bool and not isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected true/false, got {v!r}")
            if f.type is str and not isinstance(v, str):
                raise ConfigError(f"{f.name}: expected a string, got {v!r}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
        return cls.from_dict(data)
