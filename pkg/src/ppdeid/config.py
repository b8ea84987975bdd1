"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InvalidConfig

ABLATIONS = ("cgan_only", "cgan_sim", "cgan_verif", "cgan_sim_verif")


@dataclass(frozen=True)
class TrainConfig:
    lambda_verif: float = 1.0
    lambda_sim: float = 1.0
    margin: float = 2.0
    lr_system: float = 1e-5
    lr_pretrain: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    ablation: str = "cgan_sim_verif"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # channel multipliers; 1.0 is the full-size network
    gen_width: float = 1.0
    disc_width: float = 1.0
    verif_width: float = 1.0
    # verificator pretraining
    pretrain_epochs: int = 20
    pretrain_pairs: int = 2000
    checkpoint_every: int = 0
    # data split and threshold calibration
    split_by: str = "subject"
    split_fraction: float = 0.9
    calibration_pairs: int = 400

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise InvalidConfig(f"ablation must be one of {ABLATIONS}")
        if self.lambda_verif < 0 or self.lambda_sim < 0:
            raise InvalidConfig("lambdas must be non-negative")
        if self.margin <= 0:
            raise InvalidConfig("margin must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size >= 1 and epochs >= 0 required")
        if self.lr_system < 0 or self.lr_pretrain < 0:
            raise InvalidConfig("learning rates must be non-negative")
        if self.split_by not in ("subject", "image") or not 0.0 < self.split_fraction < 1.0:
            raise InvalidConfig("split_by must be subject|image and split_fraction in (0, 1)")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        lam1 = self.lambda_verif if self.ablation in ("cgan_verif", "cgan_sim_verif") else 0.0
        lam2 = self.lambda_sim if self.ablation in ("cgan_sim", "cgan_sim_verif") else 0.0
        return lam1, lam2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise InvalidConfig(f"unknown config key {name!r}")
    t = str(types[name])
    raw = raw.strip()
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "str":
            return raw.strip("\"'")
        if t.startswith("tuple"):
            return tuple(float(v) for v in raw.strip("()[] ").split(","))
    except ValueError as exc:
        raise InvalidConfig(f"{name}: cannot parse {raw!r}") from exc
    raise InvalidConfig(f"{name}: unsupported type {t}")


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path, **overrides) -> TrainConfig:
    """Defaults < file < non-None ``overrides``."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    return TrainConfig.from_dict(values).with_overrides(**overrides)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
