"""Experiment configuration: parsing, validation, canonical hashing.

Configurations are plain JSON files.  Every output file produced by the
harness records the SHA-256 hash of the canonical (sorted, whitespace-free)
JSON encoding together with the base seed, so results can always be traced
back to the exact configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .agd import AGDConfig
from .bilevel import BilevelConfig

__all__ = ["ConfigError", "KernelSpec", "GridSpec", "ExperimentConfig", "load_config"]

LOSS_NAMES = ("mse", "gauss", "white")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class KernelSpec:
    kind: str  # "gaussian", "motion" or "custom"
    size: int = 9
    std: float = 2.0
    length: int = 10
    angle_deg: float = 60.0
    taps: tuple | None = None

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "size": self.size, "std": self.std}
        if self.kind == "motion":
            return {"kind": "motion", "length": self.length, "angle_deg": self.angle_deg}
        return {"kind": "custom", "taps": self.taps}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        kind = d.get("kind")
        if kind == "gaussian":
            return cls(kind="gaussian", size=int(d.get("size", 9)), std=float(d.get("std", 2.0)))
        if kind == "motion":
            return cls(kind="motion", length=int(d.get("length", 10)),
                       angle_deg=float(d.get("angle_deg", 60.0)))
        if kind == "custom":
            taps = d.get("taps")
            if not taps:
                raise ConfigError("custom kernel requires non-empty taps")
            return cls(kind="custom", taps=tuple(tuple(float(v) for v in row) for row in taps))
        raise ConfigError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class GridSpec:
    lambda_min: float = 1e-4
    lambda_max: float = 1e2
    count: int = 40

    def to_dict(self) -> dict:
        return {"lambda_min": self.lambda_min, "lambda_max": self.lambda_max, "count": self.count}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    image_paths: tuple[str, ...] = ()
    synthetic_count: int = 0
    synthetic_size: int = 64
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(kind="gaussian"))
    bsnr: tuple[float, ...] = (10.0, 17.5, 25.0, 32.5, 40.0)
    losses: tuple[str, ...] = LOSS_NAMES
    huber_eps: float = 1e-3
    agd: AGDConfig = field(default_factory=AGDConfig)
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    grid: GridSpec = field(default_factory=GridSpec)

    def validate(self) -> None:
        if not self.image_paths and self.synthetic_count < 1:
            raise ConfigError("no input images: give image paths or a synthetic count >= 1")
        if self.image_paths and self.synthetic_count:
            raise ConfigError("give either image paths or a synthetic spec, not both")
        if not self.losses:
            raise ConfigError("at least one loss must be selected")
        for name in self.losses:
            if name not in LOSS_NAMES:
                raise ConfigError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
        if len(set(self.losses)) != len(self.losses):
            raise ConfigError("duplicate losses in config")
        if not self.bsnr:
            raise ConfigError("at least one BSNR level must be given")
        if self.huber_eps <= 0:
            raise ConfigError("huber_eps must be positive")
        if self.grid.count <= 2:
            raise ConfigError("grid count must be at least 3 for a usable log-spaced sweep")
        if not (0 < self.grid.lambda_min < self.grid.lambda_max):
            raise ConfigError("grid requires 0 < lambda_min < lambda_max")
        if self.synthetic_count and self.synthetic_size < 16:
            raise ConfigError("synthetic images must be at least 16x16")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "images": (
                {"paths": list(self.image_paths)}
                if self.image_paths
                else {"synthetic": {"count": self.synthetic_count, "size": self.synthetic_size}}
            ),
            "kernel": self.kernel.to_dict(),
            "bsnr": list(self.bsnr),
            "losses": list(self.losses),
            "huber_eps": self.huber_eps,
            "agd": {"tol": self.agd.tol, "max_iters": self.agd.max_iters},
            "bilevel": {
                "beta0": self.bilevel.beta0,
                "alpha": self.bilevel.alpha,
                "tol_d": self.bilevel.tol_d,
                "max_it": self.bilevel.max_it,
                "cg_tol": self.bilevel.cg_tol,
                "cg_max_iters": self.bilevel.cg_max_iters,
            },
            "grid": self.grid.to_dict(),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            images = d.get("images", {})
            paths: tuple[str, ...] = ()
            syn_count, syn_size = 0, 64
            if "paths" in images:
                paths = tuple(str(p) for p in images["paths"])
            if "synthetic" in images:
                syn = images["synthetic"]
                syn_count = int(syn.get("count", 0))
                syn_size = int(syn.get("size", 64))
            agd_d = d.get("agd", {})
            bil_d = d.get("bilevel", {})
            cg_max = bil_d.get("cg_max_iters")
            cfg = cls(
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "out")),
                image_paths=paths,
                synthetic_count=syn_count,
                synthetic_size=syn_size,
                kernel=KernelSpec.from_dict(d.get("kernel", {"kind": "gaussian"})),
                bsnr=tuple(float(b) for b in d.get("bsnr", (10.0, 17.5, 25.0, 32.5, 40.0))),
                losses=tuple(str(s) for s in d.get("losses", LOSS_NAMES)),
                huber_eps=float(d.get("huber_eps", 1e-3)),
                agd=AGDConfig(
                    tol=float(agd_d.get("tol", 1e-6)),
                    max_iters=int(agd_d.get("max_iters", 50_000)),
                ),
                bilevel=BilevelConfig(
                    beta0=float(bil_d.get("beta0", 2.0)),
                    alpha=float(bil_d.get("alpha", 0.1)),
                    tol_d=float(bil_d.get("tol_d", 1e-5)),
                    max_it=int(bil_d.get("max_it", 60)),
                    cg_tol=float(bil_d.get("cg_tol", 1e-8)),
                    cg_max_iters=None if cg_max is None else int(cg_max),
                ),
                grid=GridSpec(
                    lambda_min=float(d.get("grid", {}).get("lambda_min", 1e-4)),
                    lambda_max=float(d.get("grid", {}).get("lambda_max", 1e2)),
                    count=int(d.get("grid", {}).get("count", 40)),
                ),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"malformed configuration: {exc}") from exc
        cfg.validate()
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return ExperimentConfig.from_dict(data)
