"""Experiment configuration shared by the CLI and the evaluation harness."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .activity import DEFAULT_WINDOW_SECONDS
from .corpus import DEFAULT_MIN_ANSWERS, DEFAULT_RATIOS
from .diffusion import WEIGHTED_DEGREES

METHOD_TBGER = "t-bger"
METHOD_SCORE = "score"
METHOD_TAG_MF = "tag-mf"
METHOD_T_TAG_MF = "t-tag-mf"
ALL_METHODS = (METHOD_TBGER, METHOD_SCORE, METHOD_TAG_MF, METHOD_T_TAG_MF)

DEFAULT_COLD_THRESHOLD = 10


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of a single experiment; hashable into a replay fingerprint."""

    site_name: str = ""
    method: str = ""
    window_seconds: int = DEFAULT_WINDOW_SECONDS
    min_answers: int = DEFAULT_MIN_ANSWERS
    cold_threshold: int = DEFAULT_COLD_THRESHOLD
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    degree_mode: str = WEIGHTED_DEGREES
    seed: int = 0
    score_trials: int = 50
    mf_latent_dim: int = 10
    mf_tune: bool = True
    mf_learning_rate: float = 0.01
    mf_l2: float = 0.01
    mf_epochs: int = 200

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ValueError(f"window length must be positive, got {self.window_seconds}")
        if self.cold_threshold < 1:
            raise ValueError(f"cold threshold must be >= 1, got {self.cold_threshold}")

    def fingerprint(self) -> str:
        """Hash of the semantic configuration (no filesystem paths)."""
        payload = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


def load_config_file(path: str | Path) -> dict:
    """Read the JSON form of ExperimentConfig; unknown keys are rejected."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys in {path}: {sorted(unknown)}")
    if "ratios" in raw:
        raw["ratios"] = tuple(raw["ratios"])
    return raw
