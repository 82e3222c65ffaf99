"""Model hyperparameters and named size profiles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

from .errors import ConfigurationError

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
CLASS_NAMES = ("SinusBrady", "SinusRhythmTachy", "SVA", "VentArrCondBlock", "STTIschemic", "StructMisc")
CLASS_TITLES = (
    "Sinus Bradycardia",
    "Sinus Rhythm and Tachycardia",
    "Supraventricular Arrhythmias",
    "Ventricular Arrhythmias and Conduction Blocks",
    "ST-T Changes and Ischemic Changes",
    "Structural Abnormalities and Miscellaneous",
)


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 64
    n_leads: int = 12
    n_classes: int = 6
    num_patterns: int = 16
    kernel_sizes: tuple = (5, 9, 15, 25, 35)
    pool_factor: int = 4
    sample_rate_hz: float = 100.0
    temporal_scales: tuple = (1, 2, 5, 10, 20)
    ffn_mult: int = 4
    dropout: float = 0.1
    use_positional: bool = True
    use_temporal: bool = True
    cycle_hidden: int = 32
    cycle_kernels: tuple = (7, 5)
    n_phases: int = 3
    beat_kernel: int = 5
    explain_hidden: int = 64
    classifier_hidden: int = 128
    uncertainty_hidden: int = 64
    rhythm_bpm_range: tuple = (40.0, 180.0)
    init_strength: float = 0.1
    # None -> max_seq_len / 10
    local_tau: float | None = None

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.temporal_scales = tuple(int(r) for r in self.temporal_scales)
        self.cycle_kernels = tuple(int(k) for k in self.cycle_kernels)
        self.rhythm_bpm_range = tuple(float(v) for v in self.rhythm_bpm_range)
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for k in self.kernel_sizes + self.cycle_kernels + (self.beat_kernel,):
            if k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd, got {k}")
        for name in ("d_model", "n_heads", "n_layers", "max_seq_len", "num_patterns", "pool_factor"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def token_rate_hz(self) -> float:
        return self.sample_rate_hz / self.pool_factor

    @property
    def min_length(self) -> int:
        return max(self.kernel_sizes)

    @property
    def signal_length(self) -> int:
        """Sample count that yields exactly ``max_seq_len`` tokens."""
        return self.max_seq_len * self.pool_factor

    def tau(self) -> float:
        return self.local_tau if self.local_tau is not None else self.max_seq_len / 10.0

    def rhythm_periods(self) -> list[float]:
        """Per-head periods in tokens, geometric over the configured bpm range."""
        lo_bpm, hi_bpm = self.rhythm_bpm_range
        shortest = self.token_rate_hz * 60.0 / hi_bpm
        longest = self.token_rate_hz * 60.0 / lo_bpm
        if self.n_heads == 1:
            return [math.sqrt(shortest * longest)]
        ratio = (longest / shortest) ** (1.0 / (self.n_heads - 1))
        return [shortest * ratio ** h for h in range(self.n_heads)]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PROFILES: dict[str, dict] = {
    "desk": dict(d_model=32, n_heads=4, n_layers=2, max_seq_len=64),
    "paper": dict(d_model=256, n_heads=8, n_layers=4, max_seq_len=250),
    # gradient-check scale: tiny widths so every element can be finite-differenced
    "micro": dict(d_model=8, n_heads=2, n_layers=2, max_seq_len=12, num_patterns=2,
                  cycle_hidden=4, explain_hidden=4, classifier_hidden=6,
                  uncertainty_hidden=4, dropout=0.0),
}


def profile(name: str, **overrides) -> ModelConfig:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile '{name}' (known: {', '.join(PROFILES)})")
    return ModelConfig(**{**PROFILES[name], **overrides})
