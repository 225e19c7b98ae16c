"""Shared configuration types for the probing/reservation access schemes."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from numbers import Integral, Real


class Mechanism(str, Enum):
    """How nodes behave after a failed channel reservation.

    ``SA_BASELINE`` is plain energy-harvesting slotted ALOHA (no probing);
    only the simulator and :func:`probeaoi.analysis.sa_baseline_aoi` accept it.
    """

    AUC = "AUC"
    RUC = "RUC"
    SAFC = "SAFC"
    SA_BASELINE = "SA_BASELINE"

    @classmethod
    def parse(cls, value: "str | Mechanism") -> "Mechanism":
        if isinstance(value, Mechanism):
            return value
        key = str(value).strip().upper().replace("-", "_")
        if key in ("SA", "ALOHA"):
            key = "SA_BASELINE"
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError("mechanism", f"mechanism must be one of {choices}, got {value!r}") from None

    @property
    def probes(self) -> bool:
        return self is not Mechanism.SA_BASELINE


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending parameter."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class ProtocolConfig:
    """Network and access parameters.

    Defaults are the reference operating point: 50 nodes, harvest
    probability 0.1 per round, 7 energy units per packet and a probing
    mini-slot 1/20 of a data slot.
    """

    n: int = 50
    xi: float = 0.1
    M: int = 7
    delta: float = 1 / 20
    mechanism: Mechanism = Mechanism.AUC
    q: float = 0.2
    eta: float = 0.1

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)

    @property
    def round_duration(self) -> "RoundDuration":
        return RoundDuration.from_delta(self.delta)

    @property
    def activation_threshold(self) -> int:
        """Energy units a node must hold before it takes part in a round."""
        return self.M + 1 if self.mechanism.probes else self.M

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "xi": self.xi,
            "M": self.M,
            "delta": self.delta,
            "mechanism": self.mechanism.value,
            "q": self.q,
            "eta": self.eta,
        }


@dataclass(frozen=True)
class RoundDuration:
    """Physical length of one round in data-slot units (data slot = 1)."""

    rounds_to_physical: float

    @classmethod
    def from_delta(cls, delta: float) -> "RoundDuration":
        return cls(1.0 + float(delta))


def _check_int(name: str, value, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise ConfigError(name, f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(name, f"{name} must be ≥ {minimum}, got {value}")
    return int(value)


def _check_prob(name: str, value, *, open_low: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, Real) or math.isnan(value):
        raise ConfigError(name, f"{name} must be a real number, got {value!r}")
    value = float(value)
    if open_low and not 0.0 < value <= 1.0:
        raise ConfigError(name, f"{name} must lie in (0, 1], got {value}")
    if not 0.0 <= value <= 1.0:
        raise ConfigError(name, f"{name} must lie in [0, 1], got {value}")
    return value


def validate_config(config: ProtocolConfig) -> ProtocolConfig:
    """Check all parameter ranges and return the normalized config.

    SAFC never falls back to contention, so ``eta`` is forced to 0; the
    ALOHA baseline never probes, so ``q`` is forced to 0. Validating an
    already validated config returns an equal object.
    """
    n = _check_int("n", config.n, 1)
    M = _check_int("M", config.M, 1)
    xi = _check_prob("xi", config.xi, open_low=True)
    q = _check_prob("q", config.q)
    eta = _check_prob("eta", config.eta)
    delta = config.delta
    if isinstance(delta, bool) or not isinstance(delta, Real) or not math.isfinite(delta):
        raise ConfigError("delta", f"delta must be a finite real number, got {delta!r}")
    if delta < 0:
        raise ConfigError("delta", f"delta must be ≥ 0, got {delta}")
    mechanism = Mechanism.parse(config.mechanism)
    if mechanism is Mechanism.SAFC:
        eta = 0.0
    elif mechanism is Mechanism.SA_BASELINE:
        q = 0.0
    return ProtocolConfig(n=n, xi=xi, M=M, delta=float(delta), mechanism=mechanism, q=q, eta=eta)


def access_probability(mechanism: Mechanism, q, eta):
    """Data-slot access probability of a node after a failed reservation."""
    mechanism = Mechanism.parse(mechanism)
    if mechanism is Mechanism.AUC:
        return eta
    if mechanism is Mechanism.RUC:
        return q * eta
    if mechanism is Mechanism.SAFC:
        return 0.0 * q
    raise ValueError("the ALOHA baseline has no probing stage, so no post-reservation access probability")
