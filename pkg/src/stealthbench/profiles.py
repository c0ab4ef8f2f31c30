"""Behavior profiles, detection table and the two reward functions.

A profile is an inert parameter tuple (rate, burst duration, burst pause).
The algorithm label is carried as metadata only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

# Burst duration is either a number of seconds or one of these markers.
ONE_FILE = "one_file"
UNLIMITED = "unlimited"

BurstDuration = Union[float, str]


@dataclass(frozen=True)
class ActionProfile:
    id: int
    algorithm_label: str
    nominal_rate_bps: float
    burst_duration: BurstDuration
    burst_pause_s: float

    def __post_init__(self):
        if self.nominal_rate_bps <= 0:
            raise ValueError(f"profile {self.id}: nominal rate must be > 0")
        if self.burst_pause_s < 0:
            raise ValueError(f"profile {self.id}: burst pause must be >= 0")
        if isinstance(self.burst_duration, str):
            if self.burst_duration not in (ONE_FILE, UNLIMITED):
                raise ValueError(f"profile {self.id}: unknown burst duration {self.burst_duration!r}")
        elif self.burst_duration <= 0:
            raise ValueError(f"profile {self.id}: burst duration must be > 0")

    def duty_cycle(self) -> float:
        """Fraction of wall time spent inside a burst.

        Only timed bursts have a known cycle; ``unlimited`` runs continuously
        and ``one_file`` has no fixed duration, so both report 1.0.
        """
        if isinstance(self.burst_duration, str):
            return 1.0
        return self.burst_duration / (self.burst_duration + self.burst_pause_s)

    def effective_rate_bps(self) -> float:
        return self.nominal_rate_bps * self.duty_cycle()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "algorithm_label": self.algorithm_label,
            "nominal_rate_bps": self.nominal_rate_bps,
            "burst_duration": self.burst_duration,
            "burst_pause_s": self.burst_pause_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionProfile":
        burst = d["burst_duration"]
        if not isinstance(burst, str):
            burst = float(burst)
        return cls(
            id=int(d["id"]),
            algorithm_label=str(d.get("algorithm_label", "")),
            nominal_rate_bps=float(d["nominal_rate_bps"]),
            burst_duration=burst,
            burst_pause_s=float(d["burst_pause_s"]),
        )


@dataclass(frozen=True)
class DetectionTable:
    """Detector behaviour per profile.

    ``miss_prob[k]`` is the chance a window produced under profile ``k`` is
    classified as normal (the false negative rate).
    """

    normal_tnr: float
    miss_prob: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in [("normal_tnr", self.normal_tnr), *self.miss_prob.items()]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0, 1] for {name}: {p}")

    def to_dict(self) -> dict:
        return {
            "normal_tnr": self.normal_tnr,
            "miss_prob": {str(k): v for k, v in sorted(self.miss_prob.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionTable":
        return cls(
            normal_tnr=float(d["normal_tnr"]),
            miss_prob={int(k): float(v) for k, v in d["miss_prob"].items()},
        )


@dataclass(frozen=True)
class RewardParams:
    h: float = 0.0
    d: float = 20.0
    log_scale: float = 10.0

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be > 0")


DEFAULT_REWARD = RewardParams()

_BUILTIN_ROWS = [
    (1, "ChaCha20", 16.0, ONE_FILE, 60.0),
    (2, "AES-CTR", 565565.65, UNLIMITED, 0.0),
    (3, "Salsa20", 632834.80, UNLIMITED, 0.0),
    (4, "AES-CTR", 500.0, 10.0, 5.0),
    (5, "ChaCha20", 200.0, 20.0, 40.0),
    (6, "Salsa20", 200.0, 120.0, 30.0),
]

# Fractions, not percentages.
_BUILTIN_TNR = 0.8894
_BUILTIN_MISS = {1: 0.9162, 2: 0.0062, 3: 0.0021, 4: 0.8018, 5: 0.8205, 6: 0.7738}


def builtin_profiles() -> list[ActionProfile]:
    """The six reference profiles, ordered by id."""
    return [ActionProfile(*row) for row in _BUILTIN_ROWS]


def builtin_detection_table() -> DetectionTable:
    return DetectionTable(normal_tnr=_BUILTIN_TNR, miss_prob=dict(_BUILTIN_MISS))


def reward_hidden(r: float, p: RewardParams = DEFAULT_REWARD) -> float:
    """Reward for an undetected step at rate ``r`` (bytes/s)."""
    if r < 0:
        raise ValueError(f"rate must be >= 0, got {r}")
    return p.log_scale * math.log(r + 1.0) + p.h


def reward_detected(r: float, p: RewardParams = DEFAULT_REWARD) -> float:
    """Reward for a detected step at rate ``r`` (bytes/s)."""
    if r < 0:
        raise ValueError(f"rate must be >= 0, got {r}")
    return -p.d / max(r, 1.0) - p.d


def expected_reward(
    profile: ActionProfile, table: DetectionTable, p: RewardParams = DEFAULT_REWARD
) -> float:
    if profile.id not in table.miss_prob:
        raise KeyError(f"profile {profile.id} missing from detection table")
    miss = table.miss_prob[profile.id]
    r = profile.nominal_rate_bps
    return miss * reward_hidden(r, p) + (1.0 - miss) * reward_detected(r, p)


def optimal_profile(
    profiles: Sequence[ActionProfile],
    table: DetectionTable,
    p: RewardParams = DEFAULT_REWARD,
) -> tuple[int, list[float]]:
    """Return the id with the highest expected reward and the reward vector.

    The vector follows the order of ``profiles``. Ties go to the lowest id.
    """
    if not profiles:
        raise ValueError("empty profile set")
    values = [expected_reward(prof, table, p) for prof in profiles]
    best = min(
        range(len(profiles)),
        key=lambda i: (-values[i], profiles[i].id),
    )
    return profiles[best].id, values


def check_unique_ids(profiles: Iterable[ActionProfile]) -> None:
    ids = [prof.id for prof in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate profile ids: {ids}")


def load_profiles(path: str | Path) -> list[ActionProfile]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    rows = doc["profiles"] if isinstance(doc, dict) else doc
    profiles = [ActionProfile.from_dict(row) for row in rows]
    check_unique_ids(profiles)
    return profiles


def save_profiles(profiles: Sequence[ActionProfile], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"profiles": [p.to_dict() for p in profiles]}, fh, indent=2)


def load_detection_table(path: str | Path) -> DetectionTable:
    with open(path, encoding="utf-8") as fh:
        return DetectionTable.from_dict(json.load(fh))


def save_detection_table(table: DetectionTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table.to_dict(), fh, indent=2)
