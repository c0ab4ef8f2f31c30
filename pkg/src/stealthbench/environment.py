"""Agent-facing environments.

Three backends share one interface (``profiles``, ``n_features``,
``sample_normal(rng)``, ``step(action_index, rng)``):

* ``TableEnv`` draws detection from the detection table and afterstates from
  the normal generator, so the best action does not depend on the state.
* ``SyntheticEnv`` perturbs generated fingerprints according to the chosen
  profile and asks a fitted detector for the verdict.
* ``ReplayEnv`` walks through a labeled fingerprint dataset.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import detector as det
from .fingerprint import NORMAL, Fingerprint, FingerprintSchema, label_profile_id, profile_label
from .profiles import (
    DEFAULT_REWARD,
    ActionProfile,
    DetectionTable,
    RewardParams,
    builtin_profiles,
    check_unique_ids,
    reward_detected,
    reward_hidden,
)

log = logging.getLogger(__name__)


class EnvironmentError_(RuntimeError):
    pass


class ReplayExhausted(EnvironmentError_):
    pass


class CalibrationError(EnvironmentError_):
    def __init__(self, message: str, best: dict[int, float]):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class EnvStep:
    afterstate: Fingerprint
    detected: bool
    reward: float
    action: int
    episode_index: int = 0


@dataclass
class Perturbation:
    features: list[int]
    shift: np.ndarray
    scale: np.ndarray
    intensity: float = 1.0

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if not self.features:
            raise ValueError("perturbation must affect at least one feature")
        if len(self.shift) != len(self.features) or len(self.scale) != len(self.features):
            raise ValueError("shift/scale must have one entry per affected feature")
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")


@dataclass
class GeneratorSpec:
    mean: np.ndarray
    std: np.ndarray
    perturbations: dict[int, Perturbation] = field(default_factory=dict)
    intensity: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if not np.all(self.std > 0):
            raise ValueError("all stds must be > 0")
        if self.intensity <= 0:
            raise ValueError("global intensity must be > 0")
        for k, p in self.perturbations.items():
            if max(p.features) >= len(self.mean) or min(p.features) < 0:
                raise ValueError(f"profile {k}: feature index out of range")

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def sample_normal(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        if n is None:
            return self.mean + self.std * rng.standard_normal(self.n_features)
        return self.mean + self.std * rng.standard_normal((n, self.n_features))

    def perturbed(self, profile_id: int, z: np.ndarray, intensity: Optional[float] = None) -> np.ndarray:
        """Map standard-normal draws ``z`` to fingerprints under a profile.

        Affected features get ``(1 + g*scale) * z + g*shift`` in std units,
        with ``g`` the global intensity times the profile's intensity.
        """
        p = self.perturbations[profile_id]
        g = self.intensity * (p.intensity if intensity is None else intensity)
        z = np.array(z, dtype=float, copy=True)
        cols = p.features
        z[..., cols] = (1.0 + g * p.scale) * z[..., cols] + g * p.shift
        return self.mean + self.std * z

    def with_intensity(self, profile_id: int, intensity: float) -> "GeneratorSpec":
        perts = dict(self.perturbations)
        old = perts[profile_id]
        perts[profile_id] = Perturbation(old.features, old.shift, old.scale, intensity)
        return GeneratorSpec(self.mean, self.std, perts, self.intensity)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "intensity": self.intensity,
            "perturbations": {
                str(k): {
                    "features": list(p.features),
                    "shift": p.shift.tolist(),
                    "scale": p.scale.tolist(),
                    "intensity": p.intensity,
                }
                for k, p in sorted(self.perturbations.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        perts = {
            int(k): Perturbation([int(i) for i in v["features"]], v["shift"], v["scale"],
                                 float(v.get("intensity", 1.0)))
            for k, v in d.get("perturbations", {}).items()
        }
        return cls(d["mean"], d["std"], perts, float(d.get("intensity", 1.0)))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_generator_spec(n_features: int = 50, profile_ids: Sequence[int] = (1, 2, 3, 4, 5, 6),
                           affected: int = 8, seed: int = 2024) -> GeneratorSpec:
    """Seeded synthetic device model with z-scored features.

    Normal fingerprints are standard normal in every feature, i.e. already
    standardized against the normal baseline. Each profile moves a random
    subset of features: a signed mean shift of 0.5 to 1.5 std and a spread
    increase of up to 100%, both multiplied by the intensity.
    """
    rng = np.random.default_rng(seed)
    mean = np.zeros(n_features)
    std = np.ones(n_features)
    perts = {}
    for k in profile_ids:
        cols = sorted(rng.choice(n_features, size=min(affected, n_features), replace=False).tolist())
        shift = rng.uniform(0.5, 1.5, len(cols)) * rng.choice([-1.0, 1.0], len(cols))
        scale = rng.uniform(0.0, 1.0, len(cols))
        perts[int(k)] = Perturbation(cols, shift, scale, 1.0)
    return GeneratorSpec(mean, std, perts)


class _Env:
    def __init__(self, profiles: Sequence[ActionProfile], reward: RewardParams,
                 schema: Optional[FingerprintSchema], n_features: int):
        self.profiles = list(profiles)
        check_unique_ids(self.profiles)
        self.reward_params = reward
        self.schema = schema or FingerprintSchema.anonymous(n_features)
        if self.schema.n_features != n_features:
            raise ValueError("schema does not match generator/dataset width")
        self.n_features = n_features

    @property
    def n_actions(self) -> int:
        return len(self.profiles)

    def profile(self, action: int) -> ActionProfile:
        if not 0 <= action < len(self.profiles):
            raise ValueError(f"action index {action} out of range")
        return self.profiles[action]

    def reward(self, profile: ActionProfile, detected: bool) -> float:
        r = profile.nominal_rate_bps
        if detected:
            return reward_detected(r, self.reward_params)
        return reward_hidden(r, self.reward_params)

    def action_index(self, profile_id: int) -> int:
        for i, p in enumerate(self.profiles):
            if p.id == profile_id:
                return i
        raise KeyError(f"no profile with id {profile_id}")


class TableEnv(_Env):
    """Detection drawn from fixed per-profile miss probabilities."""

    def __init__(self, generator: GeneratorSpec, table: DetectionTable,
                 profiles: Optional[Sequence[ActionProfile]] = None,
                 reward: RewardParams = DEFAULT_REWARD, schema: Optional[FingerprintSchema] = None):
        super().__init__(profiles or builtin_profiles(), reward, schema, generator.n_features)
        missing = [p.id for p in self.profiles if p.id not in table.miss_prob]
        if missing:
            raise ValueError(f"detection table lacks profiles {missing}")
        self.generator = generator
        self.table = table

    def sample_normal(self, rng: np.random.Generator) -> Fingerprint:
        return Fingerprint(self.generator.sample_normal(rng), NORMAL)

    def table_arrays(self) -> tuple[np.ndarray, ...]:
        """(mean, std, miss, hidden reward, detected reward), indexed by action."""
        miss = np.array([self.table.miss_prob[p.id] for p in self.profiles])
        r_hid = np.array([self.reward(p, False) for p in self.profiles])
        r_det = np.array([self.reward(p, True) for p in self.profiles])
        return self.generator.mean, self.generator.std, miss, r_hid, r_det

    def step(self, action: int, rng: np.random.Generator, episode_index: int = 0) -> EnvStep:
        prof = self.profile(action)
        detected = bool(rng.random() >= self.table.miss_prob[prof.id])
        after = self.sample_normal(rng)
        return EnvStep(after, detected, self.reward(prof, detected), prof.id, episode_index)


class SyntheticEnv(_Env):
    """Afterstates from the perturbed generator, verdicts from a detector."""

    def __init__(self, generator: GeneratorSpec, detector: det.Detector,
                 profiles: Optional[Sequence[ActionProfile]] = None,
                 reward: RewardParams = DEFAULT_REWARD, schema: Optional[FingerprintSchema] = None):
        super().__init__(profiles or builtin_profiles(), reward, schema, generator.n_features)
        missing = [p.id for p in self.profiles if p.id not in generator.perturbations]
        if missing:
            raise ValueError(f"generator lacks perturbations for profiles {missing}")
        self.generator = generator
        self.detector = detector

    def sample_normal(self, rng: np.random.Generator) -> Fingerprint:
        return Fingerprint(self.generator.sample_normal(rng), NORMAL)

    def sample_profile(self, profile_id: int, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.n_features))
        return self.generator.perturbed(profile_id, z)

    def step(self, action: int, rng: np.random.Generator, episode_index: int = 0) -> EnvStep:
        prof = self.profile(action)
        x = self.generator.perturbed(prof.id, rng.standard_normal(self.n_features))
        detected = bool(self.detector.is_anomaly(x[None, :])[0])
        after = Fingerprint(x, profile_label(prof.id))
        return EnvStep(after, detected, self.reward(prof, detected), prof.id, episode_index)


class ReplayEnv(_Env):
    """Consumes labeled rows in file order; each row is used at most once."""

    def __init__(self, rows: Sequence[Fingerprint], detector: det.Detector,
                 profiles: Optional[Sequence[ActionProfile]] = None,
                 reward: RewardParams = DEFAULT_REWARD, schema: Optional[FingerprintSchema] = None):
        rows = list(rows)
        if not rows:
            raise ValueError("replay dataset is empty")
        super().__init__(profiles or builtin_profiles(), reward, schema, len(rows[0].values))
        self.detector = detector
        self._queues: dict[str, list[Fingerprint]] = {}
        for fp in rows:
            self._queues.setdefault(fp.label, []).append(fp)
        self._cursor = {label: 0 for label in self._queues}

    def _next(self, label: str) -> Fingerprint:
        queue = self._queues.get(label, [])
        i = self._cursor.get(label, 0)
        if i >= len(queue):
            raise ReplayExhausted(f"no unconsumed rows left for label {label!r}")
        self._cursor[label] = i + 1
        return queue[i]

    def remaining(self, label: str) -> int:
        return len(self._queues.get(label, [])) - self._cursor.get(label, 0)

    def sample_normal(self, rng: Optional[np.random.Generator] = None) -> Fingerprint:
        return self._next(NORMAL)

    def step(self, action: int, rng: Optional[np.random.Generator] = None, episode_index: int = 0) -> EnvStep:
        prof = self.profile(action)
        row = self._next(profile_label(prof.id))
        detected = bool(self.detector.is_anomaly(row.values[None, :])[0])
        return EnvStep(row, detected, self.reward(prof, detected), prof.id, episode_index)


# --- calibration ----------------------------------------------------------------


@dataclass
class CalibrationResult:
    spec: GeneratorSpec
    achieved: dict[int, float]
    model: det.IsolationForestModel
    iterations: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "achieved_fnr": {str(k): v for k, v in sorted(self.achieved.items())},
            "intensity": {str(k): p.intensity for k, p in sorted(self.spec.perturbations.items())},
            "iterations": {str(k): v for k, v in sorted(self.iterations.items())},
        }


def measured_fnr(spec: GeneratorSpec, model: det.Detector, profile_id: int,
                 z: np.ndarray, intensity: Optional[float] = None) -> float:
    X = spec.perturbed(profile_id, z, intensity)
    return float(1.0 - np.mean(model.is_anomaly(X)))


def calibrate(spec: GeneratorSpec, detector_config: det.DetectorConfig, targets: DetectionTable,
              tolerance: float = 0.01, max_iters: int = 40, n_train: int = 2000,
              n_eval: int = 2000, seed: int = 0,
              profile_ids: Optional[Sequence[int]] = None) -> CalibrationResult:
    """Tune each profile's intensity so the detector's FNR hits its target.

    The detector is fit once on ``n_train`` normal draws. For every profile
    a fixed block of ``n_eval`` standard-normal draws is reused at every
    trial intensity, which keeps the measured FNR a step function of the
    intensity alone; the intensity is then bisected. ``tolerance`` is in
    probability units (0.05 = 5 points).
    """
    profile_ids = list(profile_ids or sorted(targets.miss_prob))
    missing = [k for k in profile_ids if k not in spec.perturbations]
    if missing:
        raise ValueError(f"generator lacks perturbations for profiles {missing}")
    root = np.random.SeedSequence(seed)
    train_ss, *eval_ss = root.spawn(1 + len(profile_ids))
    X_train = spec.sample_normal(np.random.default_rng(train_ss), n_train)
    model = det.fit_config(X_train, detector_config)

    achieved: dict[int, float] = {}
    iterations: dict[int, int] = {}
    failed = []
    for k, ss in zip(profile_ids, eval_ss):
        target = targets.miss_prob[k]
        z = np.random.default_rng(ss).standard_normal((n_eval, spec.n_features))
        fnr = lambda g: measured_fnr(spec, model, k, z, g)

        lo, hi = 0.0, 1.0
        f_lo = fnr(lo)
        best_g, best_f = lo, f_lo
        it = 0
        if abs(f_lo - target) > tolerance and f_lo > target:
            f_hi = fnr(hi)
            # Bracket the target; stop early if an endpoint is already close enough.
            while f_hi > target + tolerance and it < max_iters:
                lo, hi = hi, hi * 2.0
                f_hi = fnr(hi)
                it += 1
            if abs(f_hi - target) < abs(best_f - target):
                best_g, best_f = hi, f_hi
            while abs(best_f - target) > tolerance and it < max_iters:
                mid = 0.5 * (lo + hi)
                f_mid = fnr(mid)
                it += 1
                if abs(f_mid - target) < abs(best_f - target):
                    best_g, best_f = mid, f_mid
                if f_mid > target:
                    lo = mid
                else:
                    hi = mid
        achieved[k] = best_f
        iterations[k] = it
        spec = spec.with_intensity(k, best_g / spec.intensity)
        log.info("profile %d: intensity %.4f, fnr %.4f (target %.4f)", k, best_g, best_f, target)
        if abs(best_f - target) > tolerance:
            failed.append(k)

    if failed:
        raise CalibrationError(
            f"profiles {failed} not within {tolerance} of target after {max_iters} iterations; "
            f"best achieved {achieved}",
            achieved,
        )
    return CalibrationResult(spec, achieved, model, iterations)


def labeled_batch(env: SyntheticEnv, rng: np.random.Generator, n_normal: int,
                  n_per_profile: int) -> list[Fingerprint]:
    """Fresh labeled fingerprints for detector evaluation."""
    rows = [Fingerprint(x, NORMAL) for x in env.generator.sample_normal(rng, n_normal)]
    for prof in env.profiles:
        for x in env.sample_profile(prof.id, rng, n_per_profile):
            rows.append(Fingerprint(x, profile_label(prof.id)))
    return rows


def profile_of(fp: Fingerprint) -> Optional[int]:
    return label_profile_id(fp.label)
