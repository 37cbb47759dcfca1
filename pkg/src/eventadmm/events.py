"""Send-on-delta triggering, threshold schedules, packet drops and message accounting.

These pieces are shared by the consensus, general-form and graph engines.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Random streams are drawn from Philox-4x64 (a counter-based generator) keyed
# by (master seed, stream id) through numpy's SeedSequence.
STREAM_TRIGGER = 1
STREAM_DROP = 2
STREAM_SOLVER = 3
STREAM_DATA = 4


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for one logical stream of a run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class ThresholdSchedule:
    """Threshold in force at iteration k: ``delta0`` or ``delta0/(k+1)**t``."""

    kind: str = "constant"
    delta0: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "power_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.delta0 < 0:
            raise ValueError("threshold must be nonnegative")
        if self.kind == "power_decay" and not self.t > 0:
            raise ValueError("power_decay needs t > 0")

    @classmethod
    def constant(cls, delta: float) -> "ThresholdSchedule":
        return cls("constant", float(delta))

    @classmethod
    def power_decay(cls, delta0: float, t: float) -> "ThresholdSchedule":
        return cls("power_decay", float(delta0), float(t))

    def at(self, k: int) -> float:
        if self.kind == "constant":
            return self.delta0
        return self.delta0 / (k + 1) ** self.t

    @property
    def largest(self) -> float:
        return self.delta0


@dataclass(frozen=True)
class TriggerPolicy:
    """When a node transmits the change of its variable.

    ``vanilla``: send iff the change exceeds the threshold.
    ``randomized``: as vanilla, and otherwise send with probability ``p_trig``.
    ``random_only``: send with probability ``p_trig`` regardless of the change.
    """

    kind: str = "vanilla"
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    p_trig: float = 0.0

    def __post_init__(self):
        if self.kind not in ("vanilla", "randomized", "random_only"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if not 0.0 <= self.p_trig <= 1.0:
            raise ValueError("p_trig must be a probability")

    @classmethod
    def vanilla(cls, delta: float | ThresholdSchedule) -> "TriggerPolicy":
        return cls("vanilla", _schedule(delta))

    @classmethod
    def randomized(cls, delta: float | ThresholdSchedule, p_trig: float) -> "TriggerPolicy":
        return cls("randomized", _schedule(delta), float(p_trig))

    @classmethod
    def random_only(cls, p: float) -> "TriggerPolicy":
        return cls("random_only", ThresholdSchedule.constant(np.inf), float(p))

    def threshold(self, k: int) -> float:
        if self.kind == "random_only":
            return np.inf
        return self.schedule.at(k)

    @property
    def bound(self) -> float:
        """Largest gap an unsent value can keep from its last-sent copy."""
        if self.kind == "random_only":
            return np.inf
        return self.schedule.largest

    def fires(self, gap: float, k: int, rng: np.random.Generator) -> bool:
        if self.kind != "random_only" and gap > self.schedule.at(k):
            return True
        if self.kind == "vanilla" or self.p_trig == 0.0:
            return False
        return bool(rng.random() < self.p_trig)


def _schedule(delta) -> ThresholdSchedule:
    if isinstance(delta, ThresholdSchedule):
        return delta
    return ThresholdSchedule.constant(float(delta))


def maybe_trigger(current: np.ndarray, last_sent: np.ndarray, policy: TriggerPolicy,
                  k: int, rng: np.random.Generator) -> np.ndarray | None:
    """Return the delta to transmit (and advance ``last_sent`` in place), or ``None``."""
    delta = current - last_sent
    if not policy.fires(float(np.linalg.norm(delta)), k, rng):
        return None
    last_sent[...] = current
    return delta


@dataclass(frozen=True)
class DropModel:
    """Independent message loss with probability ``p_drop`` on the listed channels.

    ``chi_bar`` optionally declares a bound on the magnitude of a dropped
    payload; a realized drop above it is an error.
    """

    p_drop: float = 0.0
    channels: tuple[str, ...] = ("up",)
    chi_bar: float = np.inf

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be a probability")

    def applies(self, channel: str) -> bool:
        return self.p_drop > 0 and channel in self.channels

    def dropped(self, channel: str, rng: np.random.Generator) -> bool:
        if not self.applies(channel):
            return False
        return bool(rng.random() < self.p_drop)


class DropBoundExceeded(AssertionError):
    pass


@dataclass
class CommLog:
    """Message counters for one run.

    ``full_per_round`` is the number of messages a full-communication round
    sends, so ``load`` is 1.0 for a run that transmits everything.
    """

    full_per_round: int
    uploads_sent: int = 0
    uploads_dropped: int = 0
    downloads_sent: int = 0
    downloads_dropped: int = 0
    reset_messages: int = 0
    rounds: int = 0
    chi_max: dict = field(default_factory=dict)

    @property
    def sent(self) -> int:
        return self.uploads_sent + self.downloads_sent

    @property
    def dropped(self) -> int:
        return self.uploads_dropped + self.downloads_dropped

    @property
    def load(self) -> float:
        if self.rounds == 0:
            return 0.0
        return self.sent / (self.full_per_round * self.rounds)

    @property
    def load_with_resets(self) -> float:
        if self.rounds == 0:
            return 0.0
        return (self.sent + self.reset_messages) / (self.full_per_round * self.rounds)

    def record_drop(self, channel: str, payload: np.ndarray, chi_bar: float = np.inf) -> float:
        size = float(np.linalg.norm(payload))
        self.chi_max[channel] = max(self.chi_max.get(channel, 0.0), size)
        if size > chi_bar:
            raise DropBoundExceeded(f"dropped payload {size:.3e} on {channel} exceeds declared bound {chi_bar:.3e}")
        return size
