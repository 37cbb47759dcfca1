"""Experiment specifications: a flat JSON object validated before any run."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

KINDS = ("consensus-lasso", "consensus-regression", "general", "sharing", "graph", "drop-study",
         "decay-study", "nonconvex-study", "certify-grid", "tradeoff-sweep")


class SpecError(ValueError):
    """Invalid experiment specification; the message names the offending key."""


def _inf_or_int(v):
    if v is None or v == "inf" or (isinstance(v, float) and math.isinf(v)):
        return math.inf
    if isinstance(v, bool) or not float(v).is_integer() or v < 1:
        raise SpecError(f"T: expected a positive integer or 'inf', got {v!r}")
    return int(v)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything an experiment driver needs.

    Defaults reproduce the LASSO trade-off study (50 agents, 50 iterations,
    rho = 1, lambda = 0.1). ``T`` accepts ``"inf"`` in JSON.
    """

    kind: str = "tradeoff-sweep"
    N: int = 50
    n: int = 20
    rows_per_agent: int = 10
    lam: float = 0.1
    rho: float = 1.0
    alpha: float = 1.0
    T: float = math.inf
    horizon: int = 50
    deltas: tuple = (0.0, 1e-3, 2e-3, 5e-3, 1e-2)
    delta_z_ratio: float = 1.0
    p_trig: float = 0.0
    p_drop: float = 0.0
    drop_channels: tuple = ("up",)
    resets: tuple = (1, 5, 10, math.inf)
    decay_t: tuple = (1.0, 2.0)
    delta0: float = 1e-2
    kappa: float = 100.0
    eps: float = 0.0
    p: int = 6
    n_edges: int = 35
    graph_file: str | None = None
    target_gap: float = 1e-3
    random_p: tuple = (0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
    seeds: tuple = (0,)
    workers: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"kind: unknown experiment kind {self.kind!r}")
        for key in ("N", "n", "rows_per_agent", "horizon", "p", "n_edges", "workers"):
            v = getattr(self, key)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise SpecError(f"{key}: expected a positive integer, got {v!r}")
        if self.N < 2:
            raise SpecError("N: need at least two agents")
        for key in ("rho", "kappa", "target_gap"):
            if not getattr(self, key) > 0:
                raise SpecError(f"{key}: must be positive")
        if not 0 < self.alpha < 2:
            raise SpecError("alpha: must lie in (0, 2)")
        for key in ("p_trig", "p_drop"):
            if not 0 <= getattr(self, key) <= 1:
                raise SpecError(f"{key}: must be a probability")
        if any(d < 0 for d in self.deltas):
            raise SpecError("deltas: thresholds must be nonnegative")
        if self.lam < 0 or self.eps < 0 or self.delta0 < 0:
            raise SpecError("lam, eps and delta0 must be nonnegative")
        if not self.seeds:
            raise SpecError("seeds: need at least one seed")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        if not isinstance(raw, dict):
            raise SpecError("spec must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise SpecError(f"unknown key {unknown[0]!r}")
        kw = {}
        for key, value in raw.items():
            try:
                if key == "T":
                    value = _inf_or_int(value)
                elif key == "resets":
                    value = tuple(_inf_or_int(v) for v in value)
                elif key == "seeds":
                    value = tuple(int(s) for s in value)
                elif isinstance(known[key].default, tuple):
                    value = tuple(value)
                elif isinstance(known[key].default, float) and isinstance(value, (int, float)) \
                        and not isinstance(value, bool):
                    value = float(value)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(f"{key}: {exc}") from None
            kw[key] = value
        kind = kw.get("kind", cls.kind)
        if kind not in KINDS:
            raise SpecError(f"kind: unknown experiment kind {kind!r}")
        try:
            return default_spec(kind).replace(**kw)
        except TypeError as exc:
            raise SpecError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec file is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def replace(self, **kw) -> "ExperimentSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("T",):
            if out[key] == math.inf:
                out[key] = "inf"
        out["resets"] = ["inf" if r == math.inf else r for r in out["resets"]]
        return out


def default_spec(kind: str) -> ExperimentSpec:
    """Defaults for one experiment kind; JSON keys override them."""
    base = ExperimentSpec(kind=kind)
    if kind == "consensus-regression":
        return base.replace(lam=0.0, alpha=1.5)
    if kind == "drop-study":
        return base.replace(p_drop=0.3, deltas=(1e-3,))
    if kind == "graph":
        return base.replace(N=10, rows_per_agent=20, n=10, lam=0.0, horizon=1000,
                            deltas=(1e-2, 3e-2, 0.1, 0.2))
    if kind == "nonconvex-study":
        return base.replace(N=10, n=5, lam=0.1, rho=4.0, horizon=10_000, delta0=1.0)
    if kind == "decay-study":
        return base.replace(horizon=3000, delta0=1e-2)
    return base

