"""Online hybrid controller: performance law inside the TEB, minimax safe law near its edge."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import UNICYCLE, RelativeSystem, wrap_angle
from .errors import DomainError, SafetyAbort
from .grid import GridSpec
from .hji import Teb, safe_control

PERFORMANCE_KINDS = ("constant", "proportional")
SAFE, PERFORMANCE = "safe", "performance"


def default_margin(teb: Teb) -> float:
    """One position-axis grid cell of value slack.

    The stage cost is 1-Lipschitz in (x_r, y_r), so a cell-sized margin covers
    the interpolation error of V across one cell in the position plane.
    """
    return float(max(teb.plane.spacing))


@dataclass
class HybridConfig:
    """Switching margin, performance law and control period.

    ``performance`` is ``{"kind": "constant", "input": [u1, u2]}`` or
    ``{"kind": "proportional", "k_speed": .., "k_heading": ..}``. ``delta=None``
    uses :func:`default_margin`. ``always_safe`` applies the safe law at every
    step (the switching rule with an infinite margin).
    """

    delta: float | None = None
    performance: dict = field(default_factory=lambda: {"kind": "proportional", "k_speed": 1.0, "k_heading": 2.0})
    period: float = 0.1
    always_safe: bool = False

    def __post_init__(self):
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not self.period > 0:
            raise ValueError("control period must be positive")
        kind = self.performance.get("kind")
        if kind not in PERFORMANCE_KINDS:
            raise ValueError(f"performance.kind must be one of {PERFORMANCE_KINDS}")
        if kind == "constant" and len(self.performance.get("input", ())) != 2:
            raise ValueError("constant performance controller needs a two-component input")

    def margin(self, teb: Teb) -> float:
        return default_margin(teb) if self.delta is None else float(self.delta)

    def to_json(self) -> dict:
        return {"delta": self.delta, "performance": dict(self.performance), "period_s": self.period, "always_safe": self.always_safe}

    @classmethod
    def from_json(cls, d: dict) -> "HybridConfig":
        return cls(d.get("delta"), dict(d.get("performance", {"kind": "proportional", "k_speed": 1.0, "k_heading": 2.0})),
                   d.get("period_s", 0.1), d.get("always_safe", False))


@dataclass(frozen=True)
class ControlDecision:
    input: np.ndarray
    mode: str
    value: float
    r: np.ndarray


def performance_input(s, p, cfg: HybridConfig, sys: RelativeSystem) -> np.ndarray:
    """The configured performance law, clipped to the tracker input box."""
    perf = cfg.performance
    lo, hi = sys.tracker_lo, sys.tracker_hi
    if perf["kind"] == "constant":
        u = np.asarray(perf["input"], dtype=float)
    else:
        dx, dy = p[0] - s[0], p[1] - s[1]
        dist = math.hypot(dx, dy)
        err = wrap_angle(math.atan2(dy, dx) - s[2]) if dist > 1e-9 else 0.0
        ks, kh = float(perf.get("k_speed", 1.0)), float(perf.get("k_heading", 2.0))
        push = ks * dist * max(math.cos(err), 0.0)
        if sys.mode == UNICYCLE:
            u = np.array([push, kh * err])
        else:
            u = np.array([push + kh * err, push - kh * err])
    return np.clip(u, lo, hi)


def hybrid_step(s, p, teb: Teb, cfg: HybridConfig, sys: RelativeSystem) -> ControlDecision:
    """Safe law when ``V(r) >= vbar - delta`` (or always, if configured), else the performance law.

    Raises :class:`SafetyAbort` if the relative state has left the value grid.
    """
    r = sys.relative_state(s, p)
    v = teb.value
    if not v.spec.contains(r):
        raise SafetyAbort(f"relative state {np.round(r, 4).tolist()} left the value grid")
    val = v(r)
    if not cfg.always_safe and val < teb.vbar - cfg.margin(teb):
        return ControlDecision(performance_input(s, p, cfg, sys), PERFORMANCE, val, r)
    try:
        u = safe_control(v, r, sys)
    except DomainError as exc:
        raise SafetyAbort(str(exc)) from exc
    return ControlDecision(u, SAFE, val, r)


def tracking_tube(teb: Teb, x_p: float, y_p: float) -> tuple[GridSpec, np.ndarray]:
    """Raster of ``{(x, y): (x - x_p, y - y_p) in B_e(y)}`` on the TEB plane shifted to the planner.

    Each row uses the projection at its own absolute y.
    """
    plane = teb.plane
    spec = GridSpec(
        (plane.lo[0] + x_p, plane.lo[1] + y_p),
        (plane.hi[0] + x_p, plane.hi[1] + y_p),
        plane.n,
        names=("x", "y"),
    )
    ys = spec.axis(1)
    mask = np.zeros(plane.shape, dtype=bool)
    for j, y in enumerate(ys):
        mask[:, j] = teb.projection_at(y)[:, j]
    return spec, mask
