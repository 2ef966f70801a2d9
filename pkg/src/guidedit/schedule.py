"""Noise schedule, timestep grid, and the DDIM step coefficients.

A schedule owns the cumulative signal coefficients alpha_t over the full
base timestep axis plus a strictly increasing sampling grid into it.
Sampling chains use integer *levels*: level -1 is the clean-data boundary
with alpha == 1 exactly (the usual convention for the final reverse step),
and levels 0..T-1 map onto the grid entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ScheduleError

DATA_LEVEL = -1

_FAMILIES = ("linear-beta", "cosine", "explicit-list")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable noise schedule; safe to share across concurrent samplers."""

    alphas: torch.Tensor          # cumulative signal coefficients, full base axis
    timestep_grid: tuple[int, ...]  # strictly increasing indices into alphas
    family: str = "explicit-list"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or a.numel() == 0:
            raise ScheduleError("alphas must be a non-empty 1-D sequence")
        if torch.any(a <= 0) or torch.any(a > 1):
            raise ScheduleError("alphas must lie in (0, 1]")
        if a.numel() > 1 and not torch.all(a[1:] < a[:-1]):
            raise ScheduleError("alphas must be strictly decreasing")
        grid = self.timestep_grid
        if len(grid) == 0:
            raise ScheduleError("timestep_grid must be non-empty")
        if any(g < 0 or g >= a.numel() for g in grid):
            raise ScheduleError("timestep_grid indices out of range")
        if any(b <= a_ for a_, b in zip(grid, grid[1:])):
            raise ScheduleError("timestep_grid must be strictly increasing")

    @property
    def T(self) -> int:
        """Number of sampling steps (grid length)."""
        return len(self.timestep_grid)

    @property
    def terminal_level(self) -> int:
        return self.T - 1

    def alpha(self, level: int) -> float:
        """Cumulative signal coefficient at a sampling level.

        Level -1 is the clean-data boundary and returns exactly 1.0.
        """
        if level == DATA_LEVEL:
            return 1.0
        if not 0 <= level < self.T:
            raise ScheduleError(f"level {level} outside [-1, {self.T - 1}]")
        return float(self.alphas[self.timestep_grid[level]])

    def base_timestep(self, level: int) -> int:
        """Base-axis timestep for a grid level; the data boundary maps to -1."""
        if level == DATA_LEVEL:
            return -1
        if not 0 <= level < self.T:
            raise ScheduleError(f"level {level} outside [-1, {self.T - 1}]")
        return self.timestep_grid[level]

    def serialize(self) -> str:
        """Plain-text key/value block for cache headers and configs."""
        lines = [f"schedule.family={self.family}"]
        for k in sorted(self.params):
            v = self.params[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"schedule.{k}={v}")
        lines.append("schedule.grid=" + ",".join(str(g) for g in self.timestep_grid))
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]


def _linear_beta_alphas(total_steps: int, beta_start: float, beta_end: float,
                        scaled: bool = True) -> torch.Tensor:
    if scaled:
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, total_steps,
                               dtype=torch.float64) ** 2
    else:
        betas = torch.linspace(beta_start, beta_end, total_steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


def _cosine_alphas(total_steps: int, offset: float = 0.008) -> torch.Tensor:
    t = torch.arange(1, total_steps + 1, dtype=torch.float64) / total_steps
    f = torch.cos((t + offset) / (1 + offset) * math.pi / 2) ** 2
    f0 = math.cos(offset / (1 + offset) * math.pi / 2) ** 2
    alphas = (f / f0).clamp(min=1e-8, max=1.0)
    # guard against flat tail after clamping
    for i in range(1, alphas.numel()):
        if alphas[i] >= alphas[i - 1]:
            alphas[i] = alphas[i - 1] * (1 - 1e-9)
    return alphas


def uniform_grid(total_steps: int, grid_steps: int) -> tuple[int, ...]:
    """Uniform-stride grid ending at the last base timestep.

    grid[i] = (i+1) * total // steps - 1, so refining the grid also moves
    its lowest entry toward the clean-data boundary.
    """
    if grid_steps > total_steps:
        raise ScheduleError("grid_steps must not exceed total_steps")
    return tuple((i + 1) * total_steps // grid_steps - 1 for i in range(grid_steps))


def build_schedule(total_steps: int = 1000, grid_steps: int = 50,
                   schedule_family: str = "linear-beta", **params) -> DiffusionSchedule:
    """Construct a schedule of the given family with a sampling grid.

    Families:
      linear-beta    beta ramp (sqrt-space interpolation by default) with
                     params beta_start (0.00085), beta_end (0.012), scaled.
      cosine         squared-cosine signal decay, param offset (0.008).
      explicit-list  params alphas=<sequence in (0,1], strictly decreasing>.

    An explicit params['grid'] overrides the uniform-stride grid (used for
    bit-exact reload from serialized blocks).
    """
    if total_steps < 1 or grid_steps < 1:
        raise ScheduleError("total_steps and grid_steps must be positive")
    if schedule_family not in _FAMILIES:
        raise ScheduleError(f"unknown schedule family {schedule_family!r}; "
                            f"expected one of {_FAMILIES}")
    explicit_grid = params.get("grid")

    if schedule_family == "explicit-list":
        raw = params.get("alphas")
        if raw is None:
            raise ScheduleError("explicit-list family requires params['alphas']")
        alphas = torch.as_tensor([float(a) for a in raw], dtype=torch.float64)
        grid = tuple(explicit_grid or range(alphas.numel()))
        kept = {"alphas": [float(a) for a in raw]}
        return DiffusionSchedule(alphas=alphas, timestep_grid=grid,
                                 family=schedule_family, params=kept)

    if schedule_family == "linear-beta":
        beta_start = float(params.get("beta_start", 0.00085))
        beta_end = float(params.get("beta_end", 0.012))
        scaled = bool(params.get("scaled", True))
        alphas = _linear_beta_alphas(total_steps, beta_start, beta_end, scaled)
        kept = {"total_steps": total_steps, "beta_start": beta_start,
                "beta_end": beta_end, "scaled": scaled}
    else:
        offset = float(params.get("offset", 0.008))
        alphas = _cosine_alphas(total_steps, offset)
        kept = {"total_steps": total_steps, "offset": offset}

    grid = tuple(explicit_grid) if explicit_grid else uniform_grid(total_steps,
                                                                   grid_steps)
    return DiffusionSchedule(alphas=alphas, timestep_grid=grid,
                             family=schedule_family, params=kept)


def gamma_from_alphas(alpha_prev: float, alpha_cur: float) -> float:
    """Step coefficient sqrt(a_prev/a_cur) - sqrt((1-a_prev)/(1-a_cur)).

    Zero whenever the two coefficients coincide; singular at alpha_cur == 1.
    """
    if alpha_cur >= 1.0:
        raise ScheduleError("gamma undefined at alpha == 1 (singular denominator)")
    if alpha_prev == alpha_cur:
        return 0.0
    return math.sqrt(alpha_prev / alpha_cur) - math.sqrt((1 - alpha_prev) / (1 - alpha_cur))


def gamma(schedule: DiffusionSchedule, t: int) -> float:
    """Reverse-step coefficient for the step level t -> t-1.

    Valid for t in [0, T-1]; t == 0 uses the alpha == 1 data boundary
    as the destination.
    """
    if not 0 <= t < schedule.T:
        raise ScheduleError(f"gamma: level {t} outside [0, {schedule.T - 1}]")
    return gamma_from_alphas(schedule.alpha(t - 1), schedule.alpha(t))


def gamma_fwd(schedule: DiffusionSchedule, t: int) -> float:
    """Forward-step coefficient for the step level t -> t+1.

    Same closed form as gamma with the destination coefficient on top:
    sqrt(a_{t+1}/a_t) - sqrt((1-a_{t+1})/(1-a_t)). Undefined at the data
    boundary (alpha == 1); the boundary inversion step uses the unrewritten
    update instead.
    """
    if not 0 <= t < schedule.T - 1:
        raise ScheduleError(f"gamma_fwd: level {t} outside [0, {schedule.T - 2}]")
    return gamma_from_alphas(schedule.alpha(t + 1), schedule.alpha(t))
