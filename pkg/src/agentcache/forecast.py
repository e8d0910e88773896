from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._validation import STOCHASTIC_ATOL, ValidationError, check_distributions


@dataclass(frozen=True, eq=False)
class Forecast:
    """K per-step distributions over ``agents + [END]`` for one workflow.

    Row ``k`` (0-based) is the distribution of the invocation ``k + 1`` steps
    ahead, conditioned on the workflow still being alive at that step. The
    last column is the END outcome.
    """

    steps: np.ndarray

    def __post_init__(self):
        arr = check_distributions(self.steps, "forecast steps")
        arr = np.clip(arr, 0.0, None)
        arr.setflags(write=False)
        object.__setattr__(self, "steps", arr)

    @property
    def horizon(self) -> int:
        return self.steps.shape[0]

    @property
    def num_outcomes(self) -> int:
        return self.steps.shape[1]

    @property
    def num_agents(self) -> int:
        return self.steps.shape[1] - 1

    @property
    def p_end(self) -> np.ndarray:
        return self.steps[:, -1]

    @property
    def survival(self) -> np.ndarray:
        """Hazard product ``s[k] = prod_{j<k} (1 - p_end[j])`` with ``s[0] = 1``."""
        s = np.ones(self.horizon)
        for k in range(1, self.horizon):
            s[k] = s[k - 1] * (1.0 - self.p_end[k - 1])
        return s

    def step(self, k: int) -> np.ndarray:
        """Distribution ``k`` steps ahead, 1-indexed."""
        if not 1 <= k <= self.horizon:
            raise IndexError(f"step {k} outside 1..{self.horizon}")
        return self.steps[k - 1]

    def truncate(self, horizon: int) -> "Forecast":
        if not 1 <= horizon <= self.horizon:
            raise ValidationError(f"cannot truncate horizon {self.horizon} to {horizon}")
        return Forecast(self.steps[:horizon])

    def allclose(self, other: "Forecast", atol: float = 1e-9) -> bool:
        return self.steps.shape == other.steps.shape and np.allclose(
            self.steps, other.steps, rtol=0.0, atol=atol
        )

    @classmethod
    def terminal(cls, num_agents: int, horizon: int) -> "Forecast":
        steps = np.zeros((horizon, num_agents + 1))
        steps[:, -1] = 1.0
        return cls(steps)


def propagate(
    row_of: Callable[[tuple[int, ...]], np.ndarray],
    history: Sequence[int],
    horizon: int,
    context: int,
    num_agents: int,
) -> Forecast:
    """Roll a one-step model forward with END absorbing.

    ``row_of(state)`` returns the next-outcome distribution for a state made
    of the last ``context`` agents. Each returned step is renormalised by the
    mass still alive, which is what makes the END column a conditional hazard.
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    end = num_agents
    steps = np.zeros((horizon, num_agents + 1))
    states: dict[tuple[int, ...], float] = {tuple(history[-context:]): 1.0}
    for k in range(horizon):
        alive = sum(states.values())
        if alive <= 0.0:
            steps[k:, end] = 1.0
            break
        out = np.zeros(num_agents + 1)
        nxt: dict[tuple[int, ...], float] = defaultdict(float)
        for state, mass in states.items():
            row = row_of(state)
            out += mass * row
            for b in np.flatnonzero(row[:end] > 0.0):
                nxt[(state + (int(b),))[-context:]] += mass * row[b]
        out /= alive
        # absorb roundoff so every row is exactly on the simplex
        out /= out.sum()
        steps[k] = out
        states = nxt
    return Forecast(steps)


__all__ = ["Forecast", "propagate", "STOCHASTIC_ATOL"]
