from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LabelCalendar:
    """Which target rows of a forecast are known at a given wall-clock step.

    A forecast whose first target row is ``t_star`` has ``clamp(step - t_star, 0, H)``
    observed rows at ``step``. With ``poison`` set, :meth:`reveal` returns the
    full horizon with every unobserved row filled with NaN, so any read past
    the observed prefix shows up downstream.
    """

    values: np.ndarray
    horizon: int
    poison: bool = False

    def observed(self, t_star: int, step: int) -> int:
        return int(np.clip(step - t_star, 0, self.horizon))

    def is_complete(self, t_star: int, step: int) -> bool:
        return step >= t_star + self.horizon

    def reveal(self, t_star: int, step: int) -> np.ndarray:
        n_observed = self.observed(t_star, step)
        known = self.values[t_star : t_star + n_observed]
        if not self.poison:
            return known.copy()
        revealed = np.full((self.horizon, self.values.shape[1]), np.nan)
        revealed[:n_observed] = known
        return revealed

    def reveal_batch(self, t_stars: list[int], step: int, n_rows: int) -> np.ndarray:
        """Stack the first ``n_rows`` revealed rows of several forecasts into ``[B, n_rows, V]``."""
        return np.stack([self.reveal(t, step)[:n_rows] for t in t_stars])
