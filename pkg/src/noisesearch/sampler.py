"""Deterministic ODE solvers, an SDE solver, and exact NFE accounting.

The reverse dynamics are integrated in the sigma parametrization with the
identity time-sigma map, so the probability-flow ODE reads
``dx/dsigma = -sigma * score(x, sigma)``.  Heun's method applies the
trapezoidal corrector on every step except the final step to sigma = 0,
which is a plain Euler step; a Heun solve over n steps therefore costs
2n - 1 evaluations of the score field, and an Euler solve costs n.
"""

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalDivergenceError
from .mixture import _as_batch

DEFAULT_SIGMA_MAX = 80.0
DEFAULT_SIGMA_MIN = 0.002
DEFAULT_RHO = 7.0


@dataclass(frozen=True)
class SigmaSchedule:
    """Decreasing noise levels sigma_0 = sigma_max > ... > sigma_n = 0.

    ``levels`` has length n + 1 for n solver steps.  Instances built by
    :func:`make_schedule` are validated; direct construction is available
    for custom level sequences.
    """

    levels: np.ndarray
    sigma_max: float
    sigma_min: float
    rho: float

    @property
    def steps(self):
        return len(self.levels) - 1


def make_schedule(steps, sigma_max=DEFAULT_SIGMA_MAX, sigma_min=DEFAULT_SIGMA_MIN, rho=DEFAULT_RHO):
    """Polynomial noise-level discretization from sigma_max down to 0.

    Levels follow ``(sigma_max^(1/rho) + t (sigma_min^(1/rho) -
    sigma_max^(1/rho)))^rho`` for t in [0, 1], with a final level of
    exactly 0 appended.  steps = 1 yields [sigma_max, 0].
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (sigma_max > sigma_min > 0.0):
        raise ValueError("need sigma_max > sigma_min > 0")
    if steps == 1:
        levels = np.array([sigma_max, 0.0])
    else:
        t = np.arange(steps) / (steps - 1)
        inv_rho = 1.0 / rho
        body = (sigma_max**inv_rho + t * (sigma_min**inv_rho - sigma_max**inv_rho)) ** rho
        body[0] = sigma_max
        body[-1] = sigma_min
        levels = np.concatenate([body, [0.0]])
    return SigmaSchedule(levels=levels, sigma_max=float(sigma_max), sigma_min=float(sigma_min), rho=float(rho))


class NfeLedger:
    """Audited count of score-field evaluations.

    Counters are split into search cost and final-generation (denoise)
    cost and only ever increase.  Increments are atomic so concurrent
    candidate simulations may share one ledger.
    """

    def __init__(self, search_nfe=0, denoise_nfe=0):
        self._lock = threading.Lock()
        self._search = int(search_nfe)
        self._denoise = int(denoise_nfe)

    @property
    def search_nfe(self):
        return self._search

    @property
    def denoise_nfe(self):
        return self._denoise

    def total(self):
        return self._search + self._denoise

    def add(self, kind, n):
        if n < 0:
            raise ValueError("ledger increments must be non-negative")
        with self._lock:
            if kind == "search":
                self._search += int(n)
            elif kind == "denoise":
                self._denoise += int(n)
            else:
                raise ValueError(f"unknown ledger kind {kind!r}")

    def snapshot(self):
        return NfeLedger(self._search, self._denoise)

    def __repr__(self):
        return f"NfeLedger(search_nfe={self._search}, denoise_nfe={self._denoise})"


@dataclass
class Trajectory:
    """States of one batched solver run.

    Attributes:
        sigmas: Noise levels visited, shape ``(S + 1,)``, non-increasing.
        states: States at each level, shape ``(S + 1, B, d)``.
        x0_sigmas: Levels at which clean-sample predictions were cached.
        x0_states: Cached predictions, shape ``(C, B, d)``.
    """

    sigmas: np.ndarray
    states: np.ndarray
    x0_sigmas: np.ndarray
    x0_states: np.ndarray

    @property
    def final(self):
        """Terminal states, shape (B, d)."""
        return self.states[-1]

    @property
    def final_sigma(self):
        return float(self.sigmas[-1])

    @property
    def n_candidates(self):
        return self.states.shape[1]

    def final_sample(self, i=0):
        """Terminal state of candidate i as a flat vector."""
        return np.array(self.states[-1, i])

    def x_prediction_at(self, sigma_lo):
        """Cached clean-sample prediction at the first level <= sigma_lo.

        Falls back to the terminal state when no cached level qualifies
        (for completed trajectories the terminal state at sigma = 0 is
        itself the prediction).
        """
        for j, s in enumerate(self.x0_sigmas):
            if s <= sigma_lo:
                return self.x0_states[j]
        return self.final

    def select(self, i):
        """Single-candidate view of candidate i (B = 1)."""
        return Trajectory(
            sigmas=self.sigmas,
            states=self.states[:, i : i + 1, :],
            x0_sigmas=self.x0_sigmas,
            x0_states=self.x0_states[:, i : i + 1, :] if self.x0_states.size else self.x0_states,
        )

    @staticmethod
    def concat(trajectories):
        """Concatenate same-schedule trajectories along the candidate axis."""
        first = trajectories[0]
        for t in trajectories[1:]:
            if not np.array_equal(t.sigmas, first.sigmas):
                raise ValueError("cannot concatenate trajectories with different schedules")
        return Trajectory(
            sigmas=first.sigmas,
            states=np.concatenate([t.states for t in trajectories], axis=1),
            x0_sigmas=first.x0_sigmas,
            x0_states=np.concatenate([t.x0_states for t in trajectories], axis=1),
        )

    def to_csv(self, path, candidate=0):
        """Write one candidate's states as rows (step, sigma, x_0..x_{d-1})."""
        d = self.states.shape[2]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "sigma"] + [f"x_{j}" for j in range(d)])
            for i in range(len(self.sigmas)):
                writer.writerow([i, repr(float(self.sigmas[i]))] + [repr(float(v)) for v in self.states[i, candidate]])


def _charge(ledger, kind, n):
    if ledger is not None:
        ledger.add(kind, n)


def _check_finite(x, sigma):
    if not np.all(np.isfinite(x)):
        raise NumericalDivergenceError(f"non-finite state at sigma={sigma}", sigma=sigma)


def _integrate_heun(field, x0, levels, ledger, charge):
    """Shared Heun engine over an explicit level sequence.

    Steps into an exactly-zero level are plain Euler; all other steps use
    the trapezoidal corrector.  Clean-sample predictions are cached at
    every level where the score is evaluated, at no extra cost.
    """
    x = np.array(x0, dtype=np.float64)
    b = x.shape[0]
    states = [x.copy()]
    x0_sigmas = []
    x0_states = []
    for i in range(len(levels) - 1):
        s_cur = float(levels[i])
        s_next = float(levels[i + 1])
        score = field.score(x, s_cur)
        _charge(ledger, charge, b)
        x0_sigmas.append(s_cur)
        x0_states.append(x + s_cur * s_cur * score)
        d_cur = -s_cur * score
        x_euler = x + (s_next - s_cur) * d_cur
        if s_next == 0.0:
            x = x_euler
        else:
            score_next = field.score(x_euler, s_next)
            _charge(ledger, charge, b)
            d_next = -s_next * score_next
            x = x + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        _check_finite(x, s_next)
        states.append(x.copy())
    return Trajectory(
        sigmas=np.asarray(levels, dtype=np.float64),
        states=np.stack(states),
        x0_sigmas=np.asarray(x0_sigmas),
        x0_states=np.stack(x0_states) if x0_states else np.empty((0, b, x.shape[1])),
    )


def heun_solve(field, noise, schedule, ledger=None, charge="denoise"):
    """Integrate the reverse ODE with Heun's method.

    Args:
        field: Score field exposing ``score(x, sigma)``.
        noise: Starting state at sigma_max, shape ``(d,)`` or ``(B, d)``.
        schedule: SigmaSchedule to follow.
        ledger: Optional NfeLedger receiving ``(2 steps - 1) * B`` counts.
        charge: Ledger counter to charge, "search" or "denoise".

    Returns:
        Completed Trajectory (terminal sigma equals the last level).
    """
    xb, _ = _as_batch(noise, field.dim)
    return _integrate_heun(field, xb, schedule.levels, ledger, charge)


def euler_solve(field, noise, schedule, ledger=None, charge="denoise"):
    """Integrate the reverse ODE with first-order Euler steps (n NFEs)."""
    xb, _ = _as_batch(noise, field.dim)
    x = np.array(xb, dtype=np.float64)
    b = x.shape[0]
    levels = schedule.levels
    states = [x.copy()]
    x0_sigmas = []
    x0_states = []
    for i in range(len(levels) - 1):
        s_cur = float(levels[i])
        s_next = float(levels[i + 1])
        score = field.score(x, s_cur)
        _charge(ledger, charge, b)
        x0_sigmas.append(s_cur)
        x0_states.append(x + s_cur * s_cur * score)
        x = x + (s_next - s_cur) * (-s_cur * score)
        _check_finite(x, s_next)
        states.append(x.copy())
    return Trajectory(
        sigmas=np.asarray(levels, dtype=np.float64),
        states=np.stack(states),
        x0_sigmas=np.asarray(x0_sigmas),
        x0_states=np.stack(x0_states),
    )


def sde_solve(field, noise, schedule, rng, ledger=None, charge="denoise"):
    """Euler-Maruyama discretization of the reverse SDE (n NFEs).

    Drift is ``-2 sigma' sigma grad log p`` and diffusion ``sqrt(2 sigma'
    sigma)``; with the identity time-sigma map a step of width
    ``delta = sigma_cur - sigma_next`` reads
    ``x += 2 sigma delta score + sqrt(2 sigma delta) eps``.
    A zero-width segment leaves the state unchanged.
    """
    xb, _ = _as_batch(noise, field.dim)
    x = np.array(xb, dtype=np.float64)
    b, d = x.shape
    levels = schedule.levels
    states = [x.copy()]
    x0_sigmas = []
    x0_states = []
    for i in range(len(levels) - 1):
        s_cur = float(levels[i])
        s_next = float(levels[i + 1])
        delta = s_cur - s_next
        score = field.score(x, s_cur)
        _charge(ledger, charge, b)
        x0_sigmas.append(s_cur)
        x0_states.append(x + s_cur * s_cur * score)
        eps = rng.standard_normal((b, d))
        x = x + 2.0 * s_cur * delta * score + np.sqrt(2.0 * s_cur * delta) * eps
        _check_finite(x, s_next)
        states.append(x.copy())
    return Trajectory(
        sigmas=np.asarray(levels, dtype=np.float64),
        states=np.stack(states),
        x0_sigmas=np.asarray(x0_sigmas),
        x0_states=np.stack(x0_states),
    )


def forward_noise(x, sigma_from, sigma_to, rng):
    """Forward-noising kernel: add Gaussian noise lifting sigma_from to sigma_to."""
    if sigma_to < sigma_from or sigma_from < 0.0:
        raise ValueError(f"need sigma_to >= sigma_from >= 0, got {sigma_from} -> {sigma_to}")
    x = np.asarray(x, dtype=np.float64)
    var = sigma_to * sigma_to - sigma_from * sigma_from
    if var == 0.0:
        return x.copy()
    return x + np.sqrt(var) * rng.standard_normal(x.shape)


def partial_sub_levels(sigma_from, sigma_to, steps, sigma_min=DEFAULT_SIGMA_MIN, rho=DEFAULT_RHO):
    """Level sequence for a solve restricted to [sigma_from, sigma_to].

    For sigma_to = 0 this matches :func:`make_schedule` anchored at
    sigma_from (so the restriction degenerates to a full solve); for
    sigma_to > 0 the levels interpolate between the endpoints in
    rho-warped space with no trailing zero.
    """
    if not (sigma_from > sigma_to >= 0.0):
        raise ValueError(f"need sigma_from > sigma_to >= 0, got {sigma_from} -> {sigma_to}")
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if sigma_to == 0.0:
        eff_min = min(sigma_min, sigma_from / 2.0)
        return make_schedule(steps, sigma_from, eff_min, rho).levels
    inv_rho = 1.0 / rho
    t = np.arange(steps + 1) / steps
    levels = (sigma_from**inv_rho + t * (sigma_to**inv_rho - sigma_from**inv_rho)) ** rho
    levels[0] = sigma_from
    levels[-1] = sigma_to
    return levels


def partial_solve(field, x, sigma_from, sigma_to, steps, ledger=None, charge="search",
                  sigma_min=DEFAULT_SIGMA_MIN, rho=DEFAULT_RHO):
    """Heun integration restricted to [sigma_from, sigma_to].

    Costs ``2 steps - 1`` NFEs per candidate when sigma_to = 0 (the final
    step to zero is Euler, as in a full solve) and ``2 steps`` otherwise:
    mid-trajectory restrictions never take the final-Euler shortcut.
    """
    levels = partial_sub_levels(sigma_from, sigma_to, steps, sigma_min=sigma_min, rho=rho)
    xb, _ = _as_batch(x, field.dim)
    return _integrate_heun(field, xb, levels, ledger, charge)
