"""Analytic score fields for Gaussian-mixture data distributions.

A mixture convolved with isotropic Gaussian noise of standard deviation
``sigma`` is again a mixture, with each component covariance inflated to
``cov + sigma^2 I``.  Densities, scores (gradients of log-density),
component posteriors and clean-sample predictions are therefore available
in closed form at every noise level, which is what lets samplers and
search algorithms in this package be tested against exact oracles.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))

_WEIGHT_TOL = 1e-12
_SYM_TOL = 1e-12


def _as_batch(x, dim):
    """Coerce x to a (B, dim) float array; report whether it was 1-D."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains non-finite values")
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"expected vectors of dimension {dim}, got {arr.shape[0]}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ValueError(f"expected vectors of dimension {dim}, got {arr.shape[1]}")
        return arr, False
    raise ValueError("input must be a vector or a batch of vectors")


def _check_sigma(sigma):
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma < 0.0:
        raise ValueError(f"sigma must be a finite non-negative scalar, got {sigma}")
    return sigma


class MixtureModel:
    """Weighted Gaussian mixture with full covariance components.

    Attributes:
        weights: Component weights, shape ``(K,)``, positive, summing to 1.
        means: Component means, shape ``(K, d)``.
        covariances: Component covariances, shape ``(K, d, d)``, each SPD.
        dim: Dimensionality ``d``.
        data_std: Largest per-component standard deviation (informational).
    """

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.covariances = np.asarray(covariances, dtype=np.float64)
        self._validate()
        # Eigendecompositions are reused for every noise level: the
        # mollified covariance cov + sigma^2 I shares eigenvectors with cov.
        eigvals, eigvecs = np.linalg.eigh(self.covariances)
        self._eigvals = eigvals      # (K, d)
        self._eigvecs = eigvecs      # (K, d, d)
        self.data_std = float(np.sqrt(eigvals.max()))

    def _validate(self):
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ValueError("weights must be a non-empty 1-D array")
        k = self.weights.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != k:
            raise ValueError("means must have shape (K, d)")
        d = self.means.shape[1]
        if self.covariances.shape != (k, d, d):
            raise ValueError("covariances must have shape (K, d, d)")
        if np.any(self.weights <= 0.0):
            raise ValueError("all component weights must be positive")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1 within {_WEIGHT_TOL}")
        asym = np.abs(self.covariances - np.transpose(self.covariances, (0, 2, 1)))
        if asym.max() > _SYM_TOL:
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(self.covariances) <= 0.0):
            raise ValueError("covariances must be positive definite")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.shape[0]

    # ------------------------------------------------------------------
    # Mollified component densities
    # ------------------------------------------------------------------

    def _log_component_densities(self, x, sigma):
        """Per-component log N(x; mean_k, cov_k + sigma^2 I), shape (B, K)."""
        xb, _ = _as_batch(x, self.dim)
        sigma = _check_sigma(sigma)
        b, d = xb.shape
        out = np.empty((b, self.n_components))
        for k in range(self.n_components):
            lam = self._eigvals[k] + sigma * sigma          # (d,)
            q = self._eigvecs[k]                            # (d, d)
            y = (xb - self.means[k]) @ q                    # coords in eigenbasis
            maha = np.sum(y * y / lam, axis=1)
            out[:, k] = -0.5 * (d * LOG_2PI + np.sum(np.log(lam)) + maha)
        return out

    def _component_scores(self, x, sigma):
        """Per-component score -(cov_k + sigma^2 I)^{-1}(x - mean_k), (B, K, d)."""
        xb, _ = _as_batch(x, self.dim)
        sigma = _check_sigma(sigma)
        b, d = xb.shape
        out = np.empty((b, self.n_components, d))
        for k in range(self.n_components):
            lam = self._eigvals[k] + sigma * sigma
            q = self._eigvecs[k]
            y = (xb - self.means[k]) @ q
            out[:, k, :] = -(y / lam) @ q.T
        return out

    # ------------------------------------------------------------------
    # Public field operations
    # ------------------------------------------------------------------

    def log_density(self, x, sigma=0.0):
        """Log-density of the mixture mollified at noise level sigma.

        Aggregation over components uses max-subtracted log-sum-exp so that
        widely separated components do not underflow.
        """
        xb, squeeze = _as_batch(x, self.dim)
        logn = self._log_component_densities(xb, sigma)
        out = logsumexp(logn + np.log(self.weights)[None, :], axis=1)
        return float(out[0]) if squeeze else out

    def score(self, x, sigma=0.0):
        """Gradient of the mollified log-density at x."""
        xb, squeeze = _as_batch(x, self.dim)
        logn = self._log_component_densities(xb, sigma)
        logw = logn + np.log(self.weights)[None, :]
        logw -= logw.max(axis=1, keepdims=True)
        resp = np.exp(logw)
        resp /= resp.sum(axis=1, keepdims=True)             # (B, K)
        comp = self._component_scores(xb, sigma)            # (B, K, d)
        out = np.sum(resp[:, :, None] * comp, axis=1)
        return out[0] if squeeze else out

    def posterior(self, x, sigma=0.0):
        """Bayes posterior over components, p(k | x; sigma), rows sum to 1."""
        xb, squeeze = _as_batch(x, self.dim)
        logn = self._log_component_densities(xb, sigma) + np.log(self.weights)[None, :]
        logn -= logn.max(axis=1, keepdims=True)
        p = np.exp(logn)
        p /= p.sum(axis=1, keepdims=True)
        return p[0] if squeeze else p

    def x_prediction(self, x, sigma):
        """Posterior-mean estimate of the clean sample, x + sigma^2 * score."""
        sigma = _check_sigma(sigma)
        if sigma == 0.0:
            xb, squeeze = _as_batch(x, self.dim)
            return xb[0] if squeeze else xb
        return np.asarray(x, dtype=np.float64) + sigma * sigma * self.score(x, sigma)

    def sample(self, rng, n):
        """Draw n exact samples from the mixture."""
        counts = rng.multinomial(n, self.weights)
        parts = []
        for k, c in enumerate(counts):
            if c > 0:
                parts.append(rng.multivariate_normal(self.means[k], self.covariances[k], size=c))
        out = np.concatenate(parts, axis=0)
        return out[rng.permutation(n)]

    def exact_stats(self):
        """Closed-form mean and covariance of the mixture.

        Returns:
            (mean, covariance) with shapes ``(d,)`` and ``(d, d)``.
        """
        mean = self.weights @ self.means
        cov = np.zeros((self.dim, self.dim))
        for k in range(self.n_components):
            dm = self.means[k] - mean
            cov += self.weights[k] * (self.covariances[k] + np.outer(dm, dm))
        return mean, cov

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_dict(self):
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": float(self.weights[k]),
                    "mean": self.means[k].tolist(),
                    "covariance": self.covariances[k].tolist(),
                }
                for k in range(self.n_components)
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        if "components" not in doc:
            raise ValueError("model document missing 'components'")
        comps = doc["components"]
        weights = [c["weight"] for c in comps]
        means = [c["mean"] for c in comps]
        covs = [c["covariance"] for c in comps]
        model = cls(weights, means, covs)
        if "dim" in doc and int(doc["dim"]) != model.dim:
            raise ValueError(f"declared dim {doc['dim']} does not match components (d={model.dim})")
        return model

    def save(self, path):
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as handle:
            return cls.from_dict(json.load(handle))


def default_model():
    """The standard desk-scale model: four unit-covariance components at
    (+-4, +-4) with equal weights, separated enough that class-confidence
    scores are informative but small enough for exhaustive oracles."""
    means = [[4.0, 4.0], [4.0, -4.0], [-4.0, 4.0], [-4.0, -4.0]]
    covs = [np.eye(2)] * 4
    return MixtureModel([0.25, 0.25, 0.25, 0.25], means, covs)


@dataclass(frozen=True)
class ConditionedField:
    """A mixture score field with an optional class condition and guidance.

    With ``condition=None`` this is the unconditional mixture field.  With a
    condition c and guidance weight w, the score is blended as
    ``s_uncond + w * (s_cond - s_uncond)``; ``w == 1`` returns the pure
    conditional field exactly (no blending arithmetic).

    One call to :meth:`score` counts as one function evaluation regardless
    of guidance weight.
    """

    model: MixtureModel
    condition: int | None = None
    guidance_weight: float = 1.0

    def __post_init__(self):
        if self.condition is not None:
            c = int(self.condition)
            if not 0 <= c < self.model.n_components:
                raise ValueError(f"condition {c} out of range for {self.model.n_components} components")
            object.__setattr__(self, "condition", c)
        w = float(self.guidance_weight)
        if not np.isfinite(w) or w < 0.0:
            raise ValueError(f"guidance_weight must be finite and >= 0, got {w}")
        object.__setattr__(self, "guidance_weight", w)

    @property
    def dim(self):
        return self.model.dim

    def _conditional_score(self, x, sigma):
        comp = self.model._component_scores(x, sigma)
        return comp[:, self.condition, :]

    def _conditional_log_density(self, x, sigma):
        logn = self.model._log_component_densities(x, sigma)
        return logn[:, self.condition]

    def score(self, x, sigma=0.0):
        """Guided score field at noise level sigma."""
        if self.condition is None:
            return self.model.score(x, sigma)
        xb, squeeze = _as_batch(x, self.dim)
        w = self.guidance_weight
        if w == 1.0:
            out = self._conditional_score(xb, sigma)
        else:
            s_uncond = self.model.score(xb, sigma)
            s_cond = self._conditional_score(xb, sigma)
            out = s_uncond + w * (s_cond - s_uncond)
        return out[0] if squeeze else out

    def log_density(self, x, sigma=0.0):
        """Log-potential whose gradient is :meth:`score`.

        Unconditional: mixture log-density.  Conditional with w == 1: the
        conditioned component's log-density.  Otherwise the geometric
        interpolation (1-w) log p + w log p_c, which is unnormalized for
        w outside {0, 1} but has exactly the guided score as gradient.
        """
        if self.condition is None:
            return self.model.log_density(x, sigma)
        xb, squeeze = _as_batch(x, self.dim)
        w = self.guidance_weight
        if w == 1.0:
            out = self._conditional_log_density(xb, sigma)
        else:
            out = (1.0 - w) * self.model.log_density(xb, sigma) + w * self._conditional_log_density(xb, sigma)
        return float(out[0]) if squeeze else out

    def x_prediction(self, x, sigma):
        """Clean-sample estimate x + sigma^2 * score; identity at sigma 0."""
        sigma = _check_sigma(sigma)
        if sigma == 0.0:
            xb, squeeze = _as_batch(x, self.dim)
            return xb[0] if squeeze else xb
        return np.asarray(x, dtype=np.float64) + sigma * sigma * self.score(x, sigma)
