"""Two-component 1-D Gaussian mixture fitted by EM, used to split losses into clean/noisy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6


class DegenerateLossesError(ValueError):
    """All values identical; the caller should treat every sample as clean."""


@dataclass
class GmmFit:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    clean_posterior: np.ndarray
    iterations: int
    log_likelihood: float
    history: list[float] = field(default_factory=list)

    @property
    def clean_component(self) -> int:
        return int(np.argmin(self.means))


def normalize_losses(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo == 0:
        raise DegenerateLossesError("degenerate losses: all values identical")
    return (values - lo) / (hi - lo)


def _log_joint(x, means, variances, weights):
    # (n, 2) matrix of log(w_k * N(x | mu_k, var_k))
    return (np.log(weights) - 0.5 * np.log(2 * np.pi * variances)
            - (x[:, None] - means) ** 2 / (2 * variances))


def fit_gmm_1d(values, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
               normalize: bool = True, var_floor: float = VAR_FLOOR) -> GmmFit:
    """EM for a two-component mixture over per-sample losses.

    Values are min-max scaled to [0, 1] first (``normalize=True``).  Means start
    at the 10th and 90th percentiles with equal weights and the sample variance;
    iteration stops when the mean log-likelihood changes by less than ``tol``.
    ``clean_posterior`` is the responsibility of the lower-mean component.
    The initialisation is deterministic; ``seed`` is accepted for interface
    symmetry with the other stochastic steps.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two values to fit a mixture")
    x = normalize_losses(x) if normalize else x
    if x.max() == x.min():
        raise DegenerateLossesError("degenerate losses: all values identical")

    means = np.percentile(x, [10, 90]).astype(np.float64)
    variances = np.full(2, max(x.var(), var_floor))
    weights = np.full(2, 0.5)

    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        lj = _log_joint(x, means, variances, weights)
        norm = np.logaddexp(lj[:, 0], lj[:, 1])
        history.append(float(norm.mean()))
        resp = np.exp(lj - norm[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, var_floor)
        if len(history) >= 2 and abs(history[-1] - history[-2]) < tol:
            break

    lj = _log_joint(x, means, variances, weights)
    norm = np.logaddexp(lj[:, 0], lj[:, 1])
    final_ll = float(norm.mean())
    history.append(final_ll)
    post = np.exp(lj - norm[:, None])
    clean = int(np.argmin(means))
    return GmmFit(means=means, variances=variances, weights=weights,
                  clean_posterior=post[:, clean], iterations=it,
                  log_likelihood=final_ll, history=history)
