"""Canonical-link GLMs: least squares for gaussian, IRLS for logistic."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .dataset import Family, TrialDataset
from .errors import ModelError

MAX_ITER = 100
COEF_TOL = 1e-10
SCORE_TOL = 1e-8


@dataclass(frozen=True)
class DesignSpec:
    """Which columns enter a fixed-effects design matrix.

    The intercept is always present. With ``center_indicators`` the first
    usable center is the reference level and the remaining k-1 centers get
    indicator columns.
    """

    include_treatment: bool = True
    covariate_columns: tuple[int, ...] = ()
    center_indicators: bool = False
    fit_per_arm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariate_columns", tuple(int(j) for j in self.covariate_columns))


def design_matrix(data: TrialDataset, design: DesignSpec, arm=None, center_columns=None):
    """Build the fixed-effects design.

    ``arm`` overrides the treatment column (counterfactual prediction).
    ``center_columns`` lists the center codes that receive an indicator;
    defaults to every center except the first.
    Returns the matrix and its column names.
    """
    n = data.n
    cols = [np.ones(n)]
    names = ["(intercept)"]
    if design.include_treatment and not design.fit_per_arm:
        a = data.treatment.astype(float) if arm is None else np.full(n, float(arm))
        cols.append(a)
        names.append("treatment")
    for j in design.covariate_columns:
        cols.append(data.covariates[:, j])
        names.append(data.covariate_names[j])
    X = np.column_stack(cols)
    if design.center_indicators:
        if center_columns is None:
            center_columns = range(1, data.k)
        center_columns = np.asarray(list(center_columns), dtype=np.int64)
        D = (data.center[:, None] == center_columns[None, :]).astype(float)
        X = np.hstack([X, D])
        names += [f"center[{data.center_ids[c]}]" for c in center_columns]
    return X, names


@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    design: DesignSpec
    family: Family
    column_names: tuple[str, ...] = ()
    center_ids: tuple[str, ...] = ()
    center_columns: tuple[int, ...] = ()
    dropped: tuple[str, ...] = ()
    max_score: float = 0.0
    arm_fits: tuple["GlmFit", "GlmFit"] | None = None

    @property
    def center_effects(self) -> np.ndarray:
        """Linear-predictor shift of each center relative to the reference."""
        eff = np.zeros(len(self.center_ids))
        if self.design.center_indicators:
            m = len(self.coefficients) - len(self.center_columns)
            eff[list(self.center_columns)] = self.coefficients[m:]
        return eff


def _lstsq(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    # one refinement pass keeps X'(y - X beta) at rounding level for badly scaled columns
    r = y - X @ beta
    delta, *_ = np.linalg.lstsq(X, r, rcond=None)
    return beta + delta


def _irls(X, y, max_iter=MAX_ITER):
    p = X.shape[1]
    beta = np.zeros(p)
    ybar = np.clip(y.mean(), 1e-3, 1 - 1e-3)
    beta[0] = np.log(ybar / (1 - ybar))

    def deviance(b):
        eta = X @ b
        return -2.0 * np.sum(y * eta - np.logaddexp(0.0, eta))

    dev = deviance(beta)
    converged = False
    it = 0
    score = X.T @ (y - expit(X @ beta))
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        w = mu * (1 - mu)
        score = X.T @ (y - mu)
        H = (X * w[:, None]).T @ X
        try:
            step = scipy.linalg.solve(H, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            new_dev = deviance(cand)
            if np.isfinite(new_dev) and new_dev <= dev + 1e-12 * (1 + abs(dev)):
                break
            t *= 0.5
        beta, dev = cand, new_dev
        score = X.T @ (y - expit(X @ beta))
        if np.max(np.abs(t * step)) <= COEF_TOL and np.max(np.abs(score)) <= SCORE_TOL:
            converged = True
            break
    return beta, converged, it, float(np.max(np.abs(score)))


def _aliased(X):
    """Indices of columns that are linear combinations of earlier columns."""
    if X.shape[1] == 0:
        return []
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(X.shape) * np.finfo(float).eps * 1e2 if d.size else 0.0
    rank = int(np.sum(d > tol))
    return sorted(piv[rank:].tolist())


def _fit_single(data: TrialDataset, design: DesignSpec, family: Family, rows=None) -> GlmFit:
    sub_center = data.center if rows is None else data.center[rows]
    y = data.outcome if rows is None else data.outcome[rows]
    center_columns = None
    dropped_centers = []
    if design.center_indicators:
        present = np.unique(sub_center)
        usable = present
        if family is Family.BINOMIAL:
            # a center whose outcomes are all 0 or all 1 separates on its indicator
            s = np.bincount(sub_center, weights=y, minlength=data.k)
            m = np.bincount(sub_center, minlength=data.k)
            separated = present[(s[present] == 0) | (s[present] == m[present])]
            usable = np.setdiff1d(present, separated)
            dropped_centers = separated.tolist()
            if usable.size == 0:
                usable = present[:1]
                dropped_centers = present[1:].tolist()
        center_columns = usable[1:]
    X, names = design_matrix(data, design, center_columns=center_columns)
    if rows is not None:
        X = X[rows]
    # drop all-zero indicator columns (centers absent from this subset) and aliased columns
    alias = _aliased(X)
    dropped = [names[j] for j in alias]
    dropped += [f"center[{data.center_ids[c]}]" for c in dropped_centers]
    if alias:
        keep = [j for j in range(X.shape[1]) if j not in alias]
        X = X[:, keep]
        names = [names[j] for j in keep]
        if center_columns is not None:
            center_columns = np.asarray(
                [c for c in center_columns if f"center[{data.center_ids[c]}]" in names], dtype=np.int64
            )
    if dropped:
        warnings.warn(f"dropped aliased or separated column(s): {', '.join(dropped)}", stacklevel=3)
    if family is Family.GAUSSIAN:
        beta = _lstsq(X, y)
        max_score = float(np.max(np.abs(X.T @ (y - X @ beta))))
        converged, iters = True, 1
    else:
        beta, converged, iters, max_score = _irls(X, y)
        if not converged:
            warnings.warn("logistic IRLS did not converge (possible separation)", stacklevel=3)
    return GlmFit(
        coefficients=beta,
        converged=converged,
        iterations=iters,
        design=design,
        family=family,
        column_names=tuple(names),
        center_ids=data.center_ids,
        center_columns=tuple(int(c) for c in (center_columns if center_columns is not None else ())),
        dropped=tuple(dropped),
        max_score=max_score,
    )


def fit_glm(data: TrialDataset, design: DesignSpec, family=None) -> GlmFit:
    """Maximum-likelihood fit of a canonical-link GLM.

    Gaussian models are solved by least squares. Logistic models use IRLS
    with step halving; a fit that has not converged after 100 iterations is
    returned with ``converged=False``.
    """
    family = data.family if family is None else Family.parse(family)
    if not design.fit_per_arm:
        return _fit_single(data, design, family)
    arms = []
    for arm in (0, 1):
        rows = np.flatnonzero(data.treatment == arm)
        if rows.size == 0:
            raise ModelError(f"no patients in arm {arm} for a per-arm fit")
        arms.append(_fit_single(data, design, family, rows=rows))
    return GlmFit(
        coefficients=np.concatenate([arms[0].coefficients, arms[1].coefficients]),
        converged=arms[0].converged and arms[1].converged,
        iterations=max(arms[0].iterations, arms[1].iterations),
        design=design,
        family=family,
        column_names=arms[0].column_names + arms[1].column_names,
        center_ids=data.center_ids,
        dropped=arms[0].dropped + arms[1].dropped,
        max_score=max(arms[0].max_score, arms[1].max_score),
        arm_fits=(arms[0], arms[1]),
    )


def _center_codes_for(fit: GlmFit, data: TrialDataset) -> np.ndarray:
    """Map ``data`` centers onto the fit's center enumeration."""
    if data.center_ids == fit.center_ids:
        return data.center
    index = {c: i for i, c in enumerate(fit.center_ids)}
    unseen = [c for c in data.center_ids if c not in index]
    if unseen:
        raise ModelError(f"center(s) not seen at fit time: {', '.join(unseen[:5])}")
    remap = np.array([index[c] for c in data.center_ids], dtype=np.int64)
    return remap[data.center]


def linear_predictor(fit: GlmFit, data: TrialDataset, arm) -> np.ndarray:
    if fit.arm_fits is not None:
        return linear_predictor(fit.arm_fits[int(arm)], data, arm)
    p_fixed = len(fit.coefficients) - len(fit.center_columns)
    cols = [np.ones(data.n)]
    d = fit.design
    if d.include_treatment and not d.fit_per_arm:
        cols.append(np.full(data.n, float(arm)))
    for j in d.covariate_columns:
        cols.append(data.covariates[:, j])
    X = np.column_stack(cols)
    if X.shape[1] != p_fixed:
        # an aliased fixed column was dropped at fit time
        keep = [j for j, nm in enumerate(_fixed_names(d, data)) if nm in fit.column_names[:p_fixed]]
        X = X[:, keep]
    eta = X @ fit.coefficients[:p_fixed]
    if d.center_indicators:
        eta = eta + fit.center_effects[_center_codes_for(fit, data)]
    return eta


def _fixed_names(design: DesignSpec, data: TrialDataset):
    names = ["(intercept)"]
    if design.include_treatment and not design.fit_per_arm:
        names.append("treatment")
    names += [data.covariate_names[j] for j in design.covariate_columns]
    return names


def predict_counterfactual(fit: GlmFit, data: TrialDataset, arm, allow_nonconverged=True) -> np.ndarray:
    """Per-patient prediction with treatment forced to ``arm``."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if not fit.converged and not allow_nonconverged:
        raise ModelError("fit did not converge")
    eta = linear_predictor(fit, data, arm)
    return eta if fit.family is Family.GAUSSIAN else expit(eta)
