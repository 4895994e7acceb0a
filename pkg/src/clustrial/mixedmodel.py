"""Mixed-effects outcome models with independent center-level random effects.

Linear models are fitted by profiled REML over relative variances, logistic
models by Laplace-approximated maximum likelihood (adaptive Gauss-Hermite
quadrature is available for random-intercept-only models). All per-center
linear algebra is batched: the random-effect dimension per center is tiny, so
the work is a stack of q-by-q systems.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .dataset import Family, TrialDataset
from .errors import ModelError
from .glm import DesignSpec, fit_glm
from .rng import stream

VAR_FLOOR = 1e-10
NM_FATOL = 1e-9


@dataclass(frozen=True)
class RandomEffectsSpec:
    random_intercept: bool = True
    random_treatment_slope: bool = False
    random_covariate_slopes: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "random_covariate_slopes", tuple(int(j) for j in self.random_covariate_slopes))
        if not (self.random_intercept or self.random_treatment_slope or self.random_covariate_slopes):
            raise ValueError("a mixed model needs at least one random term")

    def term_names(self, data: TrialDataset) -> list[str]:
        names = []
        if self.random_intercept:
            names.append("intercept")
        if self.random_treatment_slope:
            names.append("treatment")
        names += [data.covariate_names[j] for j in self.random_covariate_slopes]
        return names

    def columns(self, data: TrialDataset, arm=None) -> np.ndarray:
        cols = []
        if self.random_intercept:
            cols.append(np.ones(data.n))
        if self.random_treatment_slope:
            cols.append(data.treatment.astype(float) if arm is None else np.full(data.n, float(arm)))
        for j in self.random_covariate_slopes:
            cols.append(data.covariates[:, j])
        return np.column_stack(cols)


@dataclass(frozen=True)
class PredictionMode:
    """BLUP plug-in or averaging over draws from the fitted random-effect law.

    In sampled mode each (center, draw) pair gets one vector of random effects
    shared by all of that center's patients. With ``couple_arms`` the same
    draws are reused for both counterfactual arms.
    """

    variant: str = "blup"
    draws: int = 1000
    seed: int = 0
    couple_arms: bool = True

    def __post_init__(self):
        if self.variant not in ("blup", "sampled"):
            raise ValueError(f"unknown prediction mode {self.variant!r}")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass(frozen=True, eq=False)
class MixedFit:
    fixed_coefficients: np.ndarray
    variance_components: dict
    residual_variance: float | None
    blups: np.ndarray
    converged: bool
    loglik_kind: str
    criterion: float
    design: DesignSpec
    re: RandomEffectsSpec
    family: Family
    center_ids: tuple[str, ...]
    term_names: tuple[str, ...]
    iterations: int = 0

    @property
    def variances(self) -> np.ndarray:
        return np.array([self.variance_components[t] for t in self.term_names])


# ---------------------------------------------------------------------------
# shared block machinery


class _Blocks:
    """Rows sorted by group, with per-group sufficient statistics."""

    def __init__(self, y, X, Z, group, k):
        order = np.argsort(group, kind="stable")
        self.order = order
        self.group = group[order]
        self.y = y[order]
        self.X = X[order]
        self.Z = Z[order]
        self.k = k
        counts = np.bincount(self.group, minlength=k)
        if np.any(counts == 0):
            raise ModelError("empty group")
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts

    def gsum(self, a):
        """Sum rows of ``a`` within each group."""
        return np.add.reduceat(a, self.starts, axis=0)


def _solve_batched(A, B):
    if B.ndim == A.ndim - 1:
        return np.linalg.solve(A, B[..., None])[..., 0]
    return np.linalg.solve(A, B)


def _logdet_batched(A):
    L = np.linalg.cholesky(A)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _design_for(data: TrialDataset, design: DesignSpec, arm=None):
    if design.center_indicators:
        raise ModelError("mixed models take centers as random effects, not indicators")
    if design.fit_per_arm:
        raise ModelError("per-arm fits are not supported for mixed models")
    cols = [np.ones(data.n)]
    if design.include_treatment:
        cols.append(data.treatment.astype(float) if arm is None else np.full(data.n, float(arm)))
    for j in design.covariate_columns:
        cols.append(data.covariates[:, j])
    return np.column_stack(cols)


def _nelder_mead(fun, x0, extra_starts=()):
    """Nelder-Mead with restarts from the incumbent and from boundary corners."""
    best = None
    starts = [np.asarray(x0, float)] + [np.asarray(s, float) for s in extra_starts]
    nfev = 0
    for s in starts:
        res = minimize(fun, s, method="Nelder-Mead",
                       options=dict(xatol=1e-7, fatol=NM_FATOL, maxiter=2000, maxfev=4000,
                                    initial_simplex=_simplex(s)))
        nfev += res.nfev
        if best is None or res.fun < best.fun:
            best = res
    # restart from the incumbent until it stops improving
    for _ in range(4):
        res = minimize(fun, best.x, method="Nelder-Mead",
                       options=dict(xatol=1e-8, fatol=NM_FATOL, maxiter=2000, maxfev=4000,
                                    initial_simplex=_simplex(best.x, 0.25)))
        nfev += res.nfev
        improved = best.fun - res.fun
        if res.fun < best.fun:
            best = res
        if improved <= NM_FATOL:
            break
    # boundary corners: pin each component at the floor in turn
    lo = np.log(VAR_FLOOR)
    for j in range(len(best.x)):
        if best.x[j] <= lo:
            continue
        cand = best.x.copy()
        cand[j] = lo
        f = fun(cand)
        nfev += 1
        if f < best.fun - NM_FATOL:
            res = minimize(fun, cand, method="Nelder-Mead",
                           options=dict(xatol=1e-8, fatol=NM_FATOL, maxiter=2000,
                                        initial_simplex=_simplex(cand, 0.5)))
            nfev += res.nfev
            if res.fun < best.fun:
                best = res
    best.nfev = nfev
    return best


def _simplex(x, step=1.0):
    x = np.asarray(x, float)
    m = x.size
    S = np.tile(x, (m + 1, 1))
    for j in range(m):
        S[j + 1, j] += step
    return S


def _clip_logvar(phi):
    return np.maximum(np.asarray(phi, float), np.log(VAR_FLOOR))


# ---------------------------------------------------------------------------
# linear mixed model


class _Reml:
    """Profiled REML criterion for y = X b + Z_c u_c + e with diagonal Cov(u)."""

    def __init__(self, blocks: _Blocks, col_param, ZtZ, ZtX, Zty, m):
        self.b = blocks
        X, y = blocks.X, blocks.y
        self.n, self.p = X.shape
        self.col_param = col_param  # (k, q) parameter index or -1 for padding
        self.ZtZ, self.ZtX, self.Zty = ZtZ, ZtX, Zty
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.m = m
        self.q = ZtZ.shape[1]

    @classmethod
    def from_rows(cls, y, X, Z, group, k):
        b = _Blocks(y, X, Z, group, k)
        Zs = b.Z
        ZtZ = b.gsum(Zs[:, :, None] * Zs[:, None, :])
        ZtX = b.gsum(Zs[:, :, None] * b.X[:, None, :])
        Zty = b.gsum(Zs * b.y[:, None])
        q = Z.shape[1]
        col_param = np.tile(np.arange(q), (k, 1))
        return cls(b, col_param, ZtZ, ZtX, Zty, q)

    def rel_sd(self, ratios):
        s = np.sqrt(np.concatenate([np.asarray(ratios, float), [0.0]]))
        return s[self.col_param]  # index -1 picks the padding zero

    def evaluate(self, ratios, full=False):
        lam = self.rel_sd(ratios)
        A = lam[:, :, None] * self.ZtZ * lam[:, None, :]
        A[:, np.arange(self.q), np.arange(self.q)] += 1.0
        B = lam[:, :, None] * self.ZtX
        bvec = lam * self.Zty
        rhs = np.concatenate([B, bvec[:, :, None]], axis=2)
        sol = _solve_batched(A, rhs)
        AiB, Aib = sol[:, :, :-1], sol[:, :, -1]
        XVX = self.XtX - np.einsum("kqp,kqr->pr", B, AiB)
        XVy = self.Xty - np.einsum("kqp,kq->p", B, Aib)
        yVy = self.yty - np.einsum("kq,kq->", bvec, Aib)
        try:
            beta = np.linalg.solve(XVX, XVy)
            sign, logdet_x = np.linalg.slogdet(XVX)
        except np.linalg.LinAlgError:
            raise ModelError("singular GLS system") from None
        if sign <= 0:
            raise ModelError("singular GLS system")
        rss = yVy - beta @ XVy
        dof = self.n - self.p
        if rss <= 0:
            rss = np.finfo(float).tiny
        logdet_a = float(np.sum(_logdet_batched(A)))
        dev = logdet_a + logdet_x + dof * (1.0 + np.log(2 * np.pi * rss / dof))
        if not full:
            return dev
        sigma2 = rss / dof
        Ztr = self.Zty - np.einsum("kqp,p->kq", self.ZtX, beta)
        u = lam * _solve_batched(A, lam * Ztr)
        return dev, beta, sigma2, u

    def criterion(self, phi):
        try:
            return self.evaluate(np.exp(_clip_logvar(phi)))
        except ModelError:
            return np.inf

    def fit(self, x0=None):
        m = self.m
        if x0 is None:
            x0 = np.full(m, np.log(0.1))
        extra = [np.full(m, np.log(1.0))]
        res = _nelder_mead(self.criterion, x0, extra_starts=extra)
        ratios = np.exp(_clip_logvar(res.x))
        ratios[ratios <= VAR_FLOOR * (1 + 1e-9)] = 0.0
        dev, beta, sigma2, u = self.evaluate(ratios, full=True)
        return ratios, dev, beta, sigma2, u, bool(res.success), int(res.nfev)


def fit_lmm(data: TrialDataset, design: DesignSpec, re: RandomEffectsSpec) -> MixedFit:
    """REML fit of a linear mixed model with independent center random effects.

    Variance ratios (to the residual variance) are optimised on the log scale
    by Nelder-Mead; fixed effects are the GLS solution at the optimum and the
    returned BLUPs are the conditional means of the random effects.
    """
    if data.family is not Family.GAUSSIAN:
        raise ModelError("fit_lmm needs a gaussian outcome")
    if data.k < 2:
        raise ModelError("need at least 2 centers")
    X = _design_for(data, design)
    Z = re.columns(data)
    reml = _Reml.from_rows(data.outcome, X, Z, data.center, data.k)
    ratios, dev, beta, sigma2, u, ok, nfev = reml.fit()
    if not ok:
        warnings.warn("REML optimisation did not converge", stacklevel=2)
    names = tuple(re.term_names(data))
    comps = {t: float(sigma2 * r) for t, r in zip(names, ratios)}
    return MixedFit(
        fixed_coefficients=beta,
        variance_components=comps,
        residual_variance=float(sigma2),
        blups=u,
        converged=ok,
        loglik_kind="reml",
        criterion=-0.5 * dev,
        design=design,
        re=re,
        family=Family.GAUSSIAN,
        center_ids=data.center_ids,
        term_names=names,
        iterations=nfev,
    )


def reml_criterion(data: TrialDataset, design: DesignSpec, re: RandomEffectsSpec, variances, residual=None):
    """Profiled REML log-likelihood at the given variance ratios.

    ``variances`` are ratios to the residual variance unless ``residual`` is
    given, in which case they are absolute and are divided by it.
    """
    X = _design_for(data, design)
    reml = _Reml.from_rows(data.outcome, X, re.columns(data), data.center, data.k)
    ratios = np.asarray(variances, float)
    if residual is not None:
        ratios = ratios / residual
    return -0.5 * reml.evaluate(ratios)


@dataclass(frozen=True)
class NestedFit:
    mean: float
    var_center: float
    var_cluster: float
    var_residual: float
    converged: bool


def fit_nested_lmm(values, center, cluster, drop_cluster=False) -> NestedFit:
    """Intercept-only REML fit with center and cluster-within-center intercepts.

    ``center`` and ``cluster`` are integer codes; cluster codes must be
    unique across centers.
    """
    values = np.asarray(values, float)
    center = np.asarray(center, np.int64)
    cluster = np.asarray(cluster, np.int64)
    k = int(center.max()) + 1
    n = values.size
    X = np.ones((n, 1))
    blocks = _Blocks(values, X, np.ones((n, 1)), center, k)
    cl_sorted = cluster[blocks.order]
    if drop_cluster:
        ZtZ = blocks.counts[:, None, None].astype(float)
        ZtX = blocks.counts[:, None, None].astype(float)
        Zty = blocks.gsum(blocks.y)[:, None]
        col_param = np.zeros((k, 1), dtype=np.int64)
        reml = _Reml(blocks, col_param, ZtZ, ZtX, Zty, 1)
    else:
        # per center: column 0 is the center intercept, then one column per cluster, zero padded
        local = np.zeros(n, dtype=np.int64)
        Jc = np.zeros(k, dtype=np.int64)
        for c in range(k):
            sl = slice(blocks.starts[c], blocks.starts[c] + blocks.counts[c])
            _, inv = np.unique(cl_sorted[sl], return_inverse=True)
            local[sl] = inv
            Jc[c] = inv.max() + 1
        q = 1 + int(Jc.max())
        m_jc = np.zeros((k, q))
        s_jc = np.zeros((k, q))
        np.add.at(m_jc, (blocks.group, 1 + local), 1.0)
        np.add.at(s_jc, (blocks.group, 1 + local), blocks.y)
        nc = blocks.counts.astype(float)
        ZtZ = np.zeros((k, q, q))
        ZtZ[:, 0, 0] = nc
        ZtZ[:, 0, 1:] = m_jc[:, 1:]
        ZtZ[:, 1:, 0] = m_jc[:, 1:]
        idx = np.arange(1, q)
        ZtZ[:, idx, idx] = m_jc[:, 1:]
        ZtX = np.zeros((k, q, 1))
        ZtX[:, 0, 0] = nc
        ZtX[:, 1:, 0] = m_jc[:, 1:]
        Zty = s_jc.copy()
        Zty[:, 0] = blocks.gsum(blocks.y)
        col_param = np.full((k, q), -1, dtype=np.int64)
        col_param[:, 0] = 0
        for c in range(k):
            col_param[c, 1:1 + Jc[c]] = 1
        reml = _Reml(blocks, col_param, ZtZ, ZtX, Zty, 2)
    ratios, dev, beta, sigma2, u, ok, _ = reml.fit()
    vc = float(sigma2 * ratios[0])
    vb = 0.0 if drop_cluster else float(sigma2 * ratios[1])
    return NestedFit(mean=float(beta[0]), var_center=vc, var_cluster=vb, var_residual=float(sigma2), converged=ok)


# ---------------------------------------------------------------------------
# logistic mixed model


class _Laplace:
    """Laplace / adaptive-quadrature marginal likelihood for a logistic GLMM."""

    def __init__(self, y, X, Z, group, k):
        self.b = _Blocks(y, X, Z, group, k)
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        self.k = k
        self.u = np.zeros((k, self.q))
        self._eye = np.eye(self.q)

    def _cond_loglik(self, eta):
        y = self.b.y
        return self.b.gsum(y * eta - np.logaddexp(0.0, eta))

    def mode(self, beta, sd, u0=None, tol=1e-10, max_iter=60):
        """Per-center conditional modes of the standardized random effects."""
        b = self.b
        eta_f = b.X @ beta
        Zl = b.Z * sd[None, :]
        u = self.u.copy() if u0 is None else u0.copy()
        g = b.group
        obj = self._cond_loglik(eta_f + np.sum(Zl * u[g], axis=1)) - 0.5 * np.sum(u * u, axis=1)
        for it in range(max_iter):
            eta = eta_f + np.sum(Zl * u[g], axis=1)
            mu = expit(eta)
            w = mu * (1 - mu)
            grad = b.gsum(Zl * (b.y - mu)[:, None]) - u
            H = b.gsum((w[:, None, None] * Zl[:, :, None]) * Zl[:, None, :]) + self._eye
            step = _solve_batched(H, grad)
            t = np.ones(self.k)
            for _ in range(40):
                cand = u + t[:, None] * step
                new = self._cond_loglik(eta_f + np.sum(Zl * cand[g], axis=1)) - 0.5 * np.sum(cand * cand, axis=1)
                bad = ~(new >= obj - 1e-12 * (1 + np.abs(obj)))
                if not bad.any():
                    break
                t = np.where(bad, 0.5 * t, t)
            else:
                raise ModelError(f"inner mode search failed for center index {int(np.flatnonzero(bad)[0])}")
            u = cand
            obj = new
            if np.max(np.abs(t[:, None] * step)) < tol:
                break
        eta = eta_f + np.sum(Zl * u[g], axis=1)
        mu = expit(eta)
        w = mu * (1 - mu)
        H = b.gsum((w[:, None, None] * Zl[:, :, None]) * Zl[:, None, :]) + self._eye
        return u, obj, H, eta_f, Zl

    def loglik(self, beta, sd, nagq=1, keep=True):
        u, obj, H, eta_f, Zl = self.mode(beta, sd)
        if keep:
            self.u = u
        if nagq <= 1 or self.q != 1:
            return float(np.sum(obj - 0.5 * _logdet_batched(H))), u
        x, w = np.polynomial.hermite.hermgauss(nagq)
        s = 1.0 / np.sqrt(H[:, 0, 0])
        g = self.b.group
        terms = np.empty((self.k, nagq))
        for j in range(nagq):
            uj = u[:, 0] + np.sqrt(2.0) * s * x[j]
            eta = eta_f + Zl[:, 0] * uj[g]
            terms[:, j] = self._cond_loglik(eta) - 0.5 * uj * uj + np.log(w[j]) + x[j] ** 2
        m = terms.max(axis=1)
        per_center = m + np.log(np.sum(np.exp(terms - m[:, None]), axis=1)) + np.log(np.sqrt(2.0) * s) - 0.5 * np.log(2 * np.pi)
        return float(np.sum(per_center)), u

    def pirls(self, beta0, sd, tol=1e-10, max_iter=80):
        """Joint mode of the penalized likelihood over (beta, u)."""
        b = self.b
        beta = beta0.copy()
        u = self.u.copy()
        g = b.group
        Zl = b.Z * sd[None, :]

        def pen(beta, u):
            eta = b.X @ beta + np.sum(Zl * u[g], axis=1)
            return float(np.sum(b.y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(u * u))

        cur = pen(beta, u)
        for it in range(max_iter):
            eta = b.X @ beta + np.sum(Zl * u[g], axis=1)
            mu = expit(eta)
            w = mu * (1 - mu)
            r = b.y - mu
            s_beta = b.X.T @ r
            s_u = b.gsum(Zl * r[:, None]) - u
            Hbb = (b.X * w[:, None]).T @ b.X
            Hbu = b.gsum((w[:, None, None] * Zl[:, :, None]) * b.X[:, None, :])  # (k, q, p)
            Huu = b.gsum((w[:, None, None] * Zl[:, :, None]) * Zl[:, None, :]) + self._eye
            sol = _solve_batched(Huu, np.concatenate([Hbu, s_u[:, :, None]], axis=2))
            HiHbu, His = sol[:, :, :-1], sol[:, :, -1]
            S = Hbb - np.einsum("kqp,kqr->pr", Hbu, HiHbu)
            rhs = s_beta - np.einsum("kqp,kq->p", Hbu, His)
            try:
                d_beta = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                d_beta = np.linalg.lstsq(S, rhs, rcond=None)[0]
            d_u = His - np.einsum("kqp,p->kq", HiHbu, d_beta)
            t = 1.0
            for _ in range(40):
                nb, nu = beta + t * d_beta, u + t * d_u
                new = pen(nb, nu)
                if np.isfinite(new) and new >= cur - 1e-12 * (1 + abs(cur)):
                    break
                t *= 0.5
            beta, u, cur = nb, nu, new
            if max(np.max(np.abs(t * d_beta)), np.max(np.abs(t * d_u))) < tol:
                break
        self.u = u
        return beta


def _glmm_setup(data: TrialDataset, design: DesignSpec, re: RandomEffectsSpec):
    X = _design_for(data, design)
    Z = re.columns(data)
    return _Laplace(data.outcome, X, Z, data.center, data.k)


def fit_glmm_logit(data: TrialDataset, design: DesignSpec, re: RandomEffectsSpec, nagq: int = 1) -> MixedFit:
    """Laplace-approximated ML fit of a logistic mixed model.

    Stage one profiles the fixed effects by penalized IRLS and searches the
    log variances by Nelder-Mead; stage two refines fixed effects and random
    effect standard deviations jointly on the Laplace (or, for
    random-intercept models with ``nagq > 1``, adaptive Gauss-Hermite)
    likelihood.
    """
    if data.family is not Family.BINOMIAL:
        raise ModelError("fit_glmm_logit needs a binomial outcome")
    if data.k < 2:
        raise ModelError("need at least 2 centers")
    lap = _glmm_setup(data, design, re)
    q = lap.q
    if nagq > 1 and q != 1:
        raise ModelError("adaptive quadrature is only available for a single random term")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        beta0 = fit_glm(data, DesignSpec(design.include_treatment, design.covariate_columns)).coefficients
    state = {"beta": beta0}

    def profiled(phi):
        sd = np.sqrt(np.exp(_clip_logvar(phi)))
        try:
            beta = lap.pirls(state["beta"], sd)
            ll, _ = lap.loglik(beta, sd, nagq)
        except (ModelError, np.linalg.LinAlgError):
            return np.inf
        if not np.isfinite(ll):
            return np.inf
        state["beta"] = beta
        return -2.0 * ll

    res = _nelder_mead(profiled, np.full(q, np.log(0.1)))
    sd1 = np.sqrt(np.exp(_clip_logvar(res.x)))
    lap.u[:] = 0.0
    beta1 = lap.pirls(beta0, sd1)
    x1 = np.concatenate([beta1, sd1])
    p = beta1.size

    def joint(x):
        try:
            ll, _ = lap.loglik(x[:p], np.abs(x[p:]), nagq)
        except (ModelError, np.linalg.LinAlgError):
            return np.inf
        return -2.0 * ll if np.isfinite(ll) else np.inf

    f1 = joint(x1)
    bounds = [(None, None)] * p + [(0.0, None)] * q
    res2 = minimize(joint, x1, method="L-BFGS-B", bounds=bounds,
                    options=dict(maxiter=200, ftol=1e-12, gtol=1e-6))
    if res2.fun <= f1:
        x_fin, f_fin = res2.x, res2.fun
    else:
        x_fin, f_fin = x1, f1
    beta = x_fin[:p]
    sd = np.abs(x_fin[p:])
    var = sd ** 2
    var[var <= VAR_FLOOR * (1 + 1e-9)] = 0.0
    sd = np.sqrt(var)
    lap.u[:] = 0.0
    ll, u = lap.loglik(beta, sd, nagq)
    converged = bool(res.success) and np.isfinite(ll)
    if not converged:
        warnings.warn("GLMM optimisation did not converge", stacklevel=2)
    names = tuple(re.term_names(data))
    return MixedFit(
        fixed_coefficients=beta,
        variance_components={t: float(v) for t, v in zip(names, var)},
        residual_variance=None,
        blups=u * sd[None, :],
        converged=converged,
        loglik_kind="laplace_ml" if nagq <= 1 else f"agq{nagq}_ml",
        criterion=ll,
        design=design,
        re=re,
        family=Family.BINOMIAL,
        center_ids=data.center_ids,
        term_names=names,
        iterations=int(res.nfev + res2.nfev),
    )


def glmm_loglik(data: TrialDataset, design: DesignSpec, re: RandomEffectsSpec, beta, variances, nagq=1) -> float:
    """Approximate marginal log-likelihood at given parameters."""
    lap = _glmm_setup(data, design, re)
    ll, _ = lap.loglik(np.asarray(beta, float), np.sqrt(np.asarray(variances, float)), nagq)
    return ll


# ---------------------------------------------------------------------------
# prediction


def _center_codes(fit: MixedFit, data: TrialDataset):
    if data.center_ids == fit.center_ids:
        return data.center
    index = {c: i for i, c in enumerate(fit.center_ids)}
    unseen = [c for c in data.center_ids if c not in index]
    if unseen:
        raise ModelError(f"center(s) not seen at fit time: {', '.join(unseen[:5])}")
    return np.array([index[c] for c in data.center_ids], dtype=np.int64)[data.center]


def predict_counterfactual_mixed(fit: MixedFit, data: TrialDataset, arm, mode: PredictionMode | None = None) -> np.ndarray:
    """Per-patient prediction under ``arm`` using BLUPs or sampled center effects."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    mode = PredictionMode() if mode is None else mode
    X = _design_for(data, fit.design, arm=arm)
    eta_f = X @ fit.fixed_coefficients
    Z = fit.re.columns(data, arm=arm)
    centers = _center_codes(fit, data)
    inv = (lambda e: e) if fit.family is Family.GAUSSIAN else expit
    if mode.variant == "blup":
        return inv(eta_f + np.sum(Z * fit.blups[centers], axis=1))
    sd = np.sqrt(fit.variances)
    k = len(fit.center_ids)
    rng = stream(mode.seed) if mode.couple_arms else stream(mode.seed, int(arm))
    draws = rng.standard_normal((k, mode.draws, sd.size)) * sd  # one vector per (center, draw)
    if fit.family is Family.GAUSSIAN:
        return eta_f + np.sum(Z * draws.mean(axis=1)[centers], axis=1)
    out = np.empty(data.n)
    chunk = max(1, 2_000_000 // mode.draws)
    for s in range(0, data.n, chunk):
        sl = slice(s, s + chunk)
        shift = np.einsum("iq,idq->id", Z[sl], draws[centers[sl]])
        out[sl] = expit(eta_f[sl, None] + shift).mean(axis=1)
    return out
