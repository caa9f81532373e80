"""Statistics kernel: OLS inference, t-tests, Pearson correlation, tail
probabilities of the Student-t and F distributions, and ROC AUC.

Tail probabilities go through a regularized incomplete beta function
evaluated by Lentz's continued fraction, so no p-value depends on an
external distribution library.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.stats import rankdata

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


class StatsError(ValueError):
    """Raised when a statistic is undefined for the given input."""


class RankDeficientError(StatsError):
    def __init__(self, columns: list[int]):
        self.columns = columns
        super().__init__(f"rank-deficient design: collinear columns {columns}")


class DegenerateVarianceError(StatsError):
    pass


class ConstantInputError(StatsError):
    pass


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc_reg requires a > 0 and b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    if t < 0:
        return 1.0 - student_t_sf(-t, df)
    x = df / (df + t * t)
    return 0.5 * betainc_reg(df / 2.0, 0.5, x)


def two_sided_t_p(t: float, df: float) -> float:
    if math.isnan(t):
        return float("nan")
    return min(1.0, 2.0 * student_t_sf(abs(t), df))


def f_sf(F: float, df1: float, df2: float) -> float:
    """Upper tail P(X > F) of the F(df1, df2) distribution."""
    if not (df1 > 0 and df2 > 0):
        raise StatsError(f"invalid F degrees of freedom ({df1}, {df2})")
    if F <= 0:
        return 1.0
    if math.isinf(F):
        return 0.0
    return betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * F))


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: float
    p_value: float

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Paired t-test on ``a - b``; two-sided p-value.

    All-zero differences give t = 0 and p = 1. Constant nonzero differences
    have no defined statistic and raise :class:`DegenerateVarianceError`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise StatsError("paired_ttest needs two 1-d vectors of equal length")
    n = a.size
    if n < 2:
        raise StatsError("paired_ttest needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TestResult(0.0, n - 1, 1.0)
        raise DegenerateVarianceError("all paired differences are equal")
    t = mean / (sd / math.sqrt(n))
    return TestResult(float(t), n - 1, two_sided_t_p(t, n - 1))


def two_sample_ttest(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Student two-sample t-test with pooled variance (df = n1 + n2 - 2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1 or n1 + n2 < 3:
        raise StatsError("two_sample_ttest needs n1 + n2 >= 3")
    df = n1 + n2 - 2
    ss = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
    sp2 = ss / df
    diff = a.mean() - b.mean()
    if sp2 == 0.0:
        if diff == 0.0:
            return TestResult(0.0, df, 1.0)
        raise DegenerateVarianceError("both samples are constant")
    t = diff / math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    return TestResult(float(t), df, two_sided_t_p(t, df))


def pearson(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Pearson correlation; ``statistic`` holds r, df = n - 2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("pearson needs two 1-d vectors of equal length")
    n = x.size
    if n < 3:
        raise ConstantInputError(f"pearson needs n >= 3, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInputError("pearson input has zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) >= 1.0 - 1e-15:
        return TestResult(math.copysign(1.0, r), df, 0.0)
    t = r * math.sqrt(df / (1.0 - r * r))
    return TestResult(r, df, two_sided_t_p(t, df))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise StatsError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# ordinary least squares
# ---------------------------------------------------------------------------


def significance_stars(p: float) -> str:
    # legend: * p<0.1; ** p<0.05; *** p<0.01
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


@dataclass
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    cov: np.ndarray
    r2: float
    adj_r2: float
    resid_se: float
    f_stat: float
    f_df: tuple[int, int]
    f_p: float
    n_obs: int
    x_means: np.ndarray = field(repr=False)
    y_mean: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def df_resid(self) -> int:
        return self.f_df[1]

    def coefficient(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def row(self, name: str) -> dict:
        i = self.names.index(name)
        return {
            "estimate": float(self.coef[i]),
            "se": float(self.se[i]),
            "t": float(self.t[i]),
            "p": float(self.p[i]),
            "stars": significance_stars(float(self.p[i])),
        }

    def to_dict(self) -> dict:
        out = {
            "coefficients": {name: self.row(name) for name in self.names},
            "observations": self.n_obs,
            "r2": self.r2,
            "adjusted_r2": self.adj_r2,
            "residual_standard_error": {"value": self.resid_se, "df": self.df_resid},
            "f_statistic": {
                "value": self.f_stat,
                "df": list(self.f_df),
                "p": self.f_p,
                "stars": significance_stars(self.f_p),
            },
        }
        if self.meta:
            out["meta"] = self.meta
        return out


def ols_fit(y, X, names: Sequence[str] | None = None, rank_tol: float = 1e-10) -> RegressionResult:
    """Fit ``y = X b + e`` by pivoted QR; X must carry its own intercept column.

    Standard errors are the classical homoskedastic ones,
    ``sigma^2 (X'X)^-1``; p-values are two-sided.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise StatsError(f"dimension mismatch: y {y.shape}, X {X.shape}")
    n, k = X.shape
    if names is None:
        names = [f"x{i}" for i in range(k)]
    names = list(names)
    if len(names) != k:
        raise StatsError("names must match the number of design columns")
    if n <= k:
        raise StatsError(f"need more rows than columns (n={n}, k={k})")

    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > rank_tol * diag[0]).sum()) if diag[0] > 0 else 0
    if rank < k:
        raise RankDeficientError(sorted(int(c) for c in piv[rank:]))

    beta_p = scipy.linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = beta_p
    r_inv = scipy.linalg.solve_triangular(R, np.eye(k))
    xtx_inv_p = r_inv @ r_inv.T
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_p

    resid = y - X @ beta
    ssr = float(resid @ resid)
    df_resid = n - k
    sigma2 = ssr / df_resid
    cov = sigma2 * xtx_inv
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.sign(beta) * np.inf)
    t = np.where((se == 0) & (beta == 0), 0.0, t)
    p = np.array([two_sided_t_p(float(ti), df_resid) for ti in t])

    y_mean = float(y.mean())
    sst = float(((y - y_mean) ** 2).sum())
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    r2 = min(1.0, max(0.0, r2))
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / df_resid
    df_model = k - 1
    if df_model > 0:
        if r2 >= 1.0:
            f_stat = math.inf
        else:
            f_stat = (r2 / df_model) / ((1.0 - r2) / df_resid)
        f_p = f_sf(f_stat, df_model, df_resid)
    else:
        f_stat, f_p = float("nan"), float("nan")

    return RegressionResult(
        names=names,
        coef=beta,
        se=se,
        t=t,
        p=p,
        cov=cov,
        r2=r2,
        adj_r2=adj_r2,
        resid_se=math.sqrt(sigma2),
        f_stat=f_stat,
        f_df=(df_model, df_resid),
        f_p=f_p,
        n_obs=n,
        x_means=X.mean(axis=0),
        y_mean=y_mean,
    )
