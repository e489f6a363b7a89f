"""
Statistical kernels
===================

Rank and linear correlations with p-values, partial rank correlation,
least-squares and ridge solvers, Mann-Whitney AUC, bootstrap and permutation
resampling, variance inflation factors, participant-aware cross-validation and
Fisher-z power math.

Every resampling routine draws from a counter-based stream derived from
``(seed, purpose, key...)`` so a result depends only on its inputs and seed,
never on call order or thread scheduling.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy import special
from scipy import stats as sps

from .errors import UndefinedCorrelation

log = logging.getLogger(__name__)

METHODS = ("spearman", "pearson", "kendall")


# =============================================================================
# Result containers
# =============================================================================
@dataclass(frozen=True)
class CorrelationResult:
    estimate: float
    p_value: float
    n: int
    method: str


@dataclass(frozen=True)
class ResampleSummary:
    point_estimate: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int


@dataclass(frozen=True)
class ModelEval:
    """Cross-validated model performance.

    ``cv_metric`` is the mean of ``fold_metrics``; ``train_metric`` is the
    metric of a refit on all rows, scored on those same rows.
    """

    train_metric: float
    cv_metric: float
    metric_kind: str  # "r2" | "auc"
    fold_metrics: tuple = ()
    fold_coefficients: tuple = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class RidgeSpec:
    penalties: tuple = (1.0,)
    inner_folds: int = 5


@dataclass(frozen=True)
class LogisticSpec:
    penalty: float = 1.0
    max_iter: int = 100
    tol: float = 1e-8


# =============================================================================
# Random streams
# =============================================================================
def _key_word(key) -> int:
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Keys are hashed with BLAKE2b (stable across processes, unlike ``hash``).
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    words = [int(seed)] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# =============================================================================
# Ranks and correlations
# =============================================================================
def rank_with_ties(x) -> np.ndarray:
    """Average ranks (1-based); tied values share the mean of their positions."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("rank_with_ties needs a non-empty 1-D vector")
    if np.isnan(x).any():
        raise ValueError("rank_with_ties: missing values present")
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0  # mean of positions start+1 .. end
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _as_pair(x, y, min_n: int = 3):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("missing values present; drop or impute first")
    if x.size < min_n:
        raise UndefinedCorrelation(f"need at least {min_n} observations, got {x.size}")
    return x, y


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    if sxx <= 0 or syy <= 0:
        raise UndefinedCorrelation("constant vector")
    r = (xc @ yc) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def _t_pvalue(r: float, df: int) -> float:
    if df < 1:
        raise UndefinedCorrelation("no residual degrees of freedom")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt(df / (1.0 - r * r))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))


def pearson(x, y) -> CorrelationResult:
    x, y = _as_pair(x, y)
    r = _pearson_r(x, y)
    return CorrelationResult(r, _t_pvalue(r, x.size - 2), x.size, "pearson")


def spearman(x, y) -> CorrelationResult:
    """Spearman rho as the Pearson correlation of tie-averaged ranks.

    The p-value uses the t approximation with n - 2 degrees of freedom.
    """
    x, y = _as_pair(x, y)
    r = _pearson_r(rank_with_ties(x), rank_with_ties(y))
    return CorrelationResult(r, _t_pvalue(r, x.size - 2), x.size, "spearman")


def _kendall_counts(x: np.ndarray, y: np.ndarray):
    """Pair statistic S and the numbers of pairs tied in x and in y."""
    n = x.size
    s = 0
    tied_x = 0
    tied_y = 0
    for i in range(n - 1):
        dx = np.sign(x[i + 1:] - x[i])
        dy = np.sign(y[i + 1:] - y[i])
        s += int(dx @ dy)
        tied_x += int(np.count_nonzero(dx == 0))
        tied_y += int(np.count_nonzero(dy == 0))
    return s, tied_x, tied_y


def _tie_sizes(v: np.ndarray) -> np.ndarray:
    _, counts = np.unique(v, return_counts=True)
    return counts[counts > 1].astype(float)


def _kendall_exact_p(x: np.ndarray, y: np.ndarray, s_obs: int) -> float:
    n = x.size
    iu, ju = np.triu_indices(n, 1)
    sx = np.sign(x[ju] - x[iu]).astype(np.int8)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    yp = y[perms]
    sy = np.sign(yp[:, ju] - yp[:, iu]).astype(np.int8)
    s_all = sy.astype(np.int32) @ sx.astype(np.int32)
    return float(np.mean(np.abs(s_all) >= abs(s_obs)))


def kendall_tau_b(x, y) -> CorrelationResult:
    """Kendall tau-b with tie correction.

    p-value: exact enumeration of the permutation null of the pair statistic
    for n < 10, tie-corrected normal approximation otherwise.
    """
    x, y = _as_pair(x, y)
    n = x.size
    s, tied_x, tied_y = _kendall_counts(x, y)
    n0 = n * (n - 1) // 2
    denom = math.sqrt(float(n0 - tied_x) * float(n0 - tied_y))
    if denom == 0:
        raise UndefinedCorrelation("constant vector")
    tau = float(min(1.0, max(-1.0, s / denom)))
    if n < 10:
        p = _kendall_exact_p(x, y, s)
    else:
        t = _tie_sizes(x)
        u = _tie_sizes(y)
        v0 = n * (n - 1) * (2 * n + 5)
        vt = np.sum(t * (t - 1) * (2 * t + 5))
        vu = np.sum(u * (u - 1) * (2 * u + 5))
        v1 = np.sum(t * (t - 1)) * np.sum(u * (u - 1)) / (2.0 * n * (n - 1))
        v2 = (np.sum(t * (t - 1) * (t - 2)) * np.sum(u * (u - 1) * (u - 2))
              / (9.0 * n * (n - 1) * (n - 2)))
        var_s = (v0 - vt - vu) / 18.0 + v1 + v2
        p = float(min(1.0, 2.0 * sps.norm.sf(abs(s) / math.sqrt(var_s)))) if var_s > 0 else 1.0
    return CorrelationResult(tau, p, n, "kendall")


_CORR = {"spearman": spearman, "pearson": pearson, "kendall": kendall_tau_b}


def correlate(x, y, method: str = "spearman") -> CorrelationResult:
    try:
        return _CORR[method](x, y)
    except KeyError:
        raise ValueError(f"unknown correlation method {method!r}") from None


def _independent_columns(design: np.ndarray, tol: float = 1e-10) -> list:
    """Indices of a maximal linearly independent column subset, greedy left to right."""
    keep = []
    for j in range(design.shape[1]):
        trial = design[:, keep + [j]]
        if np.linalg.matrix_rank(trial, tol=tol * max(1.0, np.abs(trial).max())) == len(keep) + 1:
            keep.append(j)
    return keep


def partial_spearman(x, y, confounders=None) -> CorrelationResult:
    """Rank partial correlation of x and y given confounders.

    Ranks of x and y are residualized on ``[1 | confounders]`` by least
    squares; the estimate is the Pearson correlation of the residuals and its
    p-value uses n - 2 - (#confounders kept) degrees of freedom. Collinear
    confounder columns are dropped with a log message. If the confounders
    explain either rank vector exactly, the estimate is 0 with p = 1.
    """
    x, y = _as_pair(x, y)
    n = x.size
    z = np.empty((n, 0)) if confounders is None else np.asarray(confounders, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != n:
        raise ValueError("confounder matrix row count differs from x")
    if np.isnan(z).any():
        raise ValueError("missing values in confounders")
    design = np.column_stack([np.ones(n), z])
    keep = _independent_columns(design)
    if len(keep) < design.shape[1]:
        log.info("partial_spearman: dropped %d collinear confounder column(s)",
                 design.shape[1] - len(keep))
    design = design[:, keep]
    k = design.shape[1] - 1
    rx = rank_with_ties(x)
    ry = rank_with_ties(y)
    ex = rx - design @ ols_fit(design, rx)
    ey = ry - design @ ols_fit(design, ry)
    # a rank vector the confounders explain completely leaves no partial association
    for raw, e in ((rx, ex), (ry, ey)):
        if np.linalg.norm(e) <= 1e-10 * np.linalg.norm(raw - raw.mean()):
            return CorrelationResult(0.0, 1.0, n, "spearman")
    r = _pearson_r(ex, ey)
    return CorrelationResult(r, _t_pvalue(r, n - 2 - k), n, "spearman")


# =============================================================================
# Regression
# =============================================================================
def ols_fit(X, y) -> np.ndarray:
    """Least-squares coefficients via Householder QR.

    Rank-deficient designs fall back to the SVD minimum-norm solution.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be 2-D")
    n, p = X.shape
    if n < p:
        raise ValueError(f"underdetermined system: {n} rows < {p} columns")
    q, r = np.linalg.qr(X)
    d = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (d.max() if d.size else 0.0)
    if p and (d <= tol).any():
        log.warning("ols_fit: rank-deficient design, using minimum-norm solution")
        return np.linalg.lstsq(X, y, rcond=None)[0]
    return linalg.solve_triangular(r, q.T @ y)


def ridge_fit(X, y, penalty: float, intercept: bool = True) -> np.ndarray:
    """Ridge coefficients; column 0 is the unpenalized intercept when ``intercept``.

    Solved as an augmented least-squares problem so the same QR path is used.
    """
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if penalty == 0:
        return ols_fit(X, y)
    p = X.shape[1]
    pen = np.sqrt(penalty) * np.eye(p)
    if intercept:
        pen = pen[1:]
    Xa = np.vstack([X, pen])
    ya = np.concatenate([y, np.zeros((pen.shape[0],) + y.shape[1:])])
    return ols_fit(Xa, ya)


def r_squared(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return 0.0
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


# =============================================================================
# AUC
# =============================================================================
def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    The positive class is the larger of the two label values.
    """
    s = np.asarray(scores, dtype=float).ravel()
    lab = np.asarray(labels).ravel()
    if s.size != lab.size:
        raise ValueError("scores and labels differ in length")
    classes = np.unique(lab)
    if classes.size != 2:
        raise ValueError("auc needs exactly two classes")
    pos = lab == classes[1]
    n1 = int(pos.sum())
    n0 = s.size - n1
    r = rank_with_ties(s)
    u = r[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


# =============================================================================
# Resampling
# =============================================================================
_CHUNK = 256


def _row_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    num = np.einsum("ij,ij->i", ac, bc)
    den = np.sqrt(np.einsum("ij,ij->i", ac, ac) * np.einsum("ij,ij->i", bc, bc))
    return np.clip(num / den, -1.0, 1.0)


def _batch_stat(xs: np.ndarray, ys: np.ndarray, method: str) -> np.ndarray:
    if method == "spearman":
        return _row_pearson(sps.rankdata(xs, axis=1), sps.rankdata(ys, axis=1))
    if method == "pearson":
        return _row_pearson(xs, ys)
    if method == "kendall":
        return np.array([kendall_tau_b(a, b).estimate for a, b in zip(xs, ys)])
    raise ValueError(f"unknown correlation method {method!r}")


def bootstrap_ci(x, y, stat: str = "spearman", B: int = 1000, seed: int = 0,
                 key=()) -> ResampleSummary:
    """Paired percentile bootstrap (2.5th / 97.5th percentiles).

    Resamples where either column is constant are discarded and redrawn;
    more than ``5 * B`` draws in total raises ``UndefinedCorrelation``.
    """
    x, y = _as_pair(x, y, min_n=10)
    if B < 1:
        raise ValueError("B must be >= 1")
    point = correlate(x, y, stat).estimate
    rng = stream(seed, "bootstrap", *key)
    n = x.size
    kept = []
    have = 0
    drawn = 0
    while have < B:
        m = min(_CHUNK, B - have)
        if drawn + m > 5 * B:
            raise UndefinedCorrelation("bootstrap: too many degenerate resamples (near-constant input)")
        idx = rng.integers(0, n, size=(m, n))
        drawn += m
        xs = x[idx]
        ys = y[idx]
        ok = (np.ptp(xs, axis=1) > 0) & (np.ptp(ys, axis=1) > 0)
        if ok.any():
            kept.append(_batch_stat(xs[ok], ys[ok], stat))
            have += int(ok.sum())
    vals = np.concatenate(kept)
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return ResampleSummary(float(point), float(lo), float(hi), B, int(seed))


def _extreme(values: np.ndarray, obs: float, alternative: str) -> np.ndarray:
    eps = 1e-12
    if alternative == "two-sided":
        return np.abs(values) >= abs(obs) - eps
    if alternative == "greater":
        return values >= obs - eps
    if alternative == "less":
        return values <= obs + eps
    raise ValueError(f"unknown alternative {alternative!r}")


def permutation_pvalue(x, y, stat: str = "spearman", B: int = 1000, seed: int = 0,
                       key=(), exact: bool = False,
                       alternative: str = "two-sided") -> float:
    """Label-permutation p-value.

    Monte Carlo: ``(1 + #extreme) / (B + 1)`` so the smallest attainable value
    is ``1 / (B + 1)``. With ``exact=True`` all n! orderings of y are
    enumerated (identity included) and p is the extreme fraction.
    """
    x, y = _as_pair(x, y)
    n = x.size
    obs = correlate(x, y, stat).estimate
    if exact:
        if n > 9:
            raise ValueError("exact enumeration limited to n <= 9")
        perms = np.array(list(itertools.permutations(range(n))))
        vals = _batch_stat(np.broadcast_to(x, perms.shape), y[perms], stat)
        return float(np.mean(_extreme(vals, obs, alternative)))
    rng = stream(seed, "permutation", *key)
    if stat == "spearman":
        a = rank_with_ties(x)
        b = rank_with_ties(y)
    else:
        a, b = x, y
    a = a - a.mean()
    b = b - b.mean()
    norm = math.sqrt((a @ a) * (b @ b))
    count = 0
    done = 0
    base = np.arange(n)
    while done < B:
        m = min(_CHUNK, B - done)
        perm = rng.permuted(np.broadcast_to(base, (m, n)), axis=1)
        if stat in ("spearman", "pearson"):
            vals = (b[perm] @ a) / norm
        else:
            vals = _batch_stat(np.broadcast_to(x, (m, n)), y[perm], stat)
        count += int(_extreme(vals, obs, alternative).sum())
        done += m
    return (1.0 + count) / (B + 1.0)


# =============================================================================
# Multicollinearity
# =============================================================================
VIF_UNBOUNDED = math.inf


def vif(X, names=None) -> np.ndarray:
    """Variance inflation factor per column, 1 / (1 - R^2_j).

    R^2_j comes from regressing column j on the remaining columns plus an
    intercept. R^2_j >= 1 - 1e-12 returns ``inf``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if p < 2:
        raise ValueError("vif needs at least two columns")
    for j in range(p):
        if np.ptp(X[:, j]) == 0:
            raise ValueError(f"vif: column {names[j]!r} is constant")
    out = np.empty(p)
    for j in range(p):
        design = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        fitted = design @ ols_fit(design, X[:, j])
        r2 = r_squared(X[:, j], fitted)
        out[j] = VIF_UNBOUNDED if r2 >= 1.0 - 1e-12 else 1.0 / (1.0 - r2)
    return out


# =============================================================================
# Cross-validation
# =============================================================================
def _standardize(train: np.ndarray, other: np.ndarray):
    med = np.nanmedian(train, axis=0) if train.size else np.zeros(train.shape[1])
    med = np.where(np.isnan(med), 0.0, med)
    train = np.where(np.isnan(train), med, train)
    other = np.where(np.isnan(other), med, other)
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (other - mu) / sd


def _design(Z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(Z.shape[0]), Z])


def _fit_logistic(D: np.ndarray, y: np.ndarray, spec: LogisticSpec) -> np.ndarray:
    """Ridge-penalized logistic regression by iteratively reweighted least squares."""
    beta = np.zeros(D.shape[1])
    for _ in range(spec.max_iter):
        eta = D @ beta
        prob = special.expit(eta)
        w = np.clip(prob * (1 - prob), 1e-10, None)
        z = eta + (y - prob) / w
        sw = np.sqrt(w)
        new = ridge_fit(D * sw[:, None], z * sw, spec.penalty)
        if np.max(np.abs(new - beta)) < spec.tol:
            beta = new
            break
        beta = new
    return beta


def _inner_folds(groups: np.ndarray, k: int) -> np.ndarray:
    _, code = np.unique(groups, return_inverse=True)
    return code % k


def _fit_predict(Xtr, ytr, Xte, model, groups_tr):
    Ztr, Zte = _standardize(Xtr, Xte)
    Dtr, Dte = _design(Ztr), _design(Zte)
    if isinstance(model, LogisticSpec):
        beta = _fit_logistic(Dtr, ytr, model)
        return special.expit(Dte @ beta), beta
    penalty = model.penalties[0]
    if len(model.penalties) > 1:
        inner = _inner_folds(groups_tr, model.inner_folds)
        best = -math.inf
        for lam in model.penalties:
            scores = []
            for f in np.unique(inner):
                tr, te = inner != f, inner == f
                if tr.sum() < 2 or te.sum() < 2:
                    continue
                zi_tr, zi_te = _standardize(Xtr[tr], Xtr[te])
                b = ridge_fit(_design(zi_tr), ytr[tr], lam)
                scores.append(r_squared(ytr[te], _design(zi_te) @ b))
            score = float(np.mean(scores)) if scores else -math.inf
            if score > best:
                best, penalty = score, lam
    beta = ridge_fit(Dtr, ytr, penalty)
    return Dte @ beta, beta


def cross_validate(X, y, folds, model=None, groups=None) -> ModelEval:
    """K-fold evaluation with all preprocessing fit inside training folds.

    Median imputation, standardization and (for several ridge penalties) the
    inner-CV penalty choice use training rows only. Ridge models report R^2,
    logistic models AUC.
    """
    model = model if model is not None else RidgeSpec()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    fold_idx = np.asarray(getattr(folds, "fold_index", folds))
    groups = np.arange(y.size) if groups is None else np.asarray(groups)
    logistic = isinstance(model, LogisticSpec)
    metrics = []
    coefs = []
    for f in np.unique(fold_idx):
        te = fold_idx == f
        tr = ~te
        if logistic and (np.unique(y[te]).size < 2 or np.unique(y[tr]).size < 2):
            raise ValueError(f"fold {f} lacks one of the classes; use stratified folds")
        pred, beta = _fit_predict(X[tr], y[tr], X[te], model, groups[tr])
        metrics.append(auc(pred, y[te]) if logistic else r_squared(y[te], pred))
        coefs.append(beta)
    pred, _ = _fit_predict(X, y, X, model, groups)
    train = auc(pred, y) if logistic else r_squared(y, pred)
    return ModelEval(float(train), float(np.mean(metrics)), "auc" if logistic else "r2",
                     tuple(float(m) for m in metrics), tuple(coefs))


# =============================================================================
# Power
# =============================================================================
def min_detectable_rho(n: int, alpha: float = 0.05, power: float = 0.80) -> float:
    """Smallest |rho| on a 0.001 grid detectable with ``n`` observations.

    Uses the Fisher-z sample-size relation
    n = ((z_{1-alpha/2} + z_power) / atanh(rho))^2 + 3.
    """
    if n < 10:
        raise ValueError("min_detectable_rho needs n >= 10")
    z = sps.norm.ppf(1 - alpha / 2) + sps.norm.ppf(power)

    def required(rho):
        return (z / math.atanh(rho)) ** 2 + 3

    rho = math.floor(math.tanh(z / math.sqrt(n - 3)) * 1000) / 1000
    rho = max(rho, 0.001)
    while required(rho) > n:
        rho = round(rho + 0.001, 3)
    while rho > 0.001 and required(round(rho - 0.001, 3)) <= n:
        rho = round(rho - 0.001, 3)
    return rho
