"""Hierarchical proportional-odds model: parameters, priors, exact log joint.

The model for a 2 (elastance state) x 2 (arm) layout with a K-category
ordinal outcome:

    logit P(Y <= j) = alpha_j - beta_s*S - (beta_t + U_k)*T

with S = 1 for low elastance, 0 for high; T = 1 for the intervention arm;
U_1 (low) and U_2 (high) the state-specific treatment deviations.  The
quantity of interest per state is the treatment log-odds-ratio
-(beta_t + U_k); values below 0 mean benefit.

Cutpoints are parameterized as increments, theta_1 = alpha_1 and
alpha_j = alpha_{j-1} + exp(theta_j), which keeps them ordered for free.
Their prior is a symmetric Dirichlet over the K cell probabilities implied
by the cutpoints at the centered linear predictor (the equal-weight average
of the four cells' offsets), transformed to theta with the exact
change-of-variables Jacobian.  Anchoring the Dirichlet at the average
offset rather than at the (S=0, T=0) cell matters: the concentration is
large, and pseudo-counts planted on a single data cell would bias that
state's treatment contrast.  beta_s and beta_t get N(0, beta_variance).
The U_k prior depends on the borrowing configuration: N(0, sigma^2) with a
hyperprior on sigma (dynamic borrowing), independent N(0, beta_variance)
(no borrowing), or U identically 0 (full borrowing).

Everything is evaluated in log space from count data, so the cost of one
evaluation is O(K), independent of the number of patients.  Gradients and
Hessians with respect to the latent block (theta, beta_s, beta_t, U) at
fixed log sigma are exact analytic derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ValidationError
from .outcomes import ARMS, STATES

_P_FLOOR = 1e-300

# Cell enumeration used throughout: (state, arm) with state 0=low, 1=high
# and arm 0=uc, 1=dpl.  S=1 for low elastance, T=1 for the dpl arm.  A fifth
# virtual row at the equal-weight average offset of the four cells anchors
# the Dirichlet cutpoint prior; anchoring it at any single data cell would
# let the prior's pseudo-counts bias that cell's treatment contrast.
_CELLS = [(0, 0), (0, 1), (1, 0), (1, 1)]
_CELL_S = np.array([1.0, 1.0, 0.0, 0.0, 0.5])
_CELL_T = np.array([0.0, 1.0, 0.0, 1.0, 0.5])
_PRIOR_ROW = 4

HIER_KINDS = ("half_t", "half_t_sd", "inv_gamma", "none", "full")


@dataclass(frozen=True)
class PriorConfig:
    """Prior family for the model.

    ``hier_kind`` selects the treatment-deviation structure: "half_t" or
    "inv_gamma" put a hyperprior on the borrowing scale (half-t on sigma,
    inverse-gamma on sigma^2), "none" gives the deviations independent
    N(0, beta_variance) priors, and "full" pins them to zero.
    """

    beta_variance: float = 1000.0
    hier_kind: str = "half_t"
    hier_df: float = 3.0
    hier_scale: float = 7.0
    hier_shape: float = 0.125
    dirichlet_conc: float = 100.0

    def __post_init__(self):
        if self.hier_kind not in HIER_KINDS:
            raise ValidationError(f"unknown hier_kind {self.hier_kind!r}")
        for name in ("beta_variance", "hier_df", "hier_scale", "hier_shape", "dirichlet_conc"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def has_hyper(self) -> bool:
        return self.hier_kind in ("half_t", "inv_gamma")

    @property
    def has_u(self) -> bool:
        return self.hier_kind != "full"


def half_t_prior(df: float = 3.0, scale: float = 7.0) -> PriorConfig:
    return PriorConfig(hier_kind="half_t", hier_df=df, hier_scale=scale)


def inv_gamma_prior(shape: float = 0.125, scale: float = 355.56) -> PriorConfig:
    return PriorConfig(hier_kind="inv_gamma", hier_shape=shape, hier_scale=scale)


def no_borrowing_prior() -> PriorConfig:
    return PriorConfig(hier_kind="none")


def full_borrowing_prior() -> PriorConfig:
    return PriorConfig(hier_kind="full")


@dataclass(frozen=True)
class ModelParams:
    """Point in parameter space.

    ``theta`` holds the K-1 cutpoint increments; ``u`` the two
    state-specific treatment deviations (low, high); ``log_sigma`` the log
    borrowing scale (ignored by configurations without a hyperparameter).
    """

    theta: np.ndarray
    beta_s: float = 0.0
    beta_t: float = 0.0
    u: np.ndarray = field(default_factory=lambda: np.zeros(2))
    log_sigma: float = 0.0

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta, dtype=float))
        uu = np.asarray(self.u, dtype=float)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "u", uu)
        th.setflags(write=False)
        uu.setflags(write=False)
        if uu.shape != (2,):
            raise ValidationError("u must hold exactly two deviations (low, high)")

    @property
    def n_categories(self) -> int:
        return self.theta.size + 1

    def alpha(self) -> np.ndarray:
        """Strictly increasing cutpoints implied by the increments."""
        out = np.empty_like(self.theta)
        out[0] = self.theta[0]
        out[1:] = self.theta[0] + np.cumsum(np.exp(self.theta[1:]))
        return out


@dataclass(frozen=True)
class Dataset:
    """Outcome counts, shape (2 states, 2 arms, K); state 0=low, arm 0=uc."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        object.__setattr__(self, "counts", c)
        c.setflags(write=False)
        if c.ndim != 3 or c.shape[:2] != (2, 2) or c.shape[2] < 2:
            raise ValidationError("counts must have shape (2, 2, K>=2)")
        if np.any(c < 0) or not np.all(c == np.round(c)):
            raise ValidationError("counts must be nonnegative integers")

    @classmethod
    def zeros(cls, k: int) -> "Dataset":
        return cls(np.zeros((2, 2, k)))

    @classmethod
    def from_records(cls, records, k: int) -> "Dataset":
        counts = np.zeros((2, 2, k))
        for rec in records:
            if not 1 <= rec.outcome <= k:
                raise ValidationError(f"outcome {rec.outcome} outside 1..{k}")
            counts[STATES.index(rec.state), ARMS.index(rec.arm), rec.outcome - 1] += 1
        return cls(counts)

    def adding(self, state_idx: int, arm_counts: np.ndarray) -> "Dataset":
        """New dataset with a (2, K) block of counts added to one state."""
        counts = self.counts.copy()
        counts[state_idx] += arm_counts
        return Dataset(counts)

    @property
    def n_categories(self) -> int:
        return self.counts.shape[2]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def per_state_totals(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    def cell_matrix(self) -> np.ndarray:
        """Counts rearranged to the canonical cell order, shape (4, K)."""
        return self.counts.reshape(4, self.n_categories)


def state_index(state: str) -> int:
    try:
        return STATES.index(state)
    except ValueError:
        raise ValidationError(f"unknown state {state!r}") from None


def linear_predictor(params: ModelParams, state: str, arm: str, j: int) -> float:
    """Cumulative-logit linear predictor at cutpoint j (1-based)."""
    if not 1 <= j <= params.theta.size:
        raise ValueError(f"cutpoint index {j} outside 1..{params.theta.size}")
    s = 1.0 if state == "low" else 0.0
    t = 1.0 if arm == "dpl" else 0.0
    u_k = params.u[state_index(state)]
    return float(params.alpha()[j - 1] - params.beta_s * s - (params.beta_t + u_k) * t)


def cell_probs(params: ModelParams, state: str, arm: str) -> np.ndarray:
    """Outcome-category probabilities for one state x arm cell."""
    eta = np.array([linear_predictor(params, state, arm, j) for j in range(1, params.theta.size + 1)])
    gamma = _sigmoid(eta)
    return np.diff(np.concatenate(([0.0], gamma, [1.0])))


def state_log_or(params: ModelParams, state: str) -> float:
    """Treatment log-odds-ratio for one state: -(beta_t + U_k)."""
    return float(-(params.beta_t + params.u[state_index(state)]))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    # -softplus(-x), stable on both tails
    return -np.logaddexp(0.0, -x)


def _log_normal(x, variance):
    return -0.5 * (np.log(2.0 * np.pi * variance) + x * x / variance)


def log_sigma_prior(log_sigma, priors: PriorConfig):
    """Log density of the borrowing-scale prior in the log-sigma scale.

    Includes the change-of-variables Jacobian, so this is a proper density
    over log sigma.  half_t places a half-t(df, scale) on sigma itself;
    inv_gamma places an inverse-gamma(shape, scale) on sigma^2.  Works
    elementwise on arrays.
    """
    t = np.asarray(log_sigma, dtype=float)
    if priors.hier_kind in ("half_t", "half_t_sd"):
        nu, s = priors.hier_df, priors.hier_scale
        const = (
            np.log(2.0)
            + gammaln((nu + 1.0) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * np.log(nu * np.pi)
            - np.log(s)
        )
        if priors.hier_kind == "half_t":
            # half-t on the variance sigma^2; Jacobian d sigma^2 / d t
            out = (
                const
                - (nu + 1.0) / 2.0 * np.log1p(np.exp(4.0 * t) / (s * s * nu))
                + np.log(2.0)
                + 2.0 * t
            )
        else:
            # half-t on the standard deviation sigma
            out = const - (nu + 1.0) / 2.0 * np.log1p(np.exp(2.0 * t) / (s * s * nu)) + t
    elif priors.hier_kind == "inv_gamma":
        a, b = priors.hier_shape, priors.hier_scale
        out = a * np.log(b) - gammaln(a) - 2.0 * a * t - b * np.exp(-2.0 * t) + np.log(2.0)
    else:
        raise ValidationError(f"no hyperparameter under hier_kind={priors.hier_kind!r}")
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Packed-vector machinery shared by the Laplace engine and the MCMC oracle.
#
# Latent vector layout: [theta_1..theta_{K-1}, beta_s, beta_t, (u_low, u_high)]
# where the u block is absent under full borrowing.  The MCMC oracle appends
# log_sigma as the final coordinate when the prior has a hyperparameter.
# ---------------------------------------------------------------------------


def latent_dim(k: int, priors: PriorConfig) -> int:
    return (k - 1) + 2 + (2 if priors.has_u else 0)


def pack_latent(params: ModelParams, priors: PriorConfig) -> np.ndarray:
    parts = [params.theta, [params.beta_s, params.beta_t]]
    if priors.has_u:
        parts.append(params.u)
    return np.concatenate(parts)


def unpack_latent(v: np.ndarray, k: int, priors: PriorConfig, log_sigma: float = 0.0) -> ModelParams:
    u = v[k + 1 : k + 3] if priors.has_u else np.zeros(2)
    return ModelParams(
        theta=v[: k - 1], beta_s=float(v[k - 1]), beta_t=float(v[k]), u=u, log_sigma=log_sigma
    )


def contrast_vector(k: int, priors: PriorConfig, state: str) -> np.ndarray:
    """Coefficients c with c.v = -(beta_t + U_state) for the packed layout."""
    c = np.zeros(latent_dim(k, priors))
    c[k] = -1.0
    if priors.has_u:
        c[k + 1 + state_index(state)] = -1.0
    return c


def _alpha_and_jacobian(theta):
    """Cutpoints alpha(theta) and the lower-triangular d alpha / d theta."""
    km1 = theta.size
    alpha = np.empty(km1)
    alpha[0] = theta[0]
    exp_th = np.exp(theta[1:])
    alpha[1:] = theta[0] + np.cumsum(exp_th)
    a_jac = np.zeros((km1, km1))
    a_jac[:, 0] = 1.0
    for m in range(1, km1):
        a_jac[m:, m] = exp_th[m - 1]
    return alpha, a_jac


def _cell_offsets(v, k, priors):
    """Linear offsets m = beta_s*S + (beta_t + U)*T per row, shape (..., 5).

    Rows are the four data cells plus the prior anchor at the average offset.
    """
    beta_s = v[..., k - 1]
    beta_t = v[..., k]
    if priors.has_u:
        u_low = v[..., k + 1]
        u_high = v[..., k + 2]
    else:
        u_low = u_high = np.zeros_like(beta_t)
    cells = [
        np.broadcast_to(beta_s, beta_t.shape),
        beta_s + beta_t + u_low,
        np.zeros_like(beta_t),
        beta_t + u_high,
    ]
    anchor = 0.25 * (cells[0] + cells[1] + cells[2] + cells[3])
    return np.stack(cells + [anchor], axis=-1)


def _log_cell_probs(eta, theta):
    """Stable log category probabilities, shape (..., 4, K).

    eta has shape (..., 4, K-1); the gap between consecutive cutpoints is
    exp(theta_j), shared across cells, which keeps the interior-category
    term log(1 - exp(-gap)) free of cancellation.
    """
    lsig = _log_sigmoid(eta)
    lsig_neg = _log_sigmoid(-eta)
    # log(1 - exp(-gap)) for the interior categories; gap_j = exp(theta_j)
    gaps = np.exp(theta[..., 1:])
    log_gap_term = np.log(-np.expm1(-gaps))
    parts = [lsig[..., :1]]
    if eta.shape[-1] > 1:
        middle = lsig[..., 1:] + lsig_neg[..., :-1] + log_gap_term[..., None, :]
        parts.append(middle)
    parts.append(lsig_neg[..., -1:])
    return np.concatenate(parts, axis=-1)


class LatentObjective:
    """Log joint density over the latent block at fixed log sigma.

    Bundles the count data (with the Dirichlet prior folded in as
    pseudo-counts at the reference cell) and exposes value / gradient /
    Hessian evaluations for the Newton optimizer.
    """

    def __init__(self, data: Dataset, priors: PriorConfig):
        self.k = data.n_categories
        self.priors = priors
        self.dim = latent_dim(self.k, priors)
        self.counts = data.cell_matrix().astype(float)
        # The Dirichlet(conc) prior over the anchor row's category
        # probabilities acts on the log joint exactly like conc-1 extra
        # counts per category in that row.
        self.eff_counts = np.vstack(
            [self.counts, np.full(self.k, priors.dirichlet_conc - 1.0)]
        )
        a = priors.dirichlet_conc
        self.dirichlet_const = float(gammaln(self.k * a) - self.k * gammaln(a))
        nb = 4 if priors.has_u else 2
        self.cell_x = np.zeros((5, nb))
        self.cell_x[:, 0] = _CELL_S
        self.cell_x[:, 1] = _CELL_T
        if priors.has_u:
            self.cell_x[:2, 2] = _CELL_T[:2]  # low-state cells load on u_low
            self.cell_x[2:4, 3] = _CELL_T[2:4]  # high-state cells on u_high
            self.cell_x[_PRIOR_ROW, 2:] = 0.25  # average of the cell loadings

    # -- initial point ------------------------------------------------------

    def initial_vector(self) -> np.ndarray:
        """Warm start: cutpoints at regularized pooled frequencies, rest 0."""
        pooled = self.counts.sum(axis=0)
        p_hat = (pooled + 1.0 / self.k) / (pooled.sum() + 1.0)
        gamma = np.cumsum(p_hat)[:-1]
        alpha = np.log(gamma / (1.0 - gamma))
        theta = np.empty(self.k - 1)
        theta[0] = alpha[0]
        theta[1:] = np.log(np.diff(alpha))
        v = np.zeros(self.dim)
        v[: self.k - 1] = theta
        return v

    # -- value only (supports batches of vectors) ---------------------------

    def value(self, v: np.ndarray, log_sigma: float = 0.0) -> float:
        return float(self.value_batch(np.asarray(v)[None, :], log_sigma)[0])

    def value_batch(self, v: np.ndarray, log_sigma, u_prior: bool = True) -> np.ndarray:
        """Log joint for a batch of latent vectors, shape (B, dim) -> (B,).

        ``log_sigma`` may be scalar or length-B.  The sigma-prior term itself
        is not included (it does not involve the latent block); see
        :func:`log_joint` for the full density.  ``u_prior=False`` drops the
        deviation-prior term for callers that reparameterize the deviations.
        """
        k = self.k
        theta = v[..., : k - 1]
        alpha = theta[..., :1] + np.concatenate(
            [np.zeros_like(theta[..., :1]), np.cumsum(np.exp(theta[..., 1:]), axis=-1)], axis=-1
        )
        eta = alpha[..., None, :] - _cell_offsets(v, k, self.priors)[..., :, None]
        lp = _log_cell_probs(eta, theta)
        out = np.sum(self.eff_counts * lp, axis=(-2, -1))
        # Jacobian of the Dirichlet change of variables to theta, evaluated
        # at the anchor row's linear predictor.
        eta_bar = eta[..., _PRIOR_ROW, :]
        out = out + np.sum(theta[..., 1:], axis=-1)
        out = out + np.sum(_log_sigmoid(eta_bar) + _log_sigmoid(-eta_bar), axis=-1)
        out = out + self.dirichlet_const
        vb = self.priors.beta_variance
        out = out + _log_normal(v[..., k - 1], vb) + _log_normal(v[..., k], vb)
        if self.priors.has_u and u_prior:
            u = v[..., k + 1 : k + 3]
            if self.priors.has_hyper:
                var = np.exp(2.0 * np.asarray(log_sigma, dtype=float))[..., None]
                out = out + np.sum(_log_normal(u, var), axis=-1)
            else:
                out = out + np.sum(_log_normal(u, vb), axis=-1)
        return out

    # -- value, gradient, Hessian (single vector) ---------------------------

    def value_grad_hess(self, v: np.ndarray, log_sigma: float = 0.0):
        k = self.k
        km1 = k - 1
        theta = v[:km1]
        alpha, a_jac = _alpha_and_jacobian(theta)
        offsets = _cell_offsets(v[None, :], k, self.priors)[0]
        eta = alpha[None, :] - offsets[:, None]  # (5, K-1)
        lp = _log_cell_probs(eta[None, ...], theta[None, :])[0]  # (5, K)
        p = np.exp(lp)
        sig = _sigmoid(eta)
        gp = sig * (1.0 - sig)  # gamma'
        gdp = gp * (1.0 - 2.0 * sig)  # gamma''

        nc = self.eff_counts
        r = nc / np.maximum(p, _P_FLOOR)  # n/p
        rr = r / np.maximum(p, _P_FLOOR)  # n/p^2

        # value ---------------------------------------------------------
        value = float(np.sum(nc * lp)) + self.dirichlet_const
        value += float(np.sum(theta[1:]))
        value += float(np.sum(_log_sigmoid(eta[_PRIOR_ROW]) + _log_sigmoid(-eta[_PRIOR_ROW])))
        vb = self.priors.beta_variance
        beta_s, beta_t = v[km1], v[k]
        value += float(_log_normal(beta_s, vb) + _log_normal(beta_t, vb))

        # count terms in eta space, one row per cell plus the prior anchor
        g_eta = gp * (r[:, :-1] - r[:, 1:])  # (5, K-1)
        h_diag = gdp * (r[:, :-1] - r[:, 1:]) - gp * gp * (rr[:, :-1] + rr[:, 1:])
        h_off = gp[:, :-1] * gp[:, 1:] * rr[:, 1:-1]  # (5, K-2) super-diagonal

        # Dirichlet-Jacobian term sum_j log sig(eta_j) sig(-eta_j) on the
        # anchor row rides the same chain rule as the count terms.
        g_eta[_PRIOR_ROW] += 1.0 - 2.0 * sig[_PRIOR_ROW]
        h_diag[_PRIOR_ROW] += -2.0 * gp[_PRIOR_ROW]

        g_alpha = g_eta.sum(axis=0)
        row_sum = h_diag.copy()
        if km1 > 1:
            row_sum[:, :-1] += h_off
            row_sum[:, 1:] += h_off
        cell_total = row_sum.sum(axis=1)  # 1' H_eta 1 per row

        h_alpha = np.zeros((km1, km1))
        diag_sum = h_diag.sum(axis=0)
        h_alpha[np.arange(km1), np.arange(km1)] = diag_sum
        if km1 > 1:
            off_sum = h_off.sum(axis=0)
            idx = np.arange(km1 - 1)
            h_alpha[idx, idx + 1] += off_sum
            h_alpha[idx + 1, idx] += off_sum

        # offset block ----------------------------------------------------
        g_m = -g_eta.sum(axis=1)  # (5,)
        x = self.cell_x
        g_b = x.T @ g_m
        h_bb = (x.T * cell_total) @ x
        h_ab = -(row_sum.T @ x)  # (K-1, nb)

        # chain rule alpha -> theta ----------------------------------------
        g_theta = a_jac.T @ g_alpha
        g_theta[1:] += 1.0
        h_theta = a_jac.T @ h_alpha @ a_jac
        # second-derivative correction: alpha_j depends on theta_m via exp
        tail_g = np.cumsum(g_alpha[::-1])[::-1]
        corr = np.zeros(km1)
        corr[1:] = np.exp(theta[1:]) * tail_g[1:]
        h_theta[np.arange(km1), np.arange(km1)] += corr

        # priors on the offset block ---------------------------------------
        grad = np.zeros(self.dim)
        hess = np.zeros((self.dim, self.dim))
        grad[:km1] = g_theta
        grad[km1:] = g_b
        hess[:km1, :km1] = h_theta
        hess[:km1, km1:] = a_jac.T @ h_ab
        hess[km1:, :km1] = hess[:km1, km1:].T
        hess[km1:, km1:] = h_bb

        grad[km1] += -beta_s / vb
        grad[k] += -beta_t / vb
        hess[km1, km1] += -1.0 / vb
        hess[k, k] += -1.0 / vb
        if self.priors.has_u:
            u = v[k + 1 : k + 3]
            u_var = np.exp(2.0 * log_sigma) if self.priors.has_hyper else vb
            value += float(np.sum(_log_normal(u, u_var)))
            grad[k + 1 : k + 3] += -u / u_var
            hess[k + 1, k + 1] += -1.0 / u_var
            hess[k + 2, k + 2] += -1.0 / u_var

        return value, grad, hess


def log_joint(params: ModelParams, data: Dataset, priors: PriorConfig) -> float:
    """Full log joint density (likelihood and all priors) at one point.

    Under configurations with a borrowing hyperparameter this includes the
    log prior of sigma evaluated at ``params.log_sigma`` (with the Jacobian
    for the log parameterization); under "none" and "full" there is no
    sigma term.  Under "full" the deviations are pinned to zero, so the
    value does not depend on ``params.u`` or ``params.log_sigma``.
    """
    if data.n_categories != params.n_categories:
        raise ValidationError("parameter and data category counts differ")
    obj = LatentObjective(data, priors)
    v = pack_latent(params, priors)
    out = obj.value(v, params.log_sigma)
    if priors.has_hyper:
        out += log_sigma_prior(params.log_sigma, priors)
    return out


def log_likelihood(params: ModelParams, data: Dataset) -> float:
    """Multinomial log likelihood alone (no priors)."""
    counts = data.cell_matrix()
    total = 0.0
    for idx, (s, a) in enumerate(_CELLS):
        lp = np.log(np.maximum(cell_probs(params, STATES[s], ARMS[a]), _P_FLOOR))
        total += float(counts[idx] @ lp)
    return total


def log_joint_grad_hess(params: ModelParams, data: Dataset, priors: PriorConfig):
    """Gradient and Hessian of the log joint over the latent block.

    log_sigma is held fixed (its prior term is an additive constant here and
    is omitted from the value).  Returns (value, gradient, hessian) in the
    packed layout of :func:`pack_latent`.
    """
    obj = LatentObjective(data, priors)
    return obj.value_grad_hess(pack_latent(params, priors), params.log_sigma)
