"""Adaptive random-walk Metropolis oracle for the same model.

Reference sampler used in tests and calibration to validate the Laplace
engine.  It targets the identical joint posterior, but walks on coordinates
chosen so that a random-walk proposal can actually work:

    w = (theta, beta_s, s_bar, d)       s_k = beta_t + U_k,
                                        s_bar = (s_low + s_high) / 2,
                                        d = s_low - s_high,

plus t = log sigma where the prior has a hyperparameter.  The likelihood
sees the treatment only through s_low and s_high.  beta_t itself is
marginalized out analytically (its conditional given (s, t) is Gaussian)
and reconstructed exactly for the stored draws, which removes the wide
prior-dominated ridge between beta_t and the deviations.  Under the
deviation prior, s_bar and d are independent with s_bar ~ N(0, V + e^2t/2)
and d ~ N(0, 2 e^2t).

One iteration is:

  1. adaptive random-walk Metropolis on (theta, beta_s, s_bar):
     Haario-style proposal covariance re-estimated over doubling warmup
     windows, plus a Robbins-Monro global step size aimed at the target
     acceptance rate;
  2. a 1-D Metropolis move of d with proposal scale proportional to its
     conditional prior width (e^t under a hyperprior) and an adapted
     multiplier -- keeping d out of the joint block matters because its
     conditional width collapses with sigma, and an all-or-nothing joint
     proposal would freeze every coordinate whenever sigma visits small
     values;
  3. a centered 1-D Metropolis move of t holding (s_bar, d) fixed, whose
     ratio involves only prior terms (the likelihood never sees t);
  4. a non-centered 1-D move (d, t) -> (d e^x, t + x), the interweaving
     partner of move 3, which travels along the deviation/scale funnel
     (Jacobian e^x).

Moves 3 and 4 together (ASIS interweaving) mix log sigma in both the
prior-dominated and data-dominated regimes; either alone stalls in one of
them.  Chains run as one vectorized batch, but each chain consumes its own
spawned stream, so results are chain-wise reproducible and merge
deterministically by chain index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import Dataset, LatentObjective, PriorConfig, contrast_vector, log_sigma_prior
from .outcomes import STATES

_INIT_JITTER = 1.0
_BLOCK = 256  # pre-drawn randoms per chain per block


@dataclass(frozen=True)
class McmcSettings:
    chains: int = 4
    iterations: int = 50_000  # per chain, warmup included
    warmup: int = 10_000
    adapt_target: float = 0.30

    def __post_init__(self):
        if self.chains < 2:
            raise ValidationError("need at least 2 chains for split R-hat")
        if not 0 < self.warmup < self.iterations:
            raise ValidationError("warmup must be positive and below iterations")
        if not 0.05 < self.adapt_target < 0.95:
            raise ValidationError("adapt_target must be a workable acceptance rate")


@dataclass(frozen=True)
class McmcResult:
    """Post-warmup draws plus convergence diagnostics.

    ``draws`` holds the centered parameter vector (theta, beta_s, beta_t,
    U..., [log sigma]) with shape (chains, kept, dim).  ``monitored`` maps
    each monitored quantity to its (chains, kept) series: the per-state
    treatment log-odds-ratios and sigma when present.
    """

    draws: np.ndarray
    monitored: dict
    r_hat: dict
    ess: dict
    acceptance: np.ndarray
    reliable: bool
    beta_t_index: int  # column of draws holding beta_t

    def series(self, name: str) -> np.ndarray:
        return self.monitored[name]

    def log_or(self, state: str) -> np.ndarray:
        return self.monitored[f"log_or_{state}"]

    def posterior_mean(self, state: str) -> float:
        return float(self.log_or(state).mean())

    def posterior_sd(self, state: str) -> float:
        return float(self.log_or(state).std(ddof=1))

    def tail_prob(self, state: str, threshold: float, above: bool = False):
        """Estimate P(log-OR < threshold), with its MC error and the
        indicator-series ESS.  ``above=True`` flips the event."""
        x = self.log_or(state)
        ind = (x > threshold) if above else (x < threshold)
        ind = ind.astype(float)
        p = float(ind.mean())
        ess = _ess(ind)
        mcse = float(np.sqrt(max(p * (1.0 - p), 1e-12) / max(ess, 1.0)))
        return p, mcse, ess

    def prob_superior(self, state: str) -> float:
        return self.tail_prob(state, 0.0)[0]

    def prob_futile(self, state: str, mcid_or: float = 1.0 / 1.2) -> float:
        return self.tail_prob(state, float(np.log(mcid_or)), above=True)[0]


def _log_normal(x, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + x * x / var)


def sample(
    data: Dataset,
    priors: PriorConfig,
    settings: McmcSettings = McmcSettings(),
    rng: np.random.Generator | None = None,
) -> McmcResult:
    """Draw from the joint posterior; see the module docstring for the moves.

    ``rng`` seeds the run; each chain owns one spawned child stream.  An
    empty dataset is allowed and yields draws from the prior.
    """
    if rng is None:
        raise ValueError("an explicit random generator is required for reproducibility")
    obj = LatentObjective(data, priors)
    k = obj.k
    vb = priors.beta_variance
    has_u = priors.has_u
    has_t = priors.has_hyper
    n_chains = settings.chains

    dim_walk = k + 1  # theta, beta_s, and s_bar (or beta_t under full borrowing)
    dim_out = obj.dim + (1 if has_t else 0)
    i_c = k  # slot of s_bar / beta_t in the walk vector

    def u_variance(t):
        return np.exp(2.0 * t) if has_t else vb

    def prior_vars(t):
        uv = u_variance(t)
        return vb + 0.5 * uv, 2.0 * uv  # var(s_bar), var(d)

    def full_target(w, d, t):
        """Joint log density (beta_t marginalized under a deviation prior)."""
        v = np.zeros((w.shape[0], obj.dim))
        v[:, : k - 1] = w[:, : k - 1]
        v[:, k - 1] = w[:, k - 1]
        if has_u:
            v[:, k + 1] = w[:, i_c] + 0.5 * d  # s_low
            v[:, k + 2] = w[:, i_c] - 0.5 * d  # s_high
            out = obj.value_batch(v, t if has_t else 0.0, u_prior=False)
            var_sbar, var_d = prior_vars(t)
            out = out + _log_normal(w[:, i_c], var_sbar) + _log_normal(d, var_d)
            # drop the spurious beta_t-at-zero prior constant added above
            out = out - _log_normal(0.0, vb)
        else:
            v[:, k] = w[:, i_c]
            out = obj.value_batch(v, 0.0)
        if has_t:
            out = out + log_sigma_prior(t, priors)
        return out

    gens = rng.spawn(n_chains)
    base_v = obj.initial_vector()
    base = np.concatenate([base_v[:k], np.zeros(1)])
    w = np.stack([base + g.normal(0.0, _INIT_JITTER, dim_walk) for g in gens])
    d = np.stack([g.normal(0.0, _INIT_JITTER) for g in gens])
    t = np.stack([g.normal(0.0, _INIT_JITTER) for g in gens])
    if not has_t:
        t = np.zeros(n_chains)
    if not has_u:
        d = np.zeros(n_chains)
    logp = full_target(w, d, t)

    # Windowed proposal adaptation: a first phase adapts only the global
    # step size on a prior-scale diagonal, doubling windows then re-estimate
    # the covariance from each window's own samples and restart the step
    # size, and a final phase adapts the step size alone.  Estimating the
    # covariance continuously from a not-yet-mixing chain couples the two
    # adaptations and reliably traps chains.
    prior_sd = np.ones(dim_walk)
    prior_sd[k - 1] = np.sqrt(vb)
    if has_u:
        u_var0 = min(priors.hier_scale**2 * 3.0, 500.0) if has_t else vb
        prior_sd[i_c] = np.sqrt(vb + 0.5 * u_var0)
    else:
        prior_sd[i_c] = np.sqrt(vb)
    chol = np.tile(np.diag(prior_sd), (n_chains, 1, 1))
    base_log_scale = np.log(2.38 / np.sqrt(dim_walk))
    log_scale = np.full(n_chains, base_log_scale)
    win_mean = w.copy()
    win_cov = np.zeros((n_chains, dim_walk, dim_walk))
    win_count = 0
    rm_count = 0
    phase1_end = max(int(0.15 * settings.warmup), 2 * dim_walk)
    phase3_start = int(0.9 * settings.warmup)
    window_len = 50
    window_end = min(phase1_end + window_len, phase3_start)
    t_step_c = np.zeros(n_chains)  # centered t-move log step
    t_step_n = np.zeros(n_chains)  # non-centered (rescaling) move log step
    d_step = np.zeros(n_chains)  # log multiplier on the d proposal scale

    def d_scale(t):
        return np.sqrt(2.0) * np.exp(t) if has_t else np.sqrt(2.0 * vb)

    kept = settings.iterations - settings.warmup
    draws = np.empty((n_chains, kept, dim_out))
    accept_post = np.zeros(n_chains)

    it = 0
    while it < settings.iterations:
        block = min(_BLOCK, settings.iterations - it)
        z = np.stack([g.standard_normal((block, dim_walk)) for g in gens])
        log_u = np.log(np.stack([g.random(block) for g in gens]))
        if has_u:
            z_d = np.stack([g.standard_normal(block) for g in gens])
            log_u_d = np.log(np.stack([g.random(block) for g in gens]))
            z_r = np.stack([g.standard_normal(block) for g in gens])
        if has_t:
            z_c = np.stack([g.standard_normal(block) for g in gens])
            log_u_c = np.log(np.stack([g.random(block) for g in gens]))
            z_n = np.stack([g.standard_normal(block) for g in gens])
            log_u_n = np.log(np.stack([g.random(block) for g in gens]))
        for b in range(block):
            # 1. adaptive random-walk Metropolis on (theta, beta_s, s_bar)
            step = np.einsum("cij,cj->ci", chol, z[:, b, :])
            prop = w + np.exp(log_scale)[:, None] * step
            logp_prop = full_target(prop, d, t)
            accept = log_u[:, b] < (logp_prop - logp)
            w[accept] = prop[accept]
            logp[accept] = logp_prop[accept]

            if has_u:
                # 2. 1-D move of the state difference d
                d_new = d + d_scale(t) * np.exp(d_step) * z_d[:, b]
                logp_prop = full_target(w, d_new, t)
                acc_d = log_u_d[:, b] < (logp_prop - logp)
                d = np.where(acc_d, d_new, d)
                logp = np.where(acc_d, logp_prop, logp)

            if has_t:
                # 3. centered t-move: only prior terms change
                sbar = w[:, i_c]
                d_t = np.exp(t_step_c) * z_c[:, b]
                t_new = t + d_t
                var_sbar, var_d = prior_vars(t)
                var_sbar2, var_d2 = prior_vars(t_new)
                delta = (
                    _log_normal(sbar, var_sbar2)
                    - _log_normal(sbar, var_sbar)
                    + _log_normal(d, var_d2)
                    - _log_normal(d, var_d)
                    + log_sigma_prior(t_new, priors)
                    - log_sigma_prior(t, priors)
                )
                acc_c = log_u_c[:, b] < delta
                t = np.where(acc_c, t_new, t)
                logp = np.where(acc_c, logp + delta, logp)

                # 4. non-centered rescaling (d, t) -> (d e^x, t + x)
                x_n = np.exp(t_step_n) * z_n[:, b]
                d_new = d * np.exp(x_n)
                t_new = t + x_n
                logp_prop = full_target(w, d_new, t_new)
                acc_n = log_u_n[:, b] < (logp_prop - logp + x_n)
                d = np.where(acc_n, d_new, d)
                t = np.where(acc_n, t_new, t)
                logp = np.where(acc_n, logp_prop, logp)

            if it < settings.warmup:
                rm_count += 1
                gamma = rm_count**-0.6
                log_scale += gamma * (accept.astype(float) - settings.adapt_target)
                np.clip(log_scale, base_log_scale - 25.0, base_log_scale + 10.0, out=log_scale)
                gamma_t = (it + 1.0) ** -0.6
                if has_u:
                    d_step += gamma_t * (acc_d.astype(float) - 0.44)
                if has_t:
                    t_step_c += gamma_t * (acc_c.astype(float) - 0.44)
                    t_step_n += gamma_t * (acc_n.astype(float) - 0.44)
                if phase1_end <= it < phase3_start:
                    win_count += 1
                    delta_w = w - win_mean
                    win_mean += delta_w / win_count
                    win_cov += (np.einsum("ci,cj->cij", delta_w, w - win_mean) - win_cov) / win_count
                    if it + 1 == window_end:
                        if win_count > dim_walk:
                            scale_floor = np.maximum(
                                win_cov[:, np.arange(dim_walk), np.arange(dim_walk)].max(axis=1),
                                1e-12,
                            )
                            reg = win_cov + (1e-8 * scale_floor)[:, None, None] * np.eye(dim_walk)
                            try:
                                chol = np.linalg.cholesky(reg)
                                log_scale[:] = base_log_scale
                                rm_count = 0
                            except np.linalg.LinAlgError:
                                pass  # window too degenerate; keep previous factor
                        win_mean = w.copy()
                        win_cov[:] = 0.0
                        win_count = 0
                        window_len *= 2
                        window_end = min(it + 1 + window_len, phase3_start)
            else:
                idx = it - settings.warmup
                draws[:, idx, : k - 1] = w[:, : k - 1]
                draws[:, idx, k - 1] = w[:, k - 1]
                if has_u:
                    s_low = w[:, i_c] + 0.5 * d
                    s_high = w[:, i_c] - 0.5 * d
                    # exact draw of beta_t from its Gaussian conditional
                    uv = u_variance(t)
                    prec = 1.0 / vb + 2.0 / uv
                    mu = (s_low + s_high) / uv / prec
                    r = mu + z_r[:, b] / np.sqrt(prec)
                    draws[:, idx, k] = r
                    draws[:, idx, k + 1] = s_low - r
                    draws[:, idx, k + 2] = s_high - r
                else:
                    draws[:, idx, k] = w[:, i_c]
                if has_t:
                    draws[:, idx, obj.dim] = t
                accept_post += accept.astype(float)
            it += 1

    acceptance = accept_post / kept

    monitored = {}
    for st in STATES:
        c = contrast_vector(k, priors, st)
        monitored[f"log_or_{st}"] = draws[:, :, : obj.dim] @ c
    if has_t:
        monitored["sigma"] = np.exp(draws[:, :, obj.dim])

    r_hat = {name: _split_r_hat(series) for name, series in monitored.items()}
    ess = {name: _ess(series) for name, series in monitored.items()}
    reliable = all(np.isfinite(v) and v <= 1.01 for v in r_hat.values()) and all(
        v >= 400 for v in ess.values()
    )
    return McmcResult(
        draws=draws,
        monitored=monitored,
        r_hat=r_hat,
        ess=ess,
        acceptance=acceptance,
        reliable=reliable,
        beta_t_index=k,
    )


def _split_chains(series: np.ndarray) -> np.ndarray:
    c, n = series.shape
    half = n // 2
    return np.concatenate([series[:, :half], series[:, half : 2 * half]], axis=0)


def _split_r_hat(series: np.ndarray) -> float:
    """Split R-hat (potential scale reduction) for a (chains, draws) series."""
    s = _split_chains(series)
    m, n = s.shape
    chain_means = s.mean(axis=1)
    chain_vars = s.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * chain_means.var(ddof=1)
    if w <= 0:
        return np.inf if b > 0 else 1.0
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of one sequence via FFT."""
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    return acov / n


def _ess(series: np.ndarray) -> float:
    """Effective sample size across chains (Geyer initial monotone sequence)."""
    s = _split_chains(np.asarray(series, dtype=float))
    m, n = s.shape
    if n < 4:
        return float(m * n)
    chain_vars = s.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * s.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    if var_plus <= 0:
        return float(m * n)
    acov = np.mean([_autocovariance(s[i]) for i in range(m)], axis=0)
    rho = 1.0 - (w - acov) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive and nonincreasing
    max_pairs = (n - 1) // 2
    tau = 0.0
    prev = np.inf
    for pair_idx in range(max_pairs):
        pair = rho[2 * pair_idx] + rho[2 * pair_idx + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        tau += pair
        prev = pair
    tau = max(2.0 * tau - 1.0, 1.0 / n)
    return float(m * n / tau)
