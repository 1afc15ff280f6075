"""Client-level DP machinery.

Clipping and Gaussian noising of local updates, the aggregation
sensitivity, and a Renyi-DP accountant for the sampled Gaussian
mechanism with conversion to (epsilon, delta).

The accountant evaluates the one-round Renyi divergence

    eps1(alpha) = 1/(alpha-1) * ln E_{z~mu0}[ (1-q + q*mu1(z)/mu0(z))^alpha ]

with mu0 = N(0, sigma^2) and mu1 = N(1, sigma^2), by an exact binomial
expansion for integer alpha and by adaptive quadrature in log space for
real alpha.  Rounds compose additively per order; the conversion to
(epsilon, delta) minimizes over the tracked orders.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

from .rng import philox

# Relative down-scale applied on the clipped branch so the float norm of a
# clipped vector can never exceed the bound; far below the 1e-9 slack the
# clip invariants allow, and required for the exact (tolerance-free)
# aggregation sensitivity inequality to hold in floating point.
_CLIP_SAFETY = 1e-12


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


@dataclass(frozen=True)
class PrivacySpec:
    """Clip bound, noise multiplier and sampling geometry.

    Per-coordinate noise variance is sigma^2 C^2 / m, matching noise added
    client-side before a plain 1/m average at the server.
    """

    clip_bound: float
    noise_multiplier: float
    sample_ratio: float
    delta: float
    total_clients: int
    sampled_clients: int = 0  # 0 means: derive as round(q * M)

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise ValueError(f"clip bound must be > 0, got {self.clip_bound}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0 < self.sample_ratio <= 1:
            raise ValueError(f"sample ratio must be in (0, 1], got {self.sample_ratio}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.total_clients < 1:
            raise ValueError("need at least one client")
        if self.sampled_clients == 0:
            object.__setattr__(
                self,
                "sampled_clients",
                max(1, int(round(self.sample_ratio * self.total_clients))),
            )
        if not 1 <= self.sampled_clients <= self.total_clients:
            raise ValueError(
                f"sampled clients {self.sampled_clients} out of range "
                f"[1, {self.total_clients}]"
            )

    @property
    def noise_stddev(self) -> float:
        """Per-coordinate noise standard deviation sigma*C/sqrt(m)."""
        return self.noise_multiplier * self.clip_bound / math.sqrt(self.sampled_clients)


@dataclass
class ClipResult:
    clipped: np.ndarray
    factor: float
    pre_clip_norm: float


def clip_update(delta: np.ndarray, clip_bound: float) -> ClipResult:
    """Scale delta to norm at most the clip bound.

    The reported factor is exactly min(1, C/||delta||); the applied scale
    is shaved by a relative 1e-12 on the clipped branch so the output's
    floating-point norm is strictly within the bound.  A zero vector
    passes through with factor 1.
    """
    if clip_bound <= 0:
        raise ValueError(f"clip bound must be > 0, got {clip_bound}")
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return ClipResult(clipped=delta.copy(), factor=1.0, pre_clip_norm=0.0)
    factor = min(1.0, clip_bound / norm)
    if factor >= 1.0:
        return ClipResult(clipped=delta.copy(), factor=1.0, pre_clip_norm=norm)
    return ClipResult(
        clipped=delta * (factor * (1.0 - _CLIP_SAFETY)),
        factor=factor,
        pre_clip_norm=norm,
    )


def add_dp_noise(delta: np.ndarray, spec: PrivacySpec, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise N(0, sigma^2 C^2 / m) per coordinate."""
    if spec.noise_multiplier == 0.0:
        return delta.copy()
    rng = philox(seed)
    return delta + rng.normal(0.0, spec.noise_stddev, size=delta.shape)


def aggregation_sensitivity(spec: PrivacySpec) -> float:
    """L2 sensitivity C/m of the averaged clipped updates to one client."""
    return spec.clip_bound / spec.sampled_clients


# ---------------------------------------------------------------------------
# Renyi-DP accountant for the sampled Gaussian mechanism.

def default_orders() -> tuple[float, ...]:
    """Order grid: a fine low-alpha band, half steps to 16, then by 4 to 64."""
    low = [1.25, 1.5, 1.75]
    mid = [2.0 + 0.5 * i for i in range(29)]  # 2, 2.5, ..., 16
    high = [20.0 + 4.0 * i for i in range(12)]  # 20, 24, ..., 64
    return tuple(low + mid + high)


DEFAULT_ORDERS = default_orders()


def _check_accountant_args(q: float, sigma: float, alpha: float) -> None:
    if not 0 <= q <= 1:
        raise ValueError(f"sampling ratio must be in [0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if alpha <= 1:
        raise ValueError(f"Renyi order must be > 1, got {alpha}")


def rdp_binomial(q: float, sigma: float, alpha: int) -> float:
    """One-round RDP at integer order via the exact binomial expansion.

    E_{z~mu0}[(1-q+q*mu1/mu0)^alpha] expands into
    sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2)),
    evaluated in log space.
    """
    _check_accountant_args(q, sigma, alpha)
    if not float(alpha).is_integer():
        raise ValueError(f"binomial path needs an integer order, got {alpha}")
    a = int(alpha)
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    log_terms = []
    for k in range(a + 1):
        if (q == 1.0 and k < a):
            continue
        t = gammaln(a + 1) - gammaln(k + 1) - gammaln(a - k + 1)
        t += k * (k - 1) / (2.0 * sigma**2)
        if k > 0:
            t += k * math.log(q)
        if a - k > 0:
            t += (a - k) * math.log1p(-q)
        log_terms.append(t)
    return float(logsumexp(log_terms)) / (a - 1)


def _log_integrand(z: np.ndarray, q: float, sigma: float, alpha: float) -> np.ndarray:
    var = sigma * sigma
    log_ratio = (2.0 * z - 1.0) / (2.0 * var)  # log mu1(z)/mu0(z)
    if q == 1.0:
        log_mix = alpha * log_ratio
    else:
        log_mix = alpha * np.logaddexp(math.log1p(-q), math.log(q) + log_ratio)
    return -0.5 * math.log(2.0 * math.pi * var) - z * z / (2.0 * var) + log_mix


def rdp_quadrature(
    q: float, sigma: float, alpha: float, abs_tol: float = 1e-12
) -> float:
    """One-round RDP at real order via adaptive quadrature of the integral.

    The integrand peaks near z = alpha, so the domain [-B, B] uses
    B = alpha + 12 sigma + 12.  The alpha-th power is handled in log
    space and the integral is shifted by the max log value so the
    integrand is O(1) where it matters.
    """
    _check_accountant_args(q, sigma, alpha)
    if q == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    bound = alpha + 12.0 * sigma + 12.0
    coarse = np.linspace(-bound, bound, 513)
    lmax = float(np.max(_log_integrand(coarse, q, sigma, alpha)))
    lmax = max(lmax, float(_log_integrand(np.array([min(alpha, bound)]), q, sigma, alpha)[0]))

    def f(z: float) -> float:
        return math.exp(float(_log_integrand(np.array([z]), q, sigma, alpha)[0]) - lmax)

    value, err = integrate.quad(
        f,
        -bound,
        bound,
        epsabs=abs_tol,
        epsrel=1e-11,
        limit=500,
        points=[0.0, min(alpha, bound)],
    )
    if not np.isfinite(value) or value <= 0 or err > max(abs_tol, 1e-9 * value):
        raise QuadratureError(
            f"quadrature tolerance not met (q={q}, sigma={sigma}, alpha={alpha}, "
            f"value={value}, err={err})"
        )
    return (lmax + math.log(value)) / (alpha - 1.0)


def rdp_sampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """One-round RDP of the sampled Gaussian mechanism at a given order."""
    if float(alpha).is_integer():
        return rdp_binomial(q, sigma, int(alpha))
    return rdp_quadrature(q, sigma, alpha)


@dataclass(frozen=True)
class PrivacyLedger:
    """Accumulated per-order RDP totals over composed rounds."""

    orders: tuple[float, ...] = DEFAULT_ORDERS
    totals: tuple[float, ...] = ()
    rounds_composed: int = 0

    def __post_init__(self):
        if len(self.orders) == 0:
            raise ValueError("order grid must be non-empty")
        if any(a <= 1 for a in self.orders):
            raise ValueError("all Renyi orders must be > 1")
        if not self.totals:
            object.__setattr__(self, "totals", tuple(0.0 for _ in self.orders))
        if len(self.totals) != len(self.orders):
            raise ValueError("totals length must match order grid")


def ledger_compose(
    ledger: PrivacyLedger, rounds: int, q: float, sigma: float
) -> PrivacyLedger:
    """Compose additional rounds of the sampled Gaussian mechanism."""
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    if rounds == 0:
        return ledger
    per_round = [rdp_sampled_gaussian(q, sigma, a) for a in ledger.orders]
    totals = tuple(t + rounds * e for t, e in zip(ledger.totals, per_round))
    return dataclasses.replace(
        ledger, totals=totals, rounds_composed=ledger.rounds_composed + rounds
    )


def _rdp_to_dp(eps_bar: float, alpha: float, delta: float) -> float:
    """eps = eps_bar + ((a-1)log(1-1/a) - log a - log delta)/(a-1)."""
    return eps_bar + (
        (alpha - 1.0) * math.log1p(-1.0 / alpha) - math.log(alpha) - math.log(delta)
    ) / (alpha - 1.0)


def ledger_epsilon(ledger: PrivacyLedger, delta: float) -> tuple[float, float]:
    """Best (epsilon, order) over the tracked grid for a target delta."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    best_eps = math.inf
    best_order = ledger.orders[0]
    for alpha, eps_bar in zip(ledger.orders, ledger.totals):
        eps = _rdp_to_dp(eps_bar, alpha, delta)
        if eps < best_eps:
            best_eps = eps
            best_order = alpha
    return best_eps, best_order


def epsilon_after(
    rounds: int,
    q: float,
    sigma: float,
    delta: float,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Convenience: epsilon and best order after a number of rounds."""
    ledger = ledger_compose(PrivacyLedger(orders=orders), rounds, q, sigma)
    return ledger_epsilon(ledger, delta)


def budget_table(
    q: float,
    sigma: float,
    delta: float,
    round_counts: list[int],
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> list[tuple[int, float, float, float, float, float]]:
    """Rows (T, q, sigma, delta, epsilon, best order) for a range of T."""
    base = PrivacyLedger(orders=orders)
    per_round = tuple(rdp_sampled_gaussian(q, sigma, a) for a in orders)
    rows = []
    for rounds in round_counts:
        if rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {rounds}")
        ledger = dataclasses.replace(
            base,
            totals=tuple(rounds * e for e in per_round),
            rounds_composed=rounds,
        )
        eps, order = ledger_epsilon(ledger, delta)
        rows.append((rounds, q, sigma, delta, eps, order))
    return rows


def budget_table_csv(rows: list[tuple[int, float, float, float, float, float]]) -> str:
    lines = ["T,q,sigma,delta,epsilon,best_order"]
    for rounds, q, sigma, delta, eps, order in rows:
        lines.append(
            f"{rounds},{float(q)!r},{float(sigma)!r},{float(delta)!r},"
            f"{float(eps)!r},{float(order)!r}"
        )
    return "\n".join(lines) + "\n"
