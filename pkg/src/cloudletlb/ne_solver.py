"""Centralized pure-strategy Nash equilibrium computation.

The equilibrium is certified through a merit function built from the KKT
system of the per-class offloading game: complementary-slackness terms,
squared first-order stationarity residuals, squared feasibility violations,
and a quadratic coupling between the sender-side fractions and their
receiver-side mirror.  The merit is zero exactly at an equilibrium with
matching multipliers, so the solver runs a projected gradient descent with
the multipliers refit in closed form each iteration, starting from a
latency-inversion warm start.

Case handling follows the load classification.  When every cloudlet is
under-loaded (or every one over-loaded) for a class, the identity strategy
is returned immediately.  Offload flows into over-loaded receivers are
pinned to zero; such receivers accept nothing, so those coordinates carry
no first-order condition.

Receiver acceptance is modeled as one load cap per under-loaded receiver:
its post-offload load may not exceed the level at which the worst
transmission path into it reaches the QoS target.  Each sender carries its
own multiplier for that shared cap (the generalized-equilibrium reading),
which is what lets the merit vanish at saturated receivers even when the
senders' marginal economics differ.

Everything is normalized before entering the merit: utilities by the
largest price factor, own-latency slacks by the class QoS target, receiver
load caps by the slice capacity, link fluxes by the link bandwidth.  The
convergence tolerance (default 1e-4) applies to the normalized merit.
"""

from dataclasses import dataclass

import numpy as np

from . import game
from .game import LoadState, OffloadMatrix, classify_load
from .queueing import latency_sentinel_vec

FEAS_WEIGHT = 10.0
COUPLE_WEIGHT = 1.0
ACT_SLACK = 1e-2  # normalized window in which a constraint counts as active
ACT_FLUX = 1e-2


@dataclass(frozen=True)
class CaseSplit:
    label: str  # all_under / all_over / mixed
    under: tuple
    over: tuple


@dataclass(frozen=True)
class Multipliers:
    """Nonnegative multipliers of the per-class KKT system.

    For an under-loaded receiver i, xi[m, i, k] is sender k's multiplier on
    i's acceptance cap; for an over-loaded i the row sum acts as the
    multiplier of its own-latency condition.
    """

    alpha: np.ndarray  # (M, N, N) lower-bound multipliers
    beta: np.ndarray  # (M, N, N) upper-bound multipliers
    xi: np.ndarray  # (M, N, N) latency/acceptance multipliers
    eta: np.ndarray  # (N, N) bandwidth multipliers

    def __post_init__(self):
        for name in ("alpha", "beta", "xi", "eta"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} multipliers must be >= 0")

    @classmethod
    def zeros(cls, n, m):
        return cls(
            alpha=np.zeros((m, n, n)),
            beta=np.zeros((m, n, n)),
            xi=np.zeros((m, n, n)),
            eta=np.zeros((n, n)),
        )


@dataclass(frozen=True)
class NESolution:
    strategy: OffloadMatrix
    multipliers: Multipliers
    kkt_residual: float
    utilities: np.ndarray
    latencies: np.ndarray  # (N, M) own end-to-end latency at the equilibrium
    iterations: int
    converged: bool


def dispatch_case(ctx):
    """Classify every (class, cloudlet) by its own pre-offload arrival rate."""
    out = []
    for m in range(ctx.n_classes):
        under, over = [], []
        for i in range(ctx.n_cloudlets):
            state = classify_load(ctx, i, m, ctx.arrivals.rates[i, m])
            (under if state is LoadState.UNDER_LOADED else over).append(i)
        if not over:
            label = "all_under"
        elif not under:
            label = "all_over"
        else:
            label = "mixed"
        out.append(CaseSplit(label=label, under=tuple(under), over=tuple(over)))
    return out


def load_at_latency(servers, service_rate, target):
    """Largest stable load whose M/M/c sojourn stays at or under `target`."""
    if target <= 1.0 / service_rate:
        return 0.0
    cap = servers * service_rate
    hi = cap * (1.0 - 1e-9)
    f = lambda x: float(latency_sentinel_vec(servers, service_rate, np.array([x]))[0])
    if f(hi) <= target:
        return hi
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


def acceptance_cap(ctx, j, m):
    """Post-offload load cap of receiver j for class m: the level at which
    the worst transmission path into j reaches the QoS target (never below
    j's own arrivals, so a zero-inflow point is always feasible)."""
    worst = 0.0
    for k in range(ctx.n_cloudlets):
        if k == j:
            continue
        path = max(ctx.user_latency[j, m], ctx.user_latency[k, m]) + ctx.topology.inter_latency[k, j]
        worst = max(worst, path)
    limit = load_at_latency(
        ctx.slice_servers[j, m], ctx.service_rates[m], ctx.qos_latency[m] - worst
    )
    return max(limit, ctx.arrivals.rates[j, m])


class _Problem:
    """Pre-baked arrays for the merit function of one context."""

    def __init__(self, ctx, cases=None):
        self.ctx = ctx
        self.n = ctx.n_cloudlets
        self.m = ctx.n_classes
        self.cases = cases or dispatch_case(ctx)
        self.lam = ctx.arrivals.rates
        self.cap = ctx.capacity
        self.servers = ctx.slice_servers
        self.mu = ctx.service_rates
        self.t_u = ctx.user_latency
        self.t_ij = ctx.topology.inter_latency
        self.dq = ctx.qos_latency
        self.bw = ctx.topology.bandwidth
        self.bits = ctx.bits_per_job
        self.gamma = ctx.topology.provider_flag
        self.price_norm = max(game.price_normalizer(ctx, i) for i in range(self.n))
        self.q2 = ctx.prices.offload * self.gamma[:, :, None] / self.price_norm
        self.q3 = ctx.prices.latency_penalty / self.price_norm
        self.off_mask = ~np.eye(self.n, dtype=bool)
        self.under = np.zeros((self.m, self.n), dtype=bool)
        for m, case in enumerate(self.cases):
            self.under[m, list(case.under)] = True
        self.mixed = [m for m, c in enumerate(self.cases) if c.label == "mixed"]
        # free[m, i, j]: sender-side coordinates carrying a stationarity row;
        # flows into over-loaded receivers are pinned at zero instead.
        self.free = np.zeros((self.m, self.n, self.n), dtype=bool)
        self.accept_cap = np.zeros((self.m, self.n))
        for m in self.mixed:
            self.free[m] = self.off_mask & self.under[m][None, :]
            for j in range(self.n):
                self.accept_cap[m, j] = (
                    acceptance_cap(ctx, j, m) if self.under[m, j] else self.lam[j, m]
                )
        self.fd_step = np.maximum(1e-7 * self.cap, 1e-9)

    def latency_derivs(self, m, agg):
        """T, T', T'' of every cloudlet's class-m slice at loads `agg`."""
        h = self.fd_step[:, m]
        t0 = latency_sentinel_vec(self.servers[:, m], self.mu[m], agg)
        tp = latency_sentinel_vec(self.servers[:, m], self.mu[m], agg + h)
        tm = latency_sentinel_vec(self.servers[:, m], self.mu[m], np.maximum(agg - h, 0.0))
        d1 = (tp - tm) / (2 * h)
        d2 = (tp - 2 * t0 + tm) / (h * h)
        return t0, np.maximum(d1, 0.0), d2

    def class_state(self, m, P, S):
        lam_m = self.lam[:, m]
        retained = 1.0 - P.sum(axis=1)
        agg = retained * lam_m + S.T @ lam_m
        T, T1, T2 = self.latency_derivs(m, agg)
        so = self.t_u[:, m] + T - self.dq[m]
        room_hat = (agg - self.accept_cap[m]) / self.cap[:, m]  # feasible when <= 0
        return lam_m, agg, T, T1, T2, so, room_hat


def _stationarity(prob, m, state, mult):
    """G[i, j]: gradient of sender i's Lagrangian in its class-m row."""
    lam_m, agg, T, T1, T2, so, room_hat = state
    under = prob.under[m]
    over = ~under
    dq_m = prob.dq[m]
    xi = mult.xi[m]
    xo = xi.sum(axis=1)
    G = -prob.q2[:, :, m] * (lam_m[:, None] / prob.cap[:, m][None, :])
    over_gain = prob.q3[:, m] * lam_m / prob.cap[:, m] * (so + T1 * agg)
    G += np.where(over, over_gain, 0.0)[:, None]
    # over-loaded sender's own-latency multiplier (so >= 0 branch constraint)
    G += np.where(over, -xo * (T1 * lam_m / dq_m), 0.0)[:, None]
    # under-loaded receiver: own shedding relieves its acceptance cap
    G += np.where(under, xo * lam_m / prob.cap[:, m], 0.0)[:, None]
    # sender-side multiplier on receiver j's acceptance cap
    G += np.where(
        under[None, :], -xi.T * (lam_m[:, None] / prob.cap[:, m][None, :]), 0.0
    )
    G += -mult.eta * (prob.bits[m] * lam_m[:, None] / prob.bw)
    G += mult.alpha[m] - mult.beta[m]
    return G


def _merit(prob, phi_off, psi_off, mult, want_grad=False):
    """Normalized KKT merit and, optionally, its gradient in (Phi, Psi)."""
    n = prob.n
    total = 0.0
    g_phi = np.zeros_like(phi_off) if want_grad else None
    g_psi = np.zeros_like(psi_off) if want_grad else None

    for m in prob.mixed:
        free = prob.free[m]
        P = phi_off[m] * prob.off_mask
        S = psi_off[m] * prob.off_mask
        state = prob.class_state(m, P, S)
        lam_m, agg, T, T1, T2, so, room_hat = state
        under = prob.under[m]
        over = ~under
        dq_m = prob.dq[m]
        so_hat = so / dq_m
        xi = mult.xi[m]
        xo = xi.sum(axis=1)

        G = _stationarity(prob, m, state, mult)
        at_lo = P <= 1e-9
        at_hi = P >= 1.0 - 1e-9
        rs = np.where(at_lo, np.maximum(G, 0.0), np.where(at_hi, np.minimum(G, 0.0), G))
        rs = np.where(free, rs, 0.0)
        total += float((rs**2).sum())

        # complementary slackness
        total += float((mult.alpha[m] * P + mult.beta[m] * (1.0 - P))[free].sum())
        csc_slack = np.where(under, np.abs(room_hat), np.abs(so_hat))
        total += float((xo * csc_slack).sum())

        # feasibility
        viol_room = np.where(under, np.maximum(room_hat, 0.0), 0.0)
        viol_own_u = np.where(under, np.maximum(so_hat, 0.0), 0.0)
        viol_own_o = np.where(over, np.maximum(-so_hat, 0.0), 0.0)
        total += FEAS_WEIGHT * float(
            (viol_room**2).sum() + (viol_own_u**2).sum() + (viol_own_o**2).sum()
        )

        # Phi = Psi coupling
        diff = np.where(prob.off_mask, P - S, 0.0)
        total += COUPLE_WEIGHT * float((diff**2).sum())

        if want_grad:
            act = np.where(free & (rs != 0.0), rs, 0.0)
            dG_dagg = np.where(
                over,
                prob.q3[:, m] * lam_m / prob.cap[:, m] * (2 * T1 + T2 * agg)
                - xo * (T2 * lam_m / dq_m),
                0.0,
            )
            row_act = act.sum(axis=1)
            gP = (2.0 * row_act * dG_dagg * (-lam_m))[:, None] * prob.off_mask
            gS = (2.0 * row_act * dG_dagg)[None, :] * lam_m[:, None] * prob.off_mask
            # CSC and feasibility react through agg
            csc_dagg = np.where(
                under,
                xo * np.sign(room_hat) / prob.cap[:, m],
                xo * np.sign(so_hat) * (T1 / dq_m),
            )
            feas_dagg = (
                2.0
                * FEAS_WEIGHT
                * (
                    np.where(under, viol_room / prob.cap[:, m], 0.0)
                    + np.where(under, viol_own_u * (T1 / dq_m), 0.0)
                    - np.where(over, viol_own_o * (T1 / dq_m), 0.0)
                )
            )
            slope = csc_dagg + feas_dagg
            gP += (slope * (-lam_m))[:, None] * prob.off_mask
            gS += slope[None, :] * lam_m[:, None] * prob.off_mask
            gP += 2.0 * COUPLE_WEIGHT * diff
            gS -= 2.0 * COUPLE_WEIGHT * diff
            g_phi[m] = gP
            g_psi[m] = gS

    # bandwidth terms couple the classes
    flux = np.zeros((n, n))
    for m in prob.mixed:
        flux += prob.bits[m] * (phi_off[m] * prob.off_mask) * prob.lam[:, None, m]
    fhat = np.where(prob.off_mask, (prob.bw - flux) / prob.bw, 1.0)
    total += float((mult.eta * np.abs(fhat))[prob.off_mask].sum())
    over_bw = np.where(prob.off_mask, np.maximum(-fhat, 0.0), 0.0)
    total += FEAS_WEIGHT * float((over_bw**2).sum())
    if want_grad:
        for m in prob.mixed:
            coeff = (prob.bits[m] * prob.lam[:, None, m] / prob.bw) * prob.off_mask
            g_phi[m] += -mult.eta * np.sign(fhat) * coeff
            g_phi[m] += 2.0 * FEAS_WEIGHT * over_bw * coeff
        return total, g_phi, g_psi
    return total


def _refit_multipliers(prob, phi_off, psi_off):
    """Closed-form complementarity-respecting multiplier estimates."""
    n, m_count = prob.n, prob.m
    alpha = np.zeros((m_count, n, n))
    beta = np.zeros((m_count, n, n))
    xi = np.zeros((m_count, n, n))
    eta = np.zeros((n, n))
    cache = {}

    for m in prob.mixed:
        P = phi_off[m] * prob.off_mask
        S = psi_off[m] * prob.off_mask
        state = prob.class_state(m, P, S)
        lam_m, agg, T, T1, T2, so, room_hat = state
        under = prob.under[m]
        over = ~under
        dq_m = prob.dq[m]
        base = -prob.q2[:, :, m] * (lam_m[:, None] / prob.cap[:, m][None, :])
        base += np.where(
            over, prob.q3[:, m] * lam_m / prob.cap[:, m] * (so + T1 * agg), 0.0
        )[:, None]
        cache[m] = (state, base, P)

        # acceptance-cap multipliers: sender k's leftover gradient at a
        # saturated receiver i, only where the flow is actually interior
        for i in range(n):
            if not under[i] or abs(room_hat[i]) > ACT_SLACK:
                continue
            for k in range(n):
                if k == i or not prob.free[m, k, i] or P[k, i] <= 1e-9:
                    continue
                coeff = lam_m[k] / prob.cap[i, m]
                xi[m, i, k] = max(0.0, base[k, i] / coeff)

        # own-latency multipliers of over-loaded senders at their QoS point
        for i in range(n):
            if not over[i] or abs(so[i]) / dq_m > ACT_SLACK:
                continue
            rows = [j for j in range(n) if prob.free[m, i, j] and P[i, j] > 1e-9]
            coeff = T1[i] * lam_m[i] / dq_m
            if not rows or coeff <= 0:
                continue
            resid = [
                base[i, j]
                - (xi[m, j, i] * lam_m[i] / prob.cap[j, m] if prob.under[m][j] else 0.0)
                for j in rows
            ]
            val = max(0.0, float(np.mean(resid)) / coeff)
            for j in range(n):
                if j != i:
                    xi[m, i, j] = val / (n - 1)

    # bandwidth multipliers couple the classes on a link
    flux = np.zeros((n, n))
    for m in prob.mixed:
        flux += prob.bits[m] * (phi_off[m] * prob.off_mask) * prob.lam[:, None, m]
    fhat = np.where(prob.off_mask, (prob.bw - flux) / prob.bw, 1.0)
    for i in range(n):
        for j in range(n):
            if i == j or abs(fhat[i, j]) > ACT_FLUX:
                continue
            num = den = 0.0
            for m in prob.mixed:
                if not prob.free[m, i, j]:
                    continue
                state, base, P = cache[m]
                lam_m, agg, T, T1, T2, so, room_hat = state
                g = base[i, j]
                if not prob.under[m][i]:
                    g -= xi[m].sum(axis=1)[i] * T1[i] * lam_m[i] / prob.dq[m]
                if prob.under[m][j]:
                    g -= xi[m, j, i] * lam_m[i] / prob.cap[j, m]
                c = prob.bits[m] * lam_m[i] / prob.bw[i, j]
                num += g * c
                den += c * c
            if den > 0:
                eta[i, j] = max(0.0, num / den)

    # bound multipliers absorb whatever is left on active bounds
    mult = Multipliers(alpha=alpha, beta=beta, xi=xi, eta=eta)
    for m in prob.mixed:
        state, base, P = cache[m]
        G = _stationarity(prob, m, state, mult)
        lo = (P <= 1e-9) & prob.free[m]
        hi = (P >= 1.0 - 1e-9) & prob.free[m]
        alpha[m][lo] = np.maximum(0.0, -G[lo])
        beta[m][hi] = np.maximum(0.0, G[hi])
    return Multipliers(alpha=alpha, beta=beta, xi=xi, eta=eta)


def _project_rows(prob, phi_off):
    """Project each sender row onto {p >= 0, sum <= 1}; pinned coords at 0."""
    out = np.zeros_like(phi_off)
    for m in prob.mixed:
        for i in range(prob.n):
            row = np.where(prob.free[m, i], phi_off[m, i], 0.0)
            row = np.clip(row, 0.0, 1.0)
            if row.sum() > 1.0:
                row = _simplex_project(row, prob.free[m, i])
            out[m, i] = row
    return out


def _simplex_project(row, mask):
    v = row[mask]
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(u) + 1)
    rho = idx[u - (css - 1.0) / idx > 0][-1]
    theta = (css[rho - 1] - 1.0) / rho
    out = np.zeros_like(row)
    out[mask] = np.maximum(v - theta, 0.0)
    return out


def kkt_residual(ctx, phi, psi, multipliers, cases=None):
    """Normalized KKT merit at the given point; zero exactly at an NE with
    matching multipliers.  `psi=None` evaluates on the Phi=Psi manifold."""
    prob = _Problem(ctx, cases)
    phi_off = np.where(prob.off_mask[None, :, :], np.asarray(phi, dtype=float), 0.0)
    if psi is None:
        psi_off = phi_off.copy()
    else:
        psi_off = np.where(prob.off_mask[None, :, :], np.asarray(psi, dtype=float), 0.0)
    return float(_merit(prob, phi_off, psi_off, multipliers))


def _warm_start(prob):
    """Deterministic latency-inversion starting point for the mixed classes."""
    n = prob.n
    phi_off = np.zeros((prob.m, n, n))
    for m in prob.mixed:
        lam_m = prob.lam[:, m]
        under = prob.under[m]
        room = np.where(under, np.maximum(prob.accept_cap[m] - lam_m, 0.0), 0.0)
        need = np.zeros(n)
        for i in range(n):
            if under[i] or lam_m[i] <= 0:
                continue
            need[i] = max(0.0, lam_m[i] - _sender_target_load(prob, i, m))
        for _ in range(4):
            if need.sum() <= 1e-9:
                break
            want = np.zeros((n, n))
            for i in range(n):
                if need[i] <= 0:
                    continue
                receivers = [j for j in range(n) if prob.free[m, i, j] and room[j] > 1e-12]
                if not receivers:
                    continue
                total_room = sum(room[j] for j in receivers)
                for j in receivers:
                    want[i, j] = need[i] * min(1.0, room[j] / total_room)
            got = want.sum(axis=0)
            if got.sum() <= 1e-12:
                break
            scale = np.where(got > room, room / np.maximum(got, 1e-300), 1.0)
            sent = want * scale[None, :]
            phi_off[m] += sent / np.maximum(lam_m[:, None], 1e-300)
            need = np.maximum(need - sent.sum(axis=1), 0.0)
            room = np.maximum(room - sent.sum(axis=0), 0.0)
    return _project_rows(prob, phi_off)


def _sender_target_load(prob, i, m):
    """Retained load at which an over-loaded sender's marginal shedding gain
    equals the cheapest marginal offload price (capped at its QoS point)."""
    lam_i = prob.lam[i, m]
    ratios = [
        prob.q2[i, j, m] * prob.cap[i, m] / prob.cap[j, m]
        for j in range(prob.n)
        if prob.free[m, i, j]
    ]
    if not ratios:
        return lam_i
    rhs = min(ratios) / max(prob.q3[i, m], 1e-300)
    dq_floor = load_at_latency(
        prob.servers[i, m], prob.mu[m], prob.dq[m] - prob.t_u[i, m]
    )

    def margin(load):
        t0, t1, _ = prob.latency_derivs(m, np.full(prob.n, load))
        return prob.t_u[i, m] + t0[i] - prob.dq[m] + t1[i] * load

    lo, hi = dq_floor, lam_i
    if hi <= lo or margin(hi) <= rhs:
        return lam_i
    if margin(lo) >= rhs:
        return lo
    # margin is increasing in the retained load; find the crossing
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if margin(mid) >= rhs:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_ne(ctx, step=0.1, tolerance=1e-4, max_iters=3000, adaptive=True):
    """Projected-gradient minimization of the KKT merit.

    Uniform cases short-circuit to the identity strategy with zero
    iterations.  Mixed classes start from a latency-inversion warm start;
    the identity start is kept as a fallback attempt.  `adaptive=False`
    keeps the constant step size of the plain projection iteration.
    """
    if step <= 0 or tolerance <= 0:
        raise ValueError("step size and tolerance must be > 0")
    cases = dispatch_case(ctx)
    prob = _Problem(ctx, cases)
    n, m_count = prob.n, prob.m

    if not prob.mixed:
        phi = OffloadMatrix.identity(n, m_count).phi.copy()
        mult = Multipliers.zeros(n, m_count)
        resid = kkt_residual(ctx, phi, None, mult, cases)
        return _finish(ctx, prob, phi, mult, resid, 0, True)

    best = None
    for start in (_warm_start(prob), np.zeros((m_count, n, n))):
        state = _descend(prob, start, step, tolerance, max_iters, adaptive)
        if best is None or state[0] < best[0]:
            best = state
        if best[0] <= tolerance:
            break

    resid, phi_off, mult, iters = best
    phi = np.zeros((m_count, n, n))
    for m in range(m_count):
        off = phi_off[m] * prob.off_mask
        phi[m] = off
        np.fill_diagonal(phi[m], 1.0 - off.sum(axis=1))
    return _finish(ctx, prob, phi, mult, resid, iters, resid <= tolerance)


def _rs_all(prob, phi_off, mult):
    """Bound-aware stationarity residuals rs[m, i, j] at a point."""
    rs_all = np.zeros_like(phi_off)
    for m in prob.mixed:
        P = phi_off[m] * prob.off_mask
        state = prob.class_state(m, P, P)
        G = _stationarity(prob, m, state, mult)
        at_lo = P <= 1e-9
        at_hi = P >= 1.0 - 1e-9
        rs = np.where(at_lo, np.maximum(G, 0.0), np.where(at_hi, np.minimum(G, 0.0), G))
        rs_all[m] = np.where(prob.free[m], rs, 0.0)
    return rs_all


def _breakpoints(prob, phi_off, move):
    """Step scales at which the point + scale*move crosses a structural
    boundary: a coordinate reaching zero, or a receiver reaching its
    acceptance cap.  The merit can drop discontinuously at both kinds of
    crossing (bound multipliers and cap multipliers activate there), so the
    line search must sample them explicitly."""
    hits = []
    falling = (move < -1e-12) & (phi_off > 1e-9)
    if falling.any():
        hits.extend(np.asarray(phi_off[falling] / -move[falling]).tolist())
    for m in prob.mixed:
        lam_m = prob.lam[:, m]
        P = phi_off[m] * prob.off_mask
        agg = (1.0 - P.sum(axis=1)) * lam_m + P.T @ lam_m
        d_agg = (move[m] * prob.off_mask).T @ lam_m - (move[m] * prob.off_mask).sum(
            axis=1
        ) * lam_m
        for j in range(prob.n):
            if prob.under[m][j] and d_agg[j] > 1e-9:
                gap = prob.accept_cap[m, j] - agg[j]
                if gap > 0:
                    hits.append(gap / d_agg[j])
    hits = sorted(set(round(t, 12) for t in hits if 1e-12 < t < 1e6))
    return [t * 1.0000001 for t in hits[:10]]


def _descend(prob, phi_off, step, tolerance, max_iters, adaptive):
    """Projected descent of the merit along the Phi=Psi manifold.

    Two candidate families are tried each iteration over a geometric step
    ladder: the merit gradient, and the game's own pseudo-gradient (the
    stationarity residuals, i.e. the constant-step projection iteration).
    The pseudo-gradient moves reallocate flow between receivers, which the
    merit gradient alone cannot see once the multiplier refit has centered
    a sender's rows.  A candidate is accepted only if it lowers the merit.
    """
    phi_off = _project_rows(prob, phi_off)
    mult = _refit_multipliers(prob, phi_off, phi_off)
    resid = _merit(prob, phi_off, phi_off, mult)
    iters = 0
    cur_step = step
    ladder = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
    while resid > tolerance and iters < max_iters:
        _, g_phi, g_psi = _merit(prob, phi_off, phi_off, mult, want_grad=True)
        directions = [(-1.0, g_phi + g_psi), (1.0, _rs_all(prob, phi_off, mult))]
        best_cand = None
        for sign, direction in directions:
            dnorm = float(np.sqrt((direction**2).sum()))
            if dnorm < 1e-14:
                continue
            scales = [sign * mul * cur_step / max(dnorm, 1.0) for mul in ladder]
            scales += [sign * t for t in _breakpoints(prob, phi_off, sign * direction)]
            for scale in scales:
                cand = _project_rows(prob, phi_off + scale * direction)
                cand_mult = _refit_multipliers(prob, cand, cand)
                cand_resid = _merit(prob, cand, cand, cand_mult)
                if best_cand is None or cand_resid < best_cand[0]:
                    best_cand = (cand_resid, cand, cand_mult)
        iters += 1
        if best_cand is None:
            break
        if best_cand[0] < resid or not adaptive:
            resid, phi_off, mult = best_cand
            if adaptive:
                cur_step = min(cur_step * 1.25, 10.0 * step)
        else:
            cur_step *= 0.5
            if cur_step < 1e-12:
                break
    return resid, phi_off, mult, iters


def _finish(ctx, prob, phi, mult, resid, iters, converged):
    psi_full = phi.copy()  # the mirror holds exactly at any returned point
    agg = game.aggregate_arrival_all(ctx, phi)
    lat = ctx.user_latency + latency_sentinel_vec(
        ctx.slice_servers, ctx.service_rates[None, :], agg
    )
    return NESolution(
        strategy=OffloadMatrix(phi=phi, psi=psi_full),
        multipliers=mult,
        kkt_residual=float(resid),
        utilities=game.utility_all(ctx, phi),
        latencies=lat,
        iterations=iters,
        converged=bool(converged),
    )


# ---------------------------------------------------------------------------
# independent certification


def best_response(ctx, i, phi, grid_step=0.005):
    """Grid search over cloudlet i's feasible offload rows, one class at a
    time (class utilities separate; bandwidth reservations carry over).

    The feasible set honors receiver acceptance limits (the same load caps
    the game imposes: an under-loaded receiver takes jobs only up to the
    level where the worst path into it meets the QoS target; an over-loaded
    receiver takes none), the link bandwidth, and the row simplex.
    """
    if not (0 < grid_step <= 0.1):
        raise ValueError("grid_step must lie in (0, 0.1]")
    n, m_count = ctx.n_cloudlets, ctx.n_classes
    lam = ctx.arrivals.rates
    base_agg = game.aggregate_arrival_all(ctx, phi)
    flux_cur = np.zeros(n)  # committed bits/s on links i->j across classes
    for k in range(m_count):
        flux_cur += ctx.bits_per_job[k] * phi[k, i, :] * lam[i, k]

    out = np.array([phi[m, i, :] for m in range(m_count)])
    for m in range(m_count):
        idle = np.zeros(n)
        idle[i] = 1.0
        if lam[i, m] <= 0:
            out[m] = idle
            continue
        flux_other = flux_cur - ctx.bits_per_job[m] * out[m] * lam[i, m]
        caps = np.zeros(n)
        for j in range(n):
            if j == i:
                continue
            if classify_load(ctx, j, m, lam[j, m]) is LoadState.OVER_LOADED:
                continue
            inflow_wo_i = base_agg[j, m] - phi[m, i, j] * lam[i, m]
            room = max(0.0, acceptance_cap(ctx, j, m) - inflow_wo_i)
            bw_room = max(0.0, ctx.topology.bandwidth[i, j] - flux_other[j])
            caps[j] = min(
                1.0, room / lam[i, m], bw_room / (ctx.bits_per_job[m] * lam[i, m])
            )
        targets = [j for j in range(n) if j != i and caps[j] > 1e-12]
        if not targets:
            out[m] = idle
            flux_cur = flux_other
            continue
        grids = []
        for j in targets:
            pts = np.arange(0.0, caps[j], grid_step)
            grids.append(np.append(pts, caps[j]))
        mesh = np.meshgrid(*grids, indexing="ij")
        combos = np.stack([g.ravel() for g in mesh], axis=1)
        combos = combos[combos.sum(axis=1) <= 1.0 + 1e-12]
        out[m], _ = _best_combo(ctx, i, m, phi, targets, combos)
        flux_cur = flux_other + ctx.bits_per_job[m] * out[m] * lam[i, m]
    return out


def _best_combo(ctx, i, m, phi, targets, combos):
    """Vectorized class-m utility of cloudlet i over candidate rows."""
    n = ctx.n_cloudlets
    lam = ctx.arrivals.rates
    inflow = sum(phi[m, j, i] * lam[j, m] for j in range(n) if j != i)
    retained = 1.0 - combos.sum(axis=1)
    agg = retained * lam[i, m] + inflow
    lat = latency_sentinel_vec(ctx.slice_servers[i, m], ctx.service_rates[m], agg)
    dq = ctx.qos_latency[m]
    cap_i = ctx.capacity[i, m]
    pay = np.zeros(len(combos))
    for idx, j in enumerate(targets):
        pay += (
            ctx.prices.offload[i, j, m]
            * ctx.topology.provider_flag[i, j]
            * combos[:, idx]
            * lam[i, m]
            / ctx.capacity[j, m]
        )
    own_pen = retained * lam[i, m] / cap_i * np.maximum(
        0.0, ctx.user_latency[i, m] + lat - dq
    )
    recv_pen = np.zeros(len(combos))
    for j in range(n):
        if j == i:
            continue
        recv_pen += phi[m, j, i] * lam[j, m] / cap_i * np.maximum(
            0.0,
            ctx.user_latency[j, m] + lat + ctx.topology.inter_latency[j, i] - dq,
        )
    score = -pay - ctx.prices.latency_penalty[i, m] * (own_pen + recv_pen)
    k = int(np.argmax(score))
    row = np.zeros(n)
    for idx, j in enumerate(targets):
        row[j] = combos[k, idx]
    row[i] = 1.0 - row.sum()
    return row, float(score[k])


def verify_ne(ctx, phi, grid_step=0.005, slack=None):
    """Deviation certificate: True when no cloudlet gains more than `slack`
    (default 1e-3 * max(1, |U_i|)) by a unilateral grid best response."""
    base = game.utility_all(ctx, phi)
    worst = -np.inf
    ok = True
    for i in range(ctx.n_cloudlets):
        rows = best_response(ctx, i, phi, grid_step)
        cand = np.array(phi)
        for m in range(ctx.n_classes):
            cand[m, i, :] = rows[m]
        gain = game.utility(ctx, cand, i) - base[i]
        worst = max(worst, gain)
        allowed = slack if slack is not None else 1e-3 * max(1.0, abs(base[i]))
        if gain > allowed:
            ok = False
    return ok, float(worst)


def ne_monotonicity_check(ctx, i, m, rates, **solve_kw):
    """Total NE offload of (i, m) must be nondecreasing along rising rates."""
    totals = []
    for r in rates:
        new_rates = np.array(ctx.arrivals.rates)
        new_rates[i, m] = r
        sol = solve_ne(ctx.with_rates(rates=new_rates), **solve_kw)
        row = sol.strategy.phi[m, i, :]
        totals.append(float(row.sum() - row[i]))
    ok = all(b >= a - 1e-6 for a, b in zip(totals, totals[1:]))
    return ok, totals
