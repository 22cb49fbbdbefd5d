"""Per-user optimizers.

Each user solves two related problems over the day-ahead horizon: a
standalone schedule with no trading (`solve_emp`, the cost benchmark)
and a trading subproblem (`solve_llp`) in which pairwise trades are
pulled toward the coordinator's consensus values by a quadratic penalty
plus a linear dual term.  The only data that ever leaves an agent is
its trade matrix; `outbound_message` audits that before anything is
serialized.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import qp
from .errors import InfeasibleError, NonConvergenceError, ProtocolViolation
from .model import Schedule, Tariff, TimeGrid, UserParams


def build_user_qp(params: UserParams, tariff: Tariff, grid: TimeGrid,
                  partner_ids=(), aux=None, duals=None, rho: float = 0.0):
    """Assemble one user's scheduling QP.

    With no partners this is the standalone problem.  With partners,
    trade variables join the per-slot balance rows and the objective
    gains the trade payment, the penalty (rho/2)(p - aux)^2 and the
    dual term -dual*p.  Returns (problem, index) where index maps
    variable groups to their positions in the primal vector.
    """
    h = params.horizon
    if grid.horizon_len != h:
        raise ValueError(
            f"user {params.id}: traces cover {h} slots, grid has {grid.horizon_len}")
    if tariff.trade_price.shape[0] != h and len(partner_ids):
        raise ValueError(
            f"user {params.id}: trade_price covers {tariff.trade_price.shape[0]} "
            f"slots, expected {h}")
    sh = grid.slot_hours
    npart = len(partner_ids)

    b = qp.QpBuilder()
    p_re = b.add_vars(h, "p_re", lb=0.0, ub=params.renewable_avail)
    p_g = b.add_vars(h, "p_g", lb=0.0, ub=params.grid_cap)
    p_ac = b.add_vars(h, "p_ac", lb=0.0, ub=params.hvac_cap)
    t_in = b.add_vars(h, "t_in", lb=params.temp_min, ub=params.temp_max)
    if npart:
        trades = np.vstack([b.add_vars(h, f"p_et[{j}]") for j in partner_ids])
    else:
        trades = np.empty((0, h), dtype=int)

    # indoor temperature recursion as equality rows
    cr = params.thermal_capacitance * params.thermal_resistance
    a = 1.0 - 1.0 / cr
    k_out = 1.0 / cr
    k_ac = params.hvac_efficiency / params.thermal_capacitance
    b.add_eq([t_in[0], p_ac[0]], [1.0, k_ac],
             a * params.temp_initial + k_out * params.outdoor_temp[0])
    for t in range(1, h):
        b.add_eq([t_in[t], t_in[t - 1], p_ac[t]], [1.0, -a, k_ac],
                 k_out * params.outdoor_temp[t])

    # per-slot supply/demand balance
    for t in range(h):
        idx = [p_re[t], p_g[t], p_ac[t]] + list(trades[:, t])
        coefs = [1.0, 1.0, -1.0] + [1.0] * npart
        b.add_eq(idx, coefs, params.inflexible_load[t])

    b.add_linear(p_g, tariff.energy_price * sh)
    peak = None
    if tariff.peak_price > 0.0:
        peak = qp.epigraph_max(b, p_g)
        b.add_linear([peak], [tariff.peak_price])
    if params.comfort_weight > 0.0:
        for t in range(h):
            b.add_square(t_in[t], params.comfort_weight, center=params.temp_ref)
    if npart:
        for t in range(h):
            b.add_linear(trades[:, t], tariff.trade_price[t] * sh)
        if rho > 0.0:
            centers = np.zeros((npart, h)) if aux is None else np.asarray(aux, dtype=float)
            for r in range(npart):
                for t in range(h):
                    b.add_square(trades[r, t], 0.5 * rho, center=centers[r, t])
        if duals is not None:
            lam = np.asarray(duals, dtype=float)
            for r in range(npart):
                b.add_linear(trades[r], -lam[r])

    index = {"renewable": p_re, "grid": p_g, "hvac": p_ac, "temp": t_in,
             "trades": trades, "peak": peak}
    return b.build(), index


def _extract_schedule(solution: qp.QpSolution, index, partner_ids) -> Schedule:
    x = solution.primal
    return Schedule(renewable_use=x[index["renewable"]],
                    grid_draw=x[index["grid"]],
                    hvac_power=x[index["hvac"]],
                    indoor_temp=x[index["temp"]],
                    trades=x[index["trades"]] if len(partner_ids)
                    else np.empty((0, x[index["grid"]].shape[0])),
                    partner_ids=partner_ids)


def _check_status(solution: qp.QpSolution, uid: int, what: str):
    if solution.status is qp.QpStatus.INFEASIBLE:
        raise InfeasibleError(
            f"user {uid}: {what} has no feasible schedule "
            f"(comfort band unreachable under the grid and renewable limits)")
    if solution.status is not qp.QpStatus.OPTIMAL:
        raise NonConvergenceError(
            f"user {uid}: {what} solve stopped at status {solution.status.name}")


def solve_emp(params: UserParams, tariff: Tariff, grid: TimeGrid | None = None):
    """Solve the standalone scheduling problem (no trading).

    Returns (Schedule, cost); the cost is the user's benchmark against
    which trading gains are measured.
    """
    grid = grid if grid is not None else TimeGrid(params.horizon)
    problem, index = build_user_qp(params, tariff, grid)
    solution = qp.solve(problem)
    _check_status(solution, params.id, "standalone problem")
    return _extract_schedule(solution, index, ()), solution.objective


class LocalAgent:
    """One user's stateful optimizer across negotiation rounds.

    Holds the private parameters, the latest coupling values received
    from the coordinator, and a cached solver workspace so consecutive
    rounds at the same penalty weight reuse one factorization and warm
    start from the previous iterate.  Partner ids are kept in ascending
    order; trade matrices use that row order throughout.
    """

    def __init__(self, params: UserParams, tariff: Tariff,
                 grid: TimeGrid | None = None, partner_ids=(),
                 solver_tol: float = 1e-8):
        self.params = params
        self.tariff = tariff
        self.grid = grid if grid is not None else TimeGrid(params.horizon)
        self.partner_ids = tuple(sorted(int(j) for j in partner_ids))
        if params.id in self.partner_ids:
            raise ValueError(f"user {params.id}: cannot trade with itself")
        if len(set(self.partner_ids)) != len(self.partner_ids):
            raise ValueError(f"user {params.id}: duplicate partner ids")
        shape = (len(self.partner_ids), params.horizon)
        self.received_aux = np.zeros(shape)
        self.received_duals = np.zeros(shape)
        self.rho = 1.0
        self.iteration = 0
        self.last_schedule: Schedule | None = None
        self.last_objective: float | None = None
        self.solver_tol = float(solver_tol)
        self._ws: qp.Workspace | None = None
        self._ws_rho: float | None = None
        self._index = None
        self._base_linear = None
        self._base_offset = 0.0

    @property
    def user_id(self) -> int:
        return self.params.id

    def set_coupling(self, aux, duals, rho: float | None = None):
        shape = self.received_aux.shape
        aux = np.asarray(aux, dtype=np.float64)
        duals = np.asarray(duals, dtype=np.float64)
        if aux.shape != shape or duals.shape != shape:
            raise ValueError(
                f"user {self.user_id}: coupling arrays must have shape {shape}")
        self.received_aux = aux.copy()
        self.received_duals = duals.copy()
        if rho is not None:
            if rho <= 0:
                raise ValueError(f"user {self.user_id}: rho must be positive")
            self.rho = float(rho)

    def receive(self, broadcast):
        """Apply a coordinator broadcast: per-counterparty consensus and
        dual rows, plus the penalty weight for the next round."""
        aux = np.zeros_like(self.received_aux)
        duals = np.zeros_like(self.received_duals)
        for r, j in enumerate(self.partner_ids):
            if j not in broadcast.aux_row or j not in broadcast.dual_row:
                raise ProtocolViolation(
                    f"user {self.user_id}: broadcast missing counterparty {j}")
            aux[r] = np.asarray(broadcast.aux_row[j], dtype=np.float64)
            duals[r] = np.asarray(broadcast.dual_row[j], dtype=np.float64)
        self.set_coupling(aux, duals, broadcast.rho)

    def solve_llp(self, rho: float | None = None) -> Schedule:
        """Solve the trading subproblem at the given penalty weight
        (default: the last weight received) and cache the schedule."""
        if rho is None:
            rho = self.rho
        aux, duals = self.received_aux, self.received_duals
        if self._ws is not None and self._ws_rho == rho:
            # structure unchanged: refresh only the trade entries of the
            # linear term and the penalty's constant part
            c = self._base_linear.copy()
            tv = self._index["trades"]
            c[tv] = (self.tariff.trade_price * self.grid.slot_hours
                     - duals - rho * aux)
            off = self._base_offset + 0.5 * rho * float(np.sum(aux * aux))
            self._ws.update(linear_term=c, offset=off)
        else:
            problem, index = build_user_qp(
                self.params, self.tariff, self.grid, self.partner_ids,
                aux=aux, duals=duals, rho=rho)
            self._ws = qp.Workspace(problem)
            self._ws_rho = rho
            self._index = index
            self._base_linear = problem.linear_term.copy()
            self._base_linear[index["trades"]] = 0.0
            self._base_offset = (problem.offset
                                 - 0.5 * rho * float(np.sum(aux * aux)))
        solution = self._ws.solve(tol=self.solver_tol)
        _check_status(solution, self.user_id, "trading subproblem")
        schedule = _extract_schedule(solution, self._index,
                                     self.partner_ids)
        self.last_schedule = schedule
        self.last_objective = solution.objective
        return schedule

    def solve_emp(self):
        return solve_emp(self.params, self.tariff, self.grid)

    def outbound_message(self):
        return outbound_message(self)


_OUTBOUND_FIELDS = frozenset({"user_id", "iteration", "trades"})


def outbound_message(state: LocalAgent):
    """Package the current round's trades for the coordinator.

    The message is audited against a field whitelist so nothing beyond
    {user_id, iteration, trades} can be serialized.
    """
    from .protocol import TradeProposal

    if state.last_schedule is None:
        raise ProtocolViolation(
            f"user {state.user_id}: no schedule solved this round")
    trades = {int(j): state.last_schedule.trades[r].copy()
              for r, j in enumerate(state.partner_ids)}
    message = TradeProposal(user_id=state.user_id,
                            iteration=state.iteration, trades=trades)
    present = {f.name for f in dataclasses.fields(message)}
    if present != _OUTBOUND_FIELDS:
        raise ProtocolViolation(
            f"outbound schema mismatch: {sorted(present)}")
    return message
