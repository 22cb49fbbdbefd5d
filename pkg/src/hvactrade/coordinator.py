"""Negotiation coordinator.

Runs the synchronous consensus loop: collect every user's trade
proposal, close the pairwise consensus values in closed form, step the
dual variables, measure disagreement, and broadcast each user's rows
back until the disagreement falls under tolerance.  Final trades are
the antisymmetric consensus values, so matched pairs net to zero by
construction.
"""

from __future__ import annotations

import multiprocessing
import threading
from dataclasses import dataclass, field

import numpy as np

from .agent import LocalAgent, solve_emp
from .errors import (HvacTradeError, NonConvergenceError, ProtocolViolation,
                     SynchronizationTimeout)
from .model import operating_cost, trading_payment
from .protocol import (CoordinatorBroadcast, InProcTransport, SocketChannel,
                       SocketTransport, barrier_collect, run_agent_loop)
from .reports import ScenarioReport, UserResult


@dataclass(frozen=True)
class AdmmConfig:
    """Knobs of the negotiation loop."""

    rho_mode: str = "decaying"
    rho0: float = 1.0
    tolerance: float = 1e-6
    norm: str = "l1"
    max_iter: int = 2000
    barrier_timeout: float = 60.0
    solver_tol: float = 1e-8

    def __post_init__(self):
        if self.rho_mode not in ("fixed", "decaying"):
            raise ValueError(f"unknown rho_mode {self.rho_mode!r}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def stepsize(k: int, config: AdmmConfig) -> float:
    """Penalty weight for round k (counting from 1)."""
    if k < 1:
        raise ValueError("rounds count from 1")
    if config.rho_mode == "fixed":
        return config.rho0
    return config.rho0 / k


@dataclass
class CoordinatorState:
    """Coordinator-side consensus state across rounds."""

    ids: tuple[int, ...]
    aux_trades: np.ndarray
    duals: np.ndarray
    rho: float = 1.0
    iteration: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def initial(cls, ids, horizon: int) -> "CoordinatorState":
        ids = tuple(sorted(int(u) for u in ids))
        n = len(ids)
        return cls(ids=ids, aux_trades=np.zeros((n, n, horizon)),
                   duals=np.zeros((n, n, horizon)))

    @property
    def index(self) -> dict[int, int]:
        return {u: i for i, u in enumerate(self.ids)}


def _proposal_tensor(proposals, state: CoordinatorState) -> np.ndarray:
    """Stack proposals into an N x N x H tensor, checking completeness."""
    n = len(state.ids)
    h = state.aux_trades.shape[2]
    index = state.index
    p = np.zeros((n, n, h))
    seen = set()
    for msg in proposals:
        if msg.user_id not in index:
            raise ProtocolViolation(f"proposal from unknown user {msg.user_id}")
        if msg.user_id in seen:
            raise ProtocolViolation(f"duplicate proposal from user {msg.user_id}")
        seen.add(msg.user_id)
        expected = set(state.ids) - {msg.user_id}
        if set(msg.trades) != expected:
            raise ProtocolViolation(
                f"user {msg.user_id}: proposal covers counterparties "
                f"{sorted(msg.trades)}, expected {sorted(expected)}")
        for j, vec in msg.trades.items():
            if vec.shape[0] != h:
                raise ProtocolViolation(
                    f"user {msg.user_id}: trade row for {j} has "
                    f"{vec.shape[0]} slots, expected {h}")
            p[index[msg.user_id], index[j]] = vec
    if len(seen) != n:
        missing = tuple(u for u in state.ids if u not in seen)
        raise SynchronizationTimeout(
            f"missing proposals from users {list(missing)}", missing=missing)
    return p


def hlp_update(proposals, state: CoordinatorState) -> np.ndarray:
    """Closed-form consensus update.

    For each ordered pair the new value averages the two endpoints'
    positions, shifted by their dual gap, and is antisymmetric by
    construction; the diagonal stays zero.
    """
    p = _proposal_tensor(proposals, state)
    rho = state.rho
    pt = np.swapaxes(p, 0, 1)
    lt = np.swapaxes(state.duals, 0, 1)
    aux = (rho * (p - pt) - (state.duals - lt)) / (2.0 * rho)
    n = len(state.ids)
    aux[np.arange(n), np.arange(n), :] = 0.0
    state.aux_trades = aux
    return aux


def dual_update(state: CoordinatorState, proposals) -> np.ndarray:
    """Dual ascent on the agreement gap, after the consensus update."""
    p = _proposal_tensor(proposals, state)
    state.duals = state.duals + state.rho * (state.aux_trades - p)
    return state.duals


def convergence_error(state: CoordinatorState, proposals,
                      norm: str = "l1") -> float:
    """Total disagreement between consensus values and proposals,
    summed per user so each pair counts from both endpoints."""
    p = _proposal_tensor(proposals, state)
    r = state.aux_trades - p
    if norm == "l1":
        return float(np.abs(r).sum())
    if norm == "l2":
        return float(sum(np.linalg.norm(r[i].ravel())
                         for i in range(len(state.ids))))
    raise ValueError(f"unknown norm {norm!r}")


def _row_dicts(state: CoordinatorState, uid: int):
    idx = state.index
    i = idx[uid]
    aux_row = {j: state.aux_trades[i, idx[j]].copy()
               for j in state.ids if j != uid}
    dual_row = {j: state.duals[i, idx[j]].copy()
                for j in state.ids if j != uid}
    return aux_row, dual_row


def agent_worker_main(scenario_path: str, user_id: int, host: str, port: int,
                      rho1: float, solver_tol: float):
    """Entry point of one agent process in socket mode.

    Loads its own parameters from the scenario file, so private data
    never passes through the coordinator process.
    """
    from .scenario import load_scenario

    scenario = load_scenario(scenario_path)
    params = {u.id: u for u in scenario.users}[int(user_id)]
    partners = tuple(u.id for u in scenario.users if u.id != int(user_id))
    agent = LocalAgent(params, scenario.tariff, scenario.grid,
                       partner_ids=partners, solver_tol=solver_tol)
    channel = SocketChannel(host, port)
    try:
        run_agent_loop(agent, channel, rho1)
    finally:
        channel.close()


def _reconstruct_schedules(scenario, cfg: AdmmConfig, state: CoordinatorState,
                           prev_aux, prev_duals, rho_k: float):
    """Re-solve every user's final-round subproblem from a cold start.

    Uses exactly the coupling values each agent held in the last round,
    so the result is deterministic and transport-independent."""
    idx = state.index
    schedules = {}
    for u in scenario.users:
        i = idx[u.id]
        partners = tuple(j for j in state.ids if j != u.id)
        agent = LocalAgent(u, scenario.tariff, scenario.grid,
                           partner_ids=partners, solver_tol=cfg.solver_tol)
        cols = [idx[j] for j in partners]
        agent.set_coupling(prev_aux[i, cols], prev_duals[i, cols], rho_k)
        schedules[u.id] = agent.solve_llp()
    return schedules


def _assemble_report(scenario, cfg: AdmmConfig, state: CoordinatorState,
                     emp_costs, schedules, converged: bool) -> ScenarioReport:
    sh = scenario.grid.slot_hours
    idx = state.index
    users = []
    for u in scenario.users:
        i = idx[u.id]
        partners = tuple(j for j in state.ids if j != u.id)
        cols = [idx[j] for j in partners]
        trades = state.aux_trades[i, cols].copy()
        payment = trading_payment(trades, scenario.tariff, sh)
        coop = operating_cost(schedules[u.id], u, scenario.tariff, sh) + payment
        base = emp_costs[u.id]
        reduction = 0.0 if abs(base) < 1e-12 else 100.0 * (base - coop) / base
        net = trades.sum(axis=0)
        arb = tuple(int(t) for t in range(scenario.grid.horizon_len)
                    if schedules[u.id].grid_draw[t] > 1e-6 and net[t] < -1e-6
                    and scenario.tariff.trade_price[t] > scenario.tariff.energy_price)
        users.append(UserResult(
            user_id=u.id, baseline_cost=base, cooperative_cost=coop,
            reduction_pct=reduction, payment=payment,
            schedule=schedules[u.id], trades=trades, partner_ids=partners,
            arbitrage_slots=arb))
    system_base = sum(r.baseline_cost for r in users)
    system_cost = sum(r.cooperative_cost for r in users)
    system_red = (0.0 if abs(system_base) < 1e-12
                  else 100.0 * (system_base - system_cost) / system_base)
    return ScenarioReport(
        scenario_name=scenario.name, n_users=len(state.ids),
        horizon=scenario.grid.horizon_len, slot_hours=sh,
        rho_mode=cfg.rho_mode, rho0=cfg.rho0, tolerance=cfg.tolerance,
        norm=cfg.norm, max_iter=cfg.max_iter,
        converged=converged, iterations=state.iteration,
        final_error=state.history[-1][1] if state.history else 0.0,
        history=list(state.history), users=users,
        system_baseline=system_base, system_cost=system_cost,
        system_reduction_pct=system_red,
        payment_total=sum(r.payment for r in users))


def run(scenario, config: AdmmConfig | None = None,
        transport: str = "inproc", host: str = "127.0.0.1",
        port: int = 0) -> ScenarioReport:
    """Run the full negotiation for a scenario and assemble the report.

    `transport` selects in-process threads ("inproc") or one spawned
    process per user over TCP ("socket"); both produce byte-identical
    reports.  Raises NonConvergence (with the partial history attached)
    if the disagreement never falls under tolerance.
    """
    cfg = config if config is not None else scenario.admm
    users = sorted(scenario.users, key=lambda u: u.id)
    ids = tuple(u.id for u in users)
    n = len(ids)
    horizon = scenario.grid.horizon_len

    emp_costs = {}
    for u in users:
        _, cost = solve_emp(u, scenario.tariff, scenario.grid)
        emp_costs[u.id] = cost

    rho1 = stepsize(1, cfg)
    state = CoordinatorState.initial(ids, horizon)
    prev_aux = state.aux_trades.copy()
    prev_duals = state.duals.copy()
    final_rho = rho1
    converged = False

    agent_errors: dict[int, BaseException] = {}
    threads: list[threading.Thread] = []
    procs: list = []

    if transport == "inproc":
        channel_of = {}
        tr = InProcTransport(ids)
        for u in users:
            partners = tuple(j for j in ids if j != u.id)
            agent = LocalAgent(u, scenario.tariff, scenario.grid,
                               partner_ids=partners, solver_tol=cfg.solver_tol)
            channel_of[u.id] = tr.channel(u.id)

            def agent_main(a=agent, ch=channel_of[u.id]):
                try:
                    run_agent_loop(a, ch, rho1)
                except BaseException as exc:
                    agent_errors[a.user_id] = exc

            threads.append(threading.Thread(target=agent_main, daemon=True,
                                            name=f"agent-{u.id}"))
        for t in threads:
            t.start()
    elif transport == "socket":
        if not getattr(scenario, "path", None):
            raise ValueError("socket transport needs a scenario loaded from a file")
        tr = SocketTransport(ids, host=host, port=port)
        ctx = multiprocessing.get_context("spawn")
        for u in users:
            procs.append(ctx.Process(
                target=agent_worker_main,
                args=(str(scenario.path), u.id, tr.host, tr.port,
                      rho1, cfg.solver_tol),
                daemon=True, name=f"agent-{u.id}"))
        for pr in procs:
            pr.start()
    else:
        raise ValueError(f"unknown transport {transport!r}")

    ok = False
    try:
        for k in range(1, cfg.max_iter + 1):
            rho_k = stepsize(k, cfg)
            prev_aux = state.aux_trades.copy()
            prev_duals = state.duals.copy()
            final_rho = rho_k
            proposals = barrier_collect(tr, n, k, cfg.barrier_timeout)
            state.iteration = k
            state.rho = rho_k
            hlp_update(proposals, state)
            dual_update(state, proposals)
            err = convergence_error(state, proposals, cfg.norm)
            state.history.append((k, err, rho_k))
            done = err <= cfg.tolerance or k == cfg.max_iter
            rho_next = stepsize(k + 1, cfg)
            for uid in ids:
                aux_row, dual_row = _row_dicts(state, uid)
                tr.send_to(uid, CoordinatorBroadcast(
                    iteration=k, aux_row=aux_row, dual_row=dual_row,
                    rho=rho_next, done=done))
            if err <= cfg.tolerance:
                converged = True
                break
        ok = True
    except HvacTradeError:
        _collect_agents(threads, procs, agent_errors, timeout=2.0)
        if agent_errors:
            uid, exc = sorted(agent_errors.items())[0]
            raise HvacTradeError(f"agent for user {uid} failed: {exc}") from exc
        raise
    finally:
        _collect_agents(threads, procs, agent_errors,
                        timeout=30.0 if ok else 2.0)
        tr.close()

    if agent_errors:
        uid, exc = sorted(agent_errors.items())[0]
        raise HvacTradeError(f"agent for user {uid} failed: {exc}") from exc

    if not converged:
        raise NonConvergenceError(
            f"no agreement within {cfg.max_iter} rounds "
            f"(final disagreement {state.history[-1][1]:.3e}, "
            f"tolerance {cfg.tolerance:.3e})", history=list(state.history))

    schedules = _reconstruct_schedules(scenario, cfg, state, prev_aux,
                                       prev_duals, final_rho)
    report = _assemble_report(scenario, cfg, state, emp_costs, schedules,
                              converged)
    report.wire_frames = list(tr.wire_frames)
    return report


def _collect_agents(threads, procs, agent_errors, timeout: float):
    for t in threads:
        t.join(timeout=timeout)
    for pr in procs:
        pr.join(timeout=timeout)
        if pr.is_alive():
            pr.terminate()
            pr.join(timeout=5.0)
        elif pr.exitcode not in (0, None):
            uid = int(pr.name.split("-")[1])
            agent_errors.setdefault(
                uid, RuntimeError(f"agent process exited with {pr.exitcode}"))
