"""Headless driver for every pipeline stage and experiment.

Each subcommand reads and writes the documented module file formats, so the
full acceptance suite can run without the console or the HTTP service. Exit
codes are stable for scripting: 0 ok, 1 engine error, 2 usage, 3
non-convergence or infeasibility. Engine errors leave a machine-readable
document on stderr.
"""

from __future__ import annotations

import functools
import json
import pathlib
import sys

import click
import numpy as np

from . import attack as atk
from . import detector as det
from . import estimation as se
from . import powerflow as pf
from . import sced
from . import service as svc
from . import simplex as sx
from .matrices import build_matrices
from .model import CaseError, GridCase, build_linknet, load_case, parse_case
from .rtca import run_rtca

EXIT_OK = 0
EXIT_ENGINE = 1
EXIT_USAGE = 2
EXIT_NOCONV = 3

NONCONV_ERRORS = (sx.Infeasible, sx.Unbounded, atk.AttackInfeasibleError,
                  se.InsufficientRedundancyError, se.BadDataUnresolvableError,
                  pf.SlackInfeasibleError)


class NotConvergedError(Exception):
    pass


def _fail(exc: Exception, code: int):
    doc = {"error": str(exc), "type": type(exc).__name__}
    click.echo(json.dumps(doc), err=True)
    sys.exit(code)


def engine_errors(fn):
    """Map engine exceptions onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NONCONV_ERRORS as exc:
            _fail(exc, EXIT_NOCONV)
        except NotConvergedError as exc:
            _fail(exc, EXIT_NOCONV)
        except (CaseError, svc.ServiceError, det.DetectorError,
                se.EstimationError, sced.ScedError, atk.AttackError,
                sx.SimplexError, OSError, json.JSONDecodeError,
                ValueError) as exc:
            _fail(exc, EXIT_ENGINE)
    return wrapper


def _resolve_case(spec: str) -> GridCase:
    p = pathlib.Path(spec)
    if p.exists():
        return load_case(p)
    bundled = pathlib.Path(__file__).parent / "cases" / f"{spec}.json"
    if bundled.exists():
        return load_case(bundled)
    raise CaseError(f"case {spec!r} is neither a file nor a bundled case")


def _emit(doc, out: str | None):
    text = json.dumps(svc.jsonable(doc), indent=1, sort_keys=True) + "\n"
    if out:
        pathlib.Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _emit_text(text: str, out: str | None):
    if out:
        pathlib.Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _solved(case: GridCase):
    idx = build_linknet(case)
    mats = build_matrices(case, idx)
    sol = pf.solve(case, mats, pf.PowerFlowOptions(), idx)
    if not sol.converged:
        raise NotConvergedError("power flow did not converge")
    return idx, mats, sol


case_opt = click.option("--case", "case_spec", required=True,
                        help="case file path or bundled case name")
seed_opt = click.option("--seed", default=0, show_default=True)
out_opt = click.option("--out", default=None,
                       help="output file (stdout when omitted)")


@click.group()
def main():
    """Desk-scale EMS emulator pipeline driver."""


# --- single stages -------------------------------------------------------------

@main.command("pf")
@case_opt
@out_opt
@engine_errors
def pf_cmd(case_spec, out):
    """Solve the AC power flow and write its report."""
    case = _resolve_case(case_spec)
    _, _, sol = _solved(case)
    _emit(sol.report(), out)


@main.command("se")
@case_opt
@seed_opt
@out_opt
@engine_errors
def se_cmd(case_spec, seed, out):
    """Generate telemetry and run state estimation with bad-data handling."""
    case = _resolve_case(case_spec)
    idx, mats, sol = _solved(case)
    z = se.generate_telemetry(sol, case, mats, noise_seed=seed)
    est, kept = se.estimate_with_bde(z, case, idx, mats)
    if not est.converged:
        raise NotConvergedError("state estimation did not converge")
    _emit({
        "converged": est.converged, "bdd_pass": est.bdd_pass,
        "objective": est.objective, "dof": est.dof,
        "eliminated": len(z.active) - len(kept.active),
        "v_mag": est.v_mag, "v_ang": est.v_ang,
    }, out)


@main.command("rtca")
@case_opt
@out_opt
@click.option("--jobs", default=1, show_default=True,
              help="parallel contingency solves")
@engine_errors
def rtca_cmd(case_spec, out, jobs):
    """Run the N-1 contingency screen."""
    case = _resolve_case(case_spec)
    idx, _, sol = _solved(case)
    report = run_rtca(case, sol, idx=idx, jobs=jobs)
    _emit(report.report(), out)


@main.command("sced")
@case_opt
@out_opt
@click.option("--loss-option", default="branch_half_half", show_default=True)
@engine_errors
def sced_cmd(case_spec, out, loss_option):
    """Run the dispatch-and-verify loop and write the plan."""
    case = _resolve_case(case_spec)
    idx, mats, sol = _solved(case)
    report = run_rtca(case, sol, idx=idx)
    opts = sced.ScedOptions(loss_option=loss_option)
    plan, realized = sced.dispatch_pipeline(case, sol, report, mats, opts, idx)
    if not realized.converged:
        raise NotConvergedError("verifying power flow did not converge")
    _emit(plan.report(), out)


# --- end-to-end ----------------------------------------------------------------

@main.command("pipeline")
@case_opt
@seed_opt
@out_opt
@click.option("--ticks", default=3, show_default=True)
@click.option("--scenario", default=None,
              help="load scenario file (history format), one row per tick")
@click.option("--attack", "attack_file", default=None,
              help="attack arming document (JSON)")
@click.option("--calibrate-days", default=0, show_default=True,
              help="calibrate the load screen from this many generated days")
@engine_errors
def pipeline_cmd(case_spec, seed, out, ticks, scenario, attack_file,
                 calibrate_days):
    """Drive a full session headlessly and write its event log."""
    case = _resolve_case(case_spec)
    session = svc.Session(case, seed=seed)
    if calibrate_days:
        session.calibrate_detector(days=calibrate_days)
    rows = None
    if scenario:
        hist = det.HistoryMatrix.from_text(pathlib.Path(scenario).read_text())
        rows = [dict(zip(hist.load_ids, r)) for r in hist.values]
        ticks = min(ticks, len(rows)) if ticks else len(rows)
    arming = None
    if attack_file:
        arming = json.loads(pathlib.Path(attack_file).read_text())
    for t in range(ticks):
        if arming is not None and t == int(arming.get("arm_at_tick", 0)):
            session.arm_attack(arming)
        session.step(loads=rows[t] if rows else None)
    _emit_text(session.event_log_text(), out)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=None, type=int)
@click.option("--config", "config_path", default=None,
              help="JSON config file (flag-compatible keys)")
@engine_errors
def serve_cmd(host, port, config_path):
    """Run the HTTP service."""
    svc.serve(host=host, port=port, config_path=config_path)


# --- attacks ---------------------------------------------------------------------

@main.group("attack")
def attack_group():
    """Design and evaluate load-redistribution attacks."""


@attack_group.command("design")
@case_opt
@seed_opt
@out_opt
@click.option("--target", required=True, type=int, help="target branch id")
@click.option("--objective", default="max_base_flow", show_default=True,
              type=click.Choice(atk.OBJECTIVES))
@click.option("--tau", default=0.10, show_default=True,
              help="per-load shift bound (fraction)")
@click.option("--budget", default=60, show_default=True,
              help="measurement budget")
@click.option("--response", default="sced", show_default=True,
              type=click.Choice(atk.RESPONSES))
@engine_errors
def attack_design_cmd(case_spec, seed, out, target, objective, tau, budget,
                      response):
    """Search for an attack vector and write it as an arming document."""
    case = _resolve_case(case_spec)
    scenario = atk.AttackScenario(
        target_branch=target, objective=objective, load_shift_limit=tau,
        measurement_budget=budget, assumed_response=response, seed=seed)
    a = atk.design_attack(case, scenario)
    u = {case.buses[i].id: v for i, v in enumerate(a.u) if v != 0.0}
    _emit({
        "kind": "state", "u_by_bus": u,
        "load_shifts": a.load_shifts,
        "max_shift_fraction": atk.max_shift_fraction(case, a),
        "scenario": {"target_branch": target, "objective": objective,
                     "load_shift_limit": tau, "measurement_budget": budget,
                     "assumed_response": response, "seed": seed},
    }, out)


@attack_group.command("evaluate")
@case_opt
@seed_opt
@out_opt
@click.option("--attack", "attack_file", required=True)
@click.option("--response", default="sced", show_default=True,
              type=click.Choice(atk.RESPONSES))
@click.option("--target", default=None, type=int)
@engine_errors
def attack_evaluate_cmd(case_spec, seed, out, attack_file, response, target):
    """Run an attack through the closed loop and report both worlds."""
    case = _resolve_case(case_spec)
    doc = json.loads(pathlib.Path(attack_file).read_text())
    idx = build_linknet(case)
    mats = build_matrices(case, idx)
    a = atk.state_attack(case, mats,
                         {int(k): float(v)
                          for k, v in doc["u_by_bus"].items()})
    if target is None:
        target = doc.get("scenario", {}).get("target_branch")
    outcome = atk.evaluate_consequence(case, a, defender_response=response,
                                       target_branch=target, noise_seed=seed)
    _emit(outcome.report(), out)


# --- detector ----------------------------------------------------------------------

@main.group("detector")
def detector_group():
    """Nearest-neighbor load screen."""


@detector_group.command("calibrate")
@case_opt
@out_opt
@click.option("--history", "history_file", required=True)
@click.option("--fa", default=0.02, show_default=True)
@click.option("--target-size", default=5, show_default=True)
@engine_errors
def detector_calibrate_cmd(case_spec, out, history_file, fa, target_size):
    """Calibrate per-group thresholds from a trusted history file."""
    case = _resolve_case(case_spec)
    hist = det.HistoryMatrix.from_text(pathlib.Path(history_file).read_text())
    grouping = det.group_loads(case, build_linknet(case), target_size)
    cal = det.calibrate(hist, grouping, fa)
    _emit({
        "fa_budget": fa,
        "groups": [list(cal.group_load_ids(j))
                   for j in range(len(cal.groups))],
        "thresholds": list(cal.thresholds),
        "floored": list(cal.floored),
    }, out)


@detector_group.command("detect")
@case_opt
@out_opt
@click.option("--history", "history_file", required=True)
@click.option("--loads", "loads_file", required=True,
              help="JSON map of load id to MW")
@click.option("--fa", default=0.02, show_default=True)
@click.option("--target-size", default=5, show_default=True)
@engine_errors
def detector_detect_cmd(case_spec, out, history_file, loads_file, fa,
                        target_size):
    """Screen one load vector against the history."""
    case = _resolve_case(case_spec)
    hist = det.HistoryMatrix.from_text(pathlib.Path(history_file).read_text())
    grouping = det.group_loads(case, build_linknet(case), target_size)
    cal = det.calibrate(hist, grouping, fa)
    doc = json.loads(pathlib.Path(loads_file).read_text())
    p = np.array([float(doc[str(lid)]) for lid in cal.load_ids])
    verdict = det.detect_and_localize(p, hist, cal)
    _emit(verdict.report(), out)


@detector_group.command("evaluate")
@case_opt
@seed_opt
@out_opt
@click.option("--history", "history_file", required=True)
@click.option("--attack", "attack_file", required=True,
              help="arming document with load_shifts")
@click.option("--magnitudes", default="0,0.5,1,2", show_default=True)
@click.option("--fa-budgets", default="0.02", show_default=True)
@click.option("--trials", default=500, show_default=True)
@click.option("--target-size", default=5, show_default=True)
@engine_errors
def detector_evaluate_cmd(case_spec, seed, out, history_file, attack_file,
                          magnitudes, fa_budgets, trials, target_size):
    """Monte Carlo detection-probability surface for a scaled attack."""
    case = _resolve_case(case_spec)
    hist = det.HistoryMatrix.from_text(pathlib.Path(history_file).read_text())
    grouping = det.group_loads(case, build_linknet(case), target_size)
    doc = json.loads(pathlib.Path(attack_file).read_text())
    shifts = {int(k): float(v) for k, v in doc["load_shifts"].items()}
    mags = tuple(float(v) for v in magnitudes.split(","))
    fas = tuple(float(v) for v in fa_budgets.split(","))
    days = max(1, (trials + 23) // 24)
    held = det.generate_history(case, days=days, seed=seed + 10007)
    ev = det.evaluate_detector(hist, grouping, shifts, mags, fas, held,
                               n_trials=trials)
    _emit({"rows": ev.to_rows()}, out)


@main.group("history")
def history_group():
    """Synthetic load histories."""


@history_group.command("generate")
@case_opt
@seed_opt
@out_opt
@click.option("--days", default=60, show_default=True)
@engine_errors
def history_generate_cmd(case_spec, seed, out, days):
    """Write an hourly attack-free load history."""
    case = _resolve_case(case_spec)
    hist = det.generate_history(case, days=days, seed=seed)
    _emit_text(hist.to_text(), out)


if __name__ == "__main__":
    main()
