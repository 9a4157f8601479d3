"""Session orchestration and the HTTP control-room interface.

A session holds two worlds: the physical truth (the case with whatever
dispatch and loads actually apply) and the cyber view the operator derives
from telemetry. Each step advances the scenario clock and runs the pipeline
in order: AC power flow on the truth, telemetry generation, optional forging
at the telemetry boundary, state estimation with bad-data handling, the
nearest-neighbor load screen, contingency analysis, and security-constrained
dispatch, whose set-points are then applied back to the truth for the next
tick. Every stage publishes an immutable artifact stamped with the tick and
chained by input hashes, and the event log is fully deterministic: identical
case, seed, and action sequence reproduce it byte for byte (timings are
reported per response but never logged).

Stage failures are recorded and halt the remainder of that tick's pipeline;
the session itself stays usable. Per-session mutation is serialized with a
lock while published artifacts are immutable and safe for concurrent reads.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import PlainTextResponse

from . import attack as atk
from . import detector as det
from . import estimation as se
from . import powerflow as pf
from . import sced
from .matrices import build_matrices
from .model import CaseError, GridCase, build_linknet, parse_case
from .rtca import RtcaReport, run_rtca

STAGES = ("pf", "telemetry", "se", "detector", "rtca", "sced")


class ServiceError(Exception):
    pass


class UnknownSessionError(ServiceError):
    pass


class UnknownArtifactError(ServiceError):
    pass


def canonical_json(doc) -> str:
    """Stable serialization used for hashing and event logs."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def chain_hash(prev: str, doc) -> str:
    return hashlib.sha256((prev + canonical_json(doc)).encode()).hexdigest()


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and exotic floats so the
    result survives strict JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not np.isfinite(v):
            return None
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# armed attacks

@dataclass(frozen=True)
class ArmedAttack:
    """Attack waiting at the telemetry boundary.

    kind 'state' carries an angle perturbation (the self-consistent forging
    that slips past the chi-square test); kind 'gross' corrupts a single
    measurement by a sigma multiple, the classic bad-data case.
    """
    kind: str
    u_by_bus: dict[int, float] = field(default_factory=dict)
    measurement_index: int = 0
    sigma_multiple: float = 20.0

    @classmethod
    def from_payload(cls, doc: dict) -> "ArmedAttack":
        kind = doc.get("kind")
        if kind == "state":
            u = doc.get("u_by_bus")
            if not isinstance(u, dict) or not u:
                raise ServiceError("state attack needs a nonempty u_by_bus map")
            return cls(kind="state",
                       u_by_bus={int(k): float(v) for k, v in u.items()})
        if kind == "gross":
            return cls(kind="gross",
                       measurement_index=int(doc.get("measurement_index", 0)),
                       sigma_multiple=float(doc.get("sigma_multiple", 20.0)))
        raise ServiceError(f"unknown attack kind {kind!r}")

    def describe(self) -> dict:
        if self.kind == "state":
            return {"kind": "state",
                    "u_by_bus": {str(k): v for k, v in self.u_by_bus.items()}}
        return {"kind": "gross", "measurement_index": self.measurement_index,
                "sigma_multiple": self.sigma_multiple}


# ---------------------------------------------------------------------------
# session

class Session:
    def __init__(self, case: GridCase, seed: int = 0,
                 sced_options: sced.ScedOptions | None = None,
                 session_id: str | None = None):
        self.id = session_id or uuid.uuid4().hex[:12]
        self.case0 = case
        self.truth = case
        self.seed = int(seed)
        self.sced_options = sced_options or sced.ScedOptions()
        self.tick = -1
        self.p_prev: dict[int, float] | None = None
        self.armed: ArmedAttack | None = None
        self.history: det.HistoryMatrix | None = None
        self.grouping: det.LoadGrouping | None = None
        self.event_log: list[dict] = []
        self.artifacts: dict[tuple[str, int], dict] = {}
        self._last_hash = "0" * 64
        self._lock = threading.Lock()

    # -- attack arming ------------------------------------------------------

    def arm_attack(self, payload: dict) -> dict:
        with self._lock:
            armed = ArmedAttack.from_payload(payload)
            self.armed = armed
            self._log_event({"event": "attack_armed",
                             "attack": armed.describe()})
            return {"armed": armed.describe(), "tick": self.tick}

    def disarm_attack(self) -> dict:
        with self._lock:
            was = self.armed
            self.armed = None
            if was is not None:
                self._log_event({"event": "attack_disarmed"})
            return {"disarmed": was is not None, "tick": self.tick}

    # -- detector -----------------------------------------------------------

    def calibrate_detector(self, days: int = 60, fa_budget: float = 0.02,
                           target_size: int = 5,
                           history_text: str | None = None) -> dict:
        with self._lock:
            if history_text is not None:
                history = det.HistoryMatrix.from_text(history_text)
            else:
                history = det.generate_history(self.case0, days=days,
                                               seed=self.seed)
            idx = build_linknet(self.case0)
            grouping = det.group_loads(self.case0, idx, target_size)
            try:
                self.grouping = det.calibrate(history, grouping, fa_budget)
            except det.DetectorError as exc:
                raise ServiceError(str(exc)) from exc
            self.history = history
            doc = {"event": "detector_calibrated",
                   "fa_budget": fa_budget,
                   "n_history": history.n_rows,
                   "groups": [list(self.grouping.group_load_ids(j))
                              for j in range(len(self.grouping.groups))],
                   "thresholds": list(self.grouping.thresholds)}
            self._log_event(doc)
            return jsonable(doc) | {"tick": self.tick}

    # -- the pipeline -------------------------------------------------------

    def step(self, load_scale: float | None = None,
             loads: dict[int, float] | None = None) -> dict:
        with self._lock:
            return self._step_locked(load_scale, loads)

    def _step_locked(self, load_scale, loads) -> dict:
        tick = self.tick + 1
        truth = self.truth
        if loads:
            truth = truth.with_loads({int(k): float(v)
                                      for k, v in loads.items()})
        elif load_scale is not None:
            truth = truth.with_loads({d.id: d.p * float(load_scale)
                                      for d in truth.loads})

        statuses: dict[str, str] = {s: "skipped" for s in STAGES}
        alarms = {"bdd_fail": None, "detector": None,
                  "rtca_criticals": None, "sced_slack": None}
        durations: dict[str, float] = {}
        halted_at: str | None = None
        prev_hash = self._last_hash

        def publish(stage: str, data: dict, input_hash: str) -> str:
            doc = {"stage": stage, "tick": tick, "input_hash": input_hash,
                   "data": jsonable(data)}
            doc["hash"] = chain_hash(input_hash, doc["data"])
            self.artifacts[(stage, tick)] = doc
            return doc["hash"]

        def run(stage: str, fn):
            nonlocal halted_at
            t0 = time.perf_counter()
            try:
                out = fn()
                statuses[stage] = "ok"
                return out
            except Exception as exc:  # recorded, pipeline halts here
                statuses[stage] = "failed"
                halted_at = stage
                publish(stage, {"error": str(exc)}, prev_hash)
                return None
            finally:
                durations[stage] = time.perf_counter() - t0

        idx = build_linknet(truth)
        mats = build_matrices(truth, idx)

        # physical solve
        def do_pf():
            sol = pf.solve(truth, mats, pf.PowerFlowOptions(), idx)
            if not sol.converged:
                raise ServiceError("physical power flow did not converge")
            return sol
        sol = run("pf", do_pf)
        h = prev_hash
        if sol is not None:
            h = publish("pf", sol.report(), h)

        # telemetry, with the armed attack applied at the boundary
        zbar = None
        if sol is not None:
            def do_telemetry():
                z = se.generate_telemetry(sol, truth, mats,
                                          noise_seed=self.seed + 7919 * tick)
                if self.armed is None:
                    return z, False
                if self.armed.kind == "state":
                    a = atk.state_attack(truth, mats, self.armed.u_by_bus)
                    return atk.forge_measurements(z, truth, mats, idx, sol, a), True
                ms = list(z.measurements)
                k = self.armed.measurement_index % len(ms)
                m = ms[k]
                from dataclasses import replace as dc_replace
                ms[k] = dc_replace(
                    m, value=m.value + self.armed.sigma_multiple * m.sigma)
                return se.MeasurementSet(tuple(ms), timestamp=z.timestamp), True
            out = run("telemetry", do_telemetry)
            if out is not None:
                zbar, forged = out
                h = publish("telemetry",
                            {"n_measurements": len(zbar.measurements),
                             "forged": forged,
                             "rows": zbar.to_rows()}, h)

        # state estimation with bad-data elimination
        est = None
        if zbar is not None:
            def do_se():
                return se.estimate_with_bde(zbar, truth, idx, mats)
            out = run("se", do_se)
            if out is not None:
                est, zkept = out
                n_eliminated = len(zbar.active) - len(zkept.active)
                alarms["bdd_fail"] = n_eliminated > 0
                h = publish("se", {
                    "converged": est.converged,
                    "bdd_pass": est.bdd_pass,
                    "objective": est.objective,
                    "dof": est.dof,
                    "eliminated": n_eliminated,
                    "v_mag": est.v_mag, "v_ang": est.v_ang,
                }, h)

        # apparent loads from the estimated state: scheduled generation minus
        # estimated injection, split pro rata over the loads at each bus
        est_loads: dict[int, float] | None = None
        if est is not None and est.converged:
            inj = np.real(pf.bus_injections(mats, est.v_mag, est.v_ang)) \
                * truth.base_mva
            gen_at = np.zeros(truth.n_bus)
            for g in truth.generators:
                if g.status:
                    gen_at[truth.bus_pos(g.bus)] += g.p
            est_loads = {}
            loads_at: dict[int, list] = {}
            for d in truth.loads:
                loads_at.setdefault(d.bus, []).append(d)
            for bus, here in loads_at.items():
                i = truth.bus_pos(bus)
                total = gen_at[i] - inj[i]
                ref = sum(d.p for d in here)
                for d in here:
                    w = d.p / ref if ref > 0 else 1.0 / len(here)
                    est_loads[d.id] = total * w

        # nearest-neighbor load screen
        if est_loads is not None and self.grouping is not None:
            def do_detector():
                p = np.array([est_loads[lid]
                              for lid in self.grouping.load_ids])
                return det.detect_and_localize(p, self.history, self.grouping)
            verdict = run("detector", do_detector)
            if verdict is not None:
                alarms["detector"] = verdict.anomalous
                h = publish("detector", verdict.report(), h)

        # the cyber view: estimated loads under the known dispatch
        cyber = None
        if est_loads is not None and halted_at is None:
            cyber = truth.with_loads(est_loads)

        rtca_report = None
        cyber_sol = None
        cidx = cmats = None
        if cyber is not None:
            def do_rtca():
                nonlocal cyber_sol, cidx, cmats
                cidx = build_linknet(cyber)
                cmats = build_matrices(cyber, cidx)
                cyber_sol = pf.solve(cyber, cmats, pf.PowerFlowOptions(), cidx)
                if not cyber_sol.converged:
                    raise ServiceError("cyber power flow did not converge")
                return run_rtca(cyber, cyber_sol, idx=cidx)
            rtca_report = run("rtca", do_rtca)
            if rtca_report is not None:
                alarms["rtca_criticals"] = len(rtca_report.critical)
                h = publish("rtca", rtca_report.report(), h)

        plan = None
        if rtca_report is not None:
            def do_sced():
                p, _ = sced.dispatch_pipeline(
                    cyber, cyber_sol, rtca_report, cmats,
                    self.sced_options, cidx, self.p_prev)
                return p
            plan = run("sced", do_sced)
            if plan is not None:
                alarms["sced_slack"] = not plan.clean
                h = publish("sced", plan.report(), h)

        # apply the dispatch to the truth for the next tick
        if plan is not None:
            truth = truth.with_dispatch(plan.gen_p)
            if any(v > 1e-6 for v in plan.shed_base.values()):
                truth = truth.with_loads(
                    {d.id: d.p - plan.shed_base.get(d.id, 0.0)
                     for d in truth.loads})
            self.p_prev = dict(plan.gen_p)
        self.truth = truth
        self.tick = tick

        entry_doc = {"event": "step", "tick": tick,
                     "stages": statuses, "alarms": jsonable(alarms),
                     "halted_at": halted_at, "artifact_hash": h}
        self._log_event(entry_doc)
        return jsonable(entry_doc) | {"durations": durations}

    # -- reads ---------------------------------------------------------------

    def status(self) -> dict:
        return {
            "id": self.id, "tick": self.tick,
            "n_bus": self.case0.n_bus, "n_branch": self.case0.n_branch,
            "n_events": len(self.event_log),
            "attack_armed": self.armed.describe() if self.armed else None,
            "detector_calibrated": self.grouping is not None,
            "last_event": self.event_log[-1] if self.event_log else None,
        }

    def get_report(self, stage: str, tick: int) -> dict:
        if stage not in STAGES:
            raise UnknownArtifactError(f"unknown stage {stage!r}")
        doc = self.artifacts.get((stage, tick))
        if doc is None:
            raise UnknownArtifactError(f"no {stage} artifact for tick {tick}")
        return doc

    def graph(self) -> dict:
        """Physical one-line view with the latest power-flow values."""
        pf_doc = None
        for t in range(self.tick, -1, -1):
            pf_doc = self.artifacts.get(("pf", t))
            if pf_doc is not None:
                break
        by_bus = {}
        by_branch = {}
        if pf_doc and "buses" in pf_doc["data"]:
            by_bus = {b["id"]: b for b in pf_doc["data"]["buses"]}
            by_branch = {b["id"]: b for b in pf_doc["data"]["branches"]}
        return {
            "tick": pf_doc["tick"] if pf_doc else None,
            "buses": [
                {"id": b.id, "type": b.type.value, "base_kv": b.base_kv,
                 "v_mag": by_bus.get(b.id, {}).get("v_mag"),
                 "v_ang_deg": by_bus.get(b.id, {}).get("v_ang_deg"),
                 "load_mw": sum(d.p for d in self.truth.loads if d.bus == b.id),
                 "gen_mw": sum(g.p for g in self.truth.generators
                               if g.bus == b.id and g.status)}
                for b in self.truth.buses
            ],
            "branches": [
                {"id": br.id, "from_bus": br.from_bus, "to_bus": br.to_bus,
                 "s_max": br.s_max, "status": br.status,
                 "loading_pct": by_branch.get(br.id, {}).get("loading_pct"),
                 "p_from": by_branch.get(br.id, {}).get("p_from")}
                for br in self.truth.branches
            ],
        }

    def event_log_text(self) -> str:
        return "\n".join(canonical_json(e) for e in self.event_log) + "\n"

    def _log_event(self, doc: dict):
        entry = dict(jsonable(doc))
        entry["prev_hash"] = self._last_hash
        entry["hash"] = chain_hash(self._last_hash, entry)
        self._last_hash = entry["hash"]
        self.event_log.append(entry)


# ---------------------------------------------------------------------------
# session store and HTTP app

class SessionStore:
    def __init__(self):
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create(self, case_doc, seed: int = 0) -> Session:
        if isinstance(case_doc, GridCase):
            case = case_doc
        else:
            case = parse_case(case_doc if isinstance(case_doc, str)
                              else json.dumps(case_doc))
        s = Session(case, seed=seed)
        with self._lock:
            self._sessions[s.id] = s
        return s

    def get(self, sid: str) -> Session:
        s = self._sessions.get(sid)
        if s is None:
            raise UnknownSessionError(f"no session {sid!r}")
        return s


def create_app(store: SessionStore | None = None) -> FastAPI:
    store = store or SessionStore()
    app = FastAPI(title="gridems")
    app.state.store = store

    def _get(sid: str) -> Session:
        try:
            return store.get(sid)
        except UnknownSessionError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/sessions")
    async def create_session(req: Request):
        doc = await req.json()
        try:
            s = store.create(doc.get("case"), seed=int(doc.get("seed", 0)))
        except (CaseError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"id": s.id, "tick": s.tick}

    @app.get("/sessions/{sid}")
    def session_status(sid: str):
        return _get(sid).status()

    @app.post("/sessions/{sid}/step")
    async def step(sid: str, req: Request):
        body = await req.body()
        doc = json.loads(body) if body else {}
        s = _get(sid)
        try:
            return s.step(load_scale=doc.get("load_scale"),
                          loads=doc.get("loads"))
        except ServiceError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/sessions/{sid}/attack")
    async def arm(sid: str, req: Request):
        doc = await req.json()
        try:
            return _get(sid).arm_attack(doc)
        except ServiceError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.delete("/sessions/{sid}/attack")
    def disarm(sid: str):
        return _get(sid).disarm_attack()

    @app.get("/sessions/{sid}/reports/{stage}/{tick}")
    def report(sid: str, stage: str, tick: int):
        try:
            return _get(sid).get_report(stage, tick)
        except UnknownArtifactError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/sessions/{sid}/graph")
    def graph(sid: str):
        return _get(sid).graph()

    @app.post("/sessions/{sid}/detector/calibrate")
    async def calibrate(sid: str, req: Request):
        body = await req.body()
        doc = json.loads(body) if body else {}
        try:
            return _get(sid).calibrate_detector(
                days=int(doc.get("days", 60)),
                fa_budget=float(doc.get("fa_budget", 0.02)),
                target_size=int(doc.get("target_size", 5)),
                history_text=doc.get("history_text"))
        except ServiceError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/sessions/{sid}/events", response_class=PlainTextResponse)
    def events(sid: str):
        return _get(sid).event_log_text()

    _mount_ui(app)
    return app


def _mount_ui(app):
    """Serve the operator console bundle when it has been built."""
    import pathlib

    from fastapi.staticfiles import StaticFiles

    dist = pathlib.Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if dist.is_dir():
        app.mount("/ui", StaticFiles(directory=str(dist), html=True),
                  name="ui")


def resolve_port(config_path: str | None = None,
                 override: int | None = None) -> int:
    """Port precedence: explicit flag, then config file, then EMS_PORT,
    then 8080."""
    import os
    if override is not None:
        return int(override)
    if config_path:
        with open(config_path) as f:
            doc = json.load(f)
        if "port" in doc:
            return int(doc["port"])
    return int(os.environ.get("EMS_PORT", "8080"))


def serve(host: str = "127.0.0.1", port: int | None = None,
          config_path: str | None = None):  # pragma: no cover - thin wrapper
    import uvicorn
    uvicorn.run(create_app(), host=host,
                port=resolve_port(config_path, port))
