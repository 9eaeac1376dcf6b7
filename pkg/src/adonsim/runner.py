"""End-to-end orchestration: clock, agent tasks, detectors, artifacts.

The runner owns the only clock. Agent tools that need time (probing, waiting
for a repair) advance it themselves, so simulated time is consumed by the
same actions that would consume it on a real link. Every random draw comes
from one of four spawned seed streams (plant truth, telemetry noise, agent,
stage datasets), which is what makes two runs of the same manifest
byte-identical.
"""

from __future__ import annotations

import collections
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import controlplane, envs, optimize, physics, scenario as scenario_mod
from . import telemetry, twin as twin_mod
from .agent import backends, modes, planner, retrieval

SUPPRESS_TICKS = 60
PROBE_CONFIGS = 4
PROBE_TICKS_EACH = 6
PROBE_OFFSET_DB = 1.5
STAGE_TRAIN_PER_CONFIG = 75
STAGE_TEST_SAMPLES = 300

CANONICAL_STAGE_TICKS = {"pre-cut": 290, "post-cut": 490, "post-aging": 1140}
CANONICAL_AGING_WINDOWS = {"pre": (895, 945), "post": (1095, 1145)}

ALARM_TASK_KIND = {"LossOfSignal": "los", "QDrop": "qdrop",
                   "DegradationForecast": "forecast"}


class LocalControl:
    """Config writes routed through the service dispatch (same code path as
    the wire, minus the socket)."""

    def __init__(self, service: controlplane.Service):
        self._session = controlplane.LocalSession(service)

    def edit_config(self, gains_db=None, tilts_db=None) -> dict:
        changes = {}
        if gains_db is not None:
            changes["gains_db"] = [float(g) for g in gains_db]
        if tilts_db is not None:
            changes["tilts_db"] = [float(t) for t in tilts_db]
        resp = self._session.request("edit-config", {"changes": changes})
        if "error" in resp:
            raise scenario_mod.ValidationError(resp["error"]["message"])
        return resp["result"]


@dataclass
class TaskRecord:
    tick: int
    kind: str
    mode: str
    entries: list = field(default_factory=list)
    outcome: str = ""
    backend_calls: int = 0

    def to_json(self) -> dict:
        return {"tick": self.tick, "kind": self.kind, "mode": self.mode,
                "entries": self.entries, "outcome": self.outcome,
                "backend_calls": self.backend_calls}


class Runner:
    def __init__(self, scenario: scenario_mod.Scenario, seed: int = 7,
                 backend=None, mode_table=None, compute_oracle_gap=True,
                 stage_ticks=None, aging_windows=None, control=None,
                 wire_server: bool = False):
        root = np.random.SeedSequence(seed)
        truth_s, noise_s, agent_s, stage_s = root.spawn(4)
        self.seed = seed
        self.scenario = scenario
        self.state = scenario_mod.SimulatorState(scenario, truth_s)
        self.noise_rng = np.random.default_rng(noise_s)
        self.agent_seed = int(np.random.default_rng(agent_s).integers(2**31))
        self.stage_rng = np.random.default_rng(stage_s)

        self.log = controlplane.LogStore()
        self.service = controlplane.Service(self.state, self.log)
        self.server = controlplane.TcpServer(self.service) if wire_server \
            else None
        if control is not None:
            self.control = control
        elif wire_server:
            self.control = controlplane.WireControl(*self.server.address)
        else:
            self.control = LocalControl(self.service)

        self.twin = twin_mod.DigitalTwin(self.state.nominal_link())
        self.buffer = telemetry.RingBuffer()
        self.qdrop = telemetry.QDropDetector()
        self.forecast = telemetry.ForecastDetector()
        self.los = telemetry.LosDetector()

        self.backend = backend if backend is not None \
            else backends.ScriptedPolicy()
        self.mode_table = dict(modes.DEFAULT_MODE_TABLE)
        if mode_table:
            for kind, mode in mode_table.items():
                self.mode_table[kind] = modes.parse_mode(mode) \
                    if isinstance(mode, str) else mode
        self.store = retrieval.builtin_store()
        self.workflows = planner.RuleWorkflows()
        self.compute_oracle_gap = compute_oracle_gap
        self.stage_ticks = dict(stage_ticks) if stage_ticks else {}
        self.aging_windows = dict(aging_windows) if aging_windows else {}

        self.records = []
        self.q_rows = []
        self.alarms = []
        self.tasks_done = []
        self.workflow_gaps = []
        self.localizations = []
        self.stages = {}
        self.forecast_info = None
        self.counters = {
            "backend_calls_total": 0,
            "rule_centric_backend_calls": 0,
            "llm_native_workflow_fetches": 0,
            "workflow_fetches_total": 0,
            "tasks_by_mode": {m.value: 0 for m in modes.OperationMode},
        }
        self._pending = collections.deque()
        self._registry = self._build_registry()
        self._ctx = {}

    # -- clock ------------------------------------------------------------------
    def advance_tick(self) -> telemetry.TelemetryRecord:
        applied = self.state.step()
        tick = self.state.tick
        for ev in applied:
            self.log.append(tick, "info", "scenario",
                            f"event: {ev.describe()}",
                            {"kind": ev.kind, "at_tick": ev.at_tick})
            if ev.kind in ("establish-batches", "set-load"):
                target = ev.n_batches * scenario_mod.BATCH_SIZE \
                    if ev.kind == "establish-batches" else ev.target_load
                self._queue_task(planner.Task(ev.kind, tick,
                                              {"target_load": target}))
        record = telemetry.sample(self.state, self.noise_rng)
        self.buffer.append(record)
        self.records.append(record)
        q_true = self.state.true_snapshot().min_q()
        q_meas = self._min_q_measured(record)
        self.q_rows.append((tick, record.n_active, q_true, q_meas))

        for alarm in (self.los.check(record)
                      + self.qdrop.check(self.buffer, tick)
                      + self.forecast.check(self.buffer, tick)):
            self.alarms.append(alarm)
            self.log.append(tick, "warning", "telemetry",
                            f"alarm: {alarm.kind}", alarm.detail)
            if alarm.kind == "DegradationForecast" and \
                    self.forecast_info is None:
                self.forecast_info = {
                    "tick": tick,
                    "cumulative_loss_db":
                        float(self.state.truth.aging_offset_db.sum()),
                    "predicted_loss_db":
                        alarm.detail.get("predicted_loss_db"),
                }
            self._queue_task(planner.Task(ALARM_TASK_KIND[alarm.kind], tick,
                                          dict(alarm.detail)))
        if tick in self.stage_ticks.values():
            for name, st in self.stage_ticks.items():
                if st == tick and name not in self.stages:
                    self._collect_stage(name)
        self.service.publish(record)
        if self.server is not None:
            self.server.pump()
        return record

    @staticmethod
    def _min_q_measured(record) -> float:
        vals = record.q_db[~np.isnan(record.q_db)]
        return float(vals.min()) if vals.size else float("nan")

    def _queue_task(self, task: planner.Task):
        if any(t.kind == task.kind for t in self._pending):
            return
        self._pending.append(task)

    # -- main loop ---------------------------------------------------------------
    def run(self) -> dict:
        while self.state.tick + 1 < self.scenario.end_tick:
            self.advance_tick()
            while self._pending:
                self._handle_task(self._pending.popleft())
        if self.server is not None:
            self.server.pump()
        return self.summary()

    # -- task handling ------------------------------------------------------------
    def _handle_task(self, task: planner.Task):
        mode = modes.select_mode(task.kind, self.mode_table)
        self.counters["tasks_by_mode"][mode.value] += 1
        calls_before = self.backend.calls
        fetches_before = self.workflows.fetches
        rec = TaskRecord(tick=self.state.tick, kind=task.kind,
                         mode=mode.value)
        self._ctx = {"task": task}
        self._registry.tick_source = lambda: self.state.tick
        config_changed_before = self.state.config_version
        # hold derived detectors while the agent is driving the link; its own
        # probing would otherwise read as a degradation
        saved_suppression = (self.qdrop.suppressed_until,
                             self.forecast.suppressed_until)
        self.qdrop.suppressed_until = 10 ** 9
        self.forecast.suppressed_until = 10 ** 9
        try:
            if task.kind in ("establish-batches", "set-load"):
                self._run_wavelength_task(task, mode, rec)
            else:
                self._run_failure_task(task, mode, rec)
        except (planner.ExecutionAborted, planner.PlanRejected,
                planner.MalformedAction, planner.LocalizationFailed) as exc:
            rec.outcome = f"failed: {type(exc).__name__}: {exc}"
            self.log.append(self.state.tick, "error", "agent", rec.outcome,
                            {"kind": task.kind})
        finally:
            calls = self.backend.calls - calls_before
            fetches = self.workflows.fetches - fetches_before
            rec.backend_calls = calls
            self.counters["backend_calls_total"] += calls
            self.counters["workflow_fetches_total"] += fetches
            if mode is modes.OperationMode.RULE_CENTRIC:
                self.counters["rule_centric_backend_calls"] += calls
            if mode is modes.OperationMode.LLM_NATIVE:
                self.counters["llm_native_workflow_fetches"] += fetches
            if self.state.config_version != config_changed_before:
                until = self.state.tick + SUPPRESS_TICKS
                self.qdrop.suppressed_until = until
                self.forecast.suppressed_until = until
            else:
                (self.qdrop.suppressed_until,
                 self.forecast.suppressed_until) = saved_suppression
            self.tasks_done.append(rec)
            self._ctx = {}

    def _run_wavelength_task(self, task, mode, rec: TaskRecord):
        target = task.payload["target_load"]
        changed = self.state.apply_wavelength_change(target)
        self.log.append(self.state.tick, "info", "agent",
                        f"wavelength change to load {target}",
                        {"slots_changed": changed})
        rec.entries.append({"kind": "thought",
                            "text": f"load target {target}: "
                                    f"{len(changed)} slots changed"})
        if mode is modes.OperationMode.LLM_NATIVE:
            self._react_on_live(rec)
            rec.outcome = "success"
            return
        p = planner.plan(task, mode, self.backend, self.store,
                         self._registry, workflows=self.workflows)
        transcript = planner.execute_plan(
            p, self._registry,
            backend=None if mode is modes.OperationMode.RULE_CENTRIC
            else self.backend)
        rec.entries.extend(transcript.entries)
        rec.outcome = transcript.outcome

    def _react_on_live(self, rec: TaskRecord):
        env = envs.LiveEnv(
            apply_fn=lambda g, t: self.control.edit_config(g, t),
            advance_fn=self.advance_tick,
            initial_gains=self.state.gains_db(),
            initial_tilts=self.state.tilts_db())
        raw_lines = []
        report = planner.react_optimize(env, self.backend, max_iters=20,
                                        log=raw_lines.append)
        self.control.edit_config(report.best_config.gains,
                                 report.best_config.tilts)
        latest = self.buffer.last(1)[0]
        self.twin.sync(latest)
        rec.entries.extend({"kind": "raw", "text": t} for t in raw_lines)
        rec.entries.append({"kind": "observation",
                            "text": f"best measured min-Q "
                                    f"{report.best_value:.3f} dB after "
                                    f"{report.evaluations} evaluations"})

    def _run_failure_task(self, task, mode, rec: TaskRecord):
        p = planner.plan(task, mode, self.backend, self.store,
                         self._registry, workflows=self.workflows)
        transcript = planner.execute_plan(p, self._registry,
                                          backend=self.backend)
        rec.entries.extend(transcript.entries)
        rec.outcome = transcript.outcome

    # -- tools ---------------------------------------------------------------
    def _build_registry(self) -> planner.ToolRegistry:
        reg = planner.ToolRegistry()
        reg.register("probe-configs", self._tool_probe_configs)
        reg.register("fit-twin", self._tool_fit_twin)
        reg.register("optimize-power", self._tool_optimize_power)
        reg.register("apply-config", self._tool_apply_config)
        reg.register("verify", self._tool_verify)
        reg.register("retrieve-docs", self._tool_retrieve_docs)
        reg.register("localize", self._tool_localize)
        reg.register("check-forecast", self._tool_check_forecast)
        reg.register("log-findings", self._tool_log_findings)
        reg.register("generate-recovery", self._tool_generate_recovery)
        reg.register("set-gain", self._tool_set_gain)
        reg.register("wait-for-repair", self._tool_wait_for_repair)
        reg.register("sync-twin", self._tool_sync_twin)
        return reg

    def _probe_gain_sets(self, base: np.ndarray) -> list:
        lo, hi = physics.GAIN_RANGE
        alt = np.array([PROBE_OFFSET_DB if a % 2 == 0 else -PROBE_OFFSET_DB
                        for a in range(6)])
        offsets = [np.zeros(6), np.full(6, PROBE_OFFSET_DB),
                   np.full(6, -PROBE_OFFSET_DB), alt]
        return [np.clip(base + off, lo, hi) for off in offsets]

    def _tool_probe_configs(self, args: dict) -> planner.Observation:
        base = self.state.gains_db()
        tilts = self.state.tilts_db()
        probes = []
        for gains in self._probe_gain_sets(base):
            self.control.edit_config(gains, tilts)
            for _ in range(PROBE_TICKS_EACH):
                probes.append(self.advance_tick())
        self.control.edit_config(base, tilts)
        self._ctx["probes"] = probes
        return planner.Observation(
            text=f"collected {len(probes)} records over "
                 f"{PROBE_CONFIGS} gain settings",
            payload={"n_records": len(probes)})

    def _tool_fit_twin(self, args: dict) -> planner.Observation:
        probes = self._ctx.get("probes")
        if not probes:
            raise RuntimeError("no probe dataset collected")
        report = self.twin.fit(probes)
        self.log.append(self.state.tick, "info", "twin",
                        f"model fit: rmse {report.residual_rmse:.4f} dB "
                        f"in {report.iterations} iterations",
                        {"converged": report.converged})
        return planner.Observation(
            text=f"fit rmse {report.residual_rmse:.4f} dB, "
                 f"converged={report.converged}",
            payload={"rmse_db": report.residual_rmse,
                     "iterations": report.iterations,
                     "converged": report.converged})

    def _twin_env(self) -> envs.TwinEnv:
        return envs.TwinEnv(self.twin, self.state.grid.active,
                            self.state.grid.is_real,
                            initial_gains=self.state.gains_db(),
                            initial_tilts=self.state.tilts_db())

    def _tool_optimize_power(self, args: dict) -> planner.Observation:
        if self.state.any_cut():
            raise envs.CutLink("cannot optimize while a span is dark")
        env = self._twin_env()
        method = args.get("method", "coordinate_ascent")
        if method == "bayes_opt":
            report = optimize.bayes_opt(env, budget=int(args.get("budget", 50)),
                                        seed=self.agent_seed)
        else:
            report = optimize.coordinate_ascent(env, include_tilts=False)
        gap_info = {}
        if self.compute_oracle_gap:
            oracle = optimize.brute_force(self._twin_env())
            gap = oracle.best_value - report.best_value
            gap_info = {"oracle_best_db": oracle.best_value,
                        "gap_db": gap}
            self.workflow_gaps.append({
                "tick": self.state.tick,
                "task_kind": self._ctx["task"].kind,
                "method": method,
                "best_db": report.best_value,
                "oracle_best_db": oracle.best_value,
                "gap_db": gap,
            })
        self._ctx["best_config"] = report.best_config
        self.control.edit_config(report.best_config.gains,
                                 report.best_config.tilts)
        payload = {"best_db": report.best_value,
                   "evaluations": report.evaluations, **gap_info}
        return planner.Observation(
            text=f"optimized model min-Q {report.best_value:.3f} dB "
                 f"({report.evaluations} evaluations); applied",
            payload=payload)

    def _tool_apply_config(self, args: dict) -> planner.Observation:
        cfg = self._ctx.get("best_config")
        if cfg is None:
            raise RuntimeError("no optimized configuration available")
        result = self.control.edit_config(cfg.gains, cfg.tilts)
        return planner.Observation(
            text=f"configuration applied (version "
                 f"{result['config_version']})",
            payload=result)

    def _tool_verify(self, args: dict) -> planner.Observation:
        record = self.advance_tick()
        measured = self._min_q_measured(record)
        predicted = self.twin.min_q_of(self.state.gains_db(),
                                       self.state.tilts_db(),
                                       self.state.grid.active,
                                       self.state.grid.is_real)
        delta = measured - predicted
        return planner.Observation(
            text=f"measured min-Q {measured:.3f} dB vs model "
                 f"{predicted:.3f} dB (delta {delta:+.3f})",
            payload={"measured_db": measured, "predicted_db": predicted,
                     "delta_db": delta})

    def _tool_retrieve_docs(self, args: dict) -> planner.Observation:
        query = args.get("query", "")
        k = int(args.get("k", 3))
        chunks = retrieval.retrieve(self.store, query, k)
        titles = [{"doc_id": c.doc_id, "score": round(c.score, 6),
                   "title": self.store.get(c.doc_id).title}
                  for c in chunks]
        self._ctx["chunks"] = titles
        return planner.Observation(
            text="retrieved: " + (", ".join(t["doc_id"] for t in titles)
                                  if titles else "nothing relevant"),
            payload={"chunks": titles})

    def _evidence(self) -> dict:
        window = []
        for r in self.buffer.last(50):
            window.append({"osc_alive": [bool(v) for v in r.osc_alive],
                           "amp_in_dbm": [float(v) for v in r.amp_in_dbm],
                           "amp_out_dbm": [float(v) for v in r.amp_out_dbm]})
        alarms = [{"kind": ALARM_TASK_KIND.get(a.kind, a.kind),
                   "tick": a.tick, **a.detail} for a in self.alarms[-10:]]
        logs = [f"[{e.tick}] {e.source}: {e.text}"
                for e in self.log.query()[-10:]]
        return {"window": window, "alarms": alarms, "logs": logs,
                "chunks": self._ctx.get("chunks", []),
                "budget_db": planner.SPAN_LOSS_BUDGET_DB,
                "threshold_db": planner.SPAN_LOSS_THRESHOLD_DB}

    def _tool_localize(self, args: dict) -> planner.Observation:
        try:
            loc = planner.localize_failure(self._evidence(), self.backend)
        except planner.LocalizationFailed as exc:
            return planner.Observation(
                text=f"no telemetry-consistent anomaly ({exc})",
                payload={"found": False})
        self._ctx["localization"] = loc
        entry = {"tick": self.state.tick, "task_kind": self._ctx["task"].kind,
                 "span": loc.span_id, "kind": loc.kind,
                 "excess_db": loc.excess_db}
        self.localizations.append(entry)
        self.log.append(self.state.tick, "info", "agent",
                        f"localized {loc.kind} on section {loc.span_id}",
                        {"excess_db": loc.excess_db})
        return planner.Observation(
            text=f"{loc.kind} on section {loc.span_id}"
                 + (f", excess {loc.excess_db:.2f} dB"
                    if loc.kind == "Aging" else ""),
            payload={"found": True, "span": loc.span_id, "kind": loc.kind,
                     "excess_db": loc.excess_db})

    def _tool_check_forecast(self, args: dict) -> planner.Observation:
        try:
            res = telemetry.forecast_power(self.buffer)
        except telemetry.InsufficientData as exc:
            return planner.Observation(text=f"trend unavailable ({exc})",
                                       payload={"triggered": False})
        return planner.Observation(
            text=f"trend slope {res.slope:.4f} dB/tick, predicted loss "
                 f"{res.predicted_loss_at_horizon:.2f} dB at horizon "
                 f"({'confirms degradation' if res.triggered else 'below the recovery trigger'})",
            payload={"triggered": res.triggered,
                     "slope_db_per_tick": res.slope,
                     "predicted_loss_db": res.predicted_loss_at_horizon})

    def _tool_log_findings(self, args: dict) -> planner.Observation:
        loc = self._ctx.get("localization")
        text = "watch item recorded"
        if loc is not None:
            text += (f": {loc.kind} suspected on section {loc.span_id} "
                     f"(excess {loc.excess_db:.2f} dB)")
        self.log.append(self.state.tick, "info", "agent", text, {})
        return planner.Observation(text=text, payload={})

    def _settled_excess(self, span: int, window: int = 15,
                        slope_tol: float = 0.02, max_hold: int = 40) -> float:
        """Hold while the span's measured loss still trends; return the
        settled excess over budget. Trimming against a mid-ramp snapshot
        leaves the tail of the ramp uncompensated."""
        def losses():
            recent = self.buffer.last(window)
            return np.array([r.amp_out_dbm[span] - r.amp_in_dbm[span + 1]
                             for r in recent])

        for _ in range(max_hold):
            for _ in range(5):
                self.advance_tick()
            loss = losses()
            slope, _ = telemetry.ols_line(loss)
            if abs(slope) < slope_tol:
                break
        return float(losses().mean() - planner.SPAN_LOSS_BUDGET_DB)

    def _tool_generate_recovery(self, args: dict) -> planner.Observation:
        loc = self._ctx.get("localization")
        if loc is None:
            raise RuntimeError("no accepted localization to recover from")
        if loc.kind == "Aging":
            settled = self._settled_excess(loc.span_id)
            if settled > loc.excess_db:
                loc = planner.Localization(loc.span_id, loc.kind,
                                           settled, loc.raw)
                self._ctx["localization"] = loc
            # fold the measured excess into the model so refinement sees
            # the degraded section
            new_extra = float(np.clip(loc.excess_db, *twin_mod.EXTRA_RANGE))
            self.twin.params.extra_loss_db[loc.span_id] = new_extra
            self.log.append(self.state.tick, "info", "twin",
                            f"model section {loc.span_id} extra loss set to "
                            f"{new_extra:.2f} dB from measurement "
                            f"(held until the loss trend settled)", {})
        p = planner.generate_recovery(loc, self.twin, self.state)
        self._ctx["recovery_plan"] = p
        done = []
        for step in p.steps:
            if step.tool not in ("set-gain", "wait-for-repair"):
                break
            obs = self._registry.call(step.tool, step.args)
            done.append(f"{step.tool}: {obs.text}")
        return planner.Observation(
            text="recovery plan ready; corrective actions done: "
                 + ("; ".join(done) if done else "none"),
            payload={"steps": [{"tool": s.tool, "args": s.args}
                               for s in p.steps]})

    def _tool_set_gain(self, args: dict) -> planner.Observation:
        amp = int(args["amp"])
        gain = float(args["gain_db"])
        gains = self.state.gains_db()
        gains[amp] = gain
        result = self.control.edit_config(gains, self.state.tilts_db())
        return planner.Observation(
            text=f"amplifier {amp} gain set to {gain:.2f} dB",
            payload={"amp": amp, "gain_db": gain,
                     "config_version": result["config_version"]})

    def _tool_wait_for_repair(self, args: dict) -> planner.Observation:
        waited = 0
        while self.state.any_cut():
            if waited > 2000:
                raise RuntimeError("repair did not arrive within 2000 ticks")
            self.advance_tick()
            waited += 1
        for _ in range(5):
            self.advance_tick()
            waited += 1
        return planner.Observation(
            text=f"link restored after {waited} ticks",
            payload={"waited_ticks": waited})

    def _tool_sync_twin(self, args: dict) -> planner.Observation:
        latest = self.buffer.last(1)
        if not latest:
            raise RuntimeError("no telemetry to sync against")
        step = self.twin.sync(latest[0])
        return planner.Observation(
            text=f"model nudged by {step:.4f} dB (max parameter step)",
            payload={"step_db": step})

    # -- stage datasets ------------------------------------------------------
    def _burst(self, gain_sets: list, n_each: int) -> list:
        """Off-clock measurement burst: draws records at fixed plant state
        without advancing time or touching the live noise stream."""
        saved = self.state.gains_db()
        out = []
        for gains in gain_sets:
            for a, amp in enumerate(self.state.link.amplifiers):
                amp.gain_db = float(gains[a])
            for _ in range(n_each):
                out.append(telemetry.sample(self.state, self.stage_rng))
        for a, amp in enumerate(self.state.link.amplifiers):
            amp.gain_db = float(saved[a])
        return out

    def _collect_stage(self, name: str) -> None:
        base = self.state.gains_db()
        train = self._burst(self._probe_gain_sets(base),
                            STAGE_TRAIN_PER_CONFIG)
        test = self._burst([base], STAGE_TEST_SAMPLES)
        template = self.state.nominal_link()
        baseline = twin_mod.DigitalTwin(template)
        fitted = twin_mod.DigitalTwin(self.state.nominal_link())
        report = fitted.fit(train)
        rmse_base = baseline.rmse(test)
        rmse_fit = fitted.rmse(test)
        self.stages[name] = {
            "tick": self.state.tick,
            "n_train": len(train),
            "n_test": len(test),
            "baseline_rmse_db": rmse_base,
            "fitted_rmse_db": rmse_fit,
            "improvement_pct": 100.0 * (1.0 - rmse_fit / rmse_base)
            if rmse_base > 0 else 0.0,
            "fit_converged": report.converged,
            "fit_iterations": report.iterations,
        }
        self.log.append(self.state.tick, "info", "twin",
                        f"stage {name}: baseline rmse {rmse_base:.3f} dB, "
                        f"fitted rmse {rmse_fit:.3f} dB", {})

    # -- summary/artifacts ---------------------------------------------------
    def aging_outcome(self) -> dict:
        out = {}
        if self.forecast_info is not None:
            out.update(self.forecast_info)
        for label, window in self.aging_windows.items():
            lo, hi = window
            vals = [q for (t, _, q, _) in self.q_rows
                    if lo <= t < hi and not math.isnan(q)]
            out[f"{label}_min_q_db"] = float(np.mean(vals)) if vals else None
        pre = out.get("pre_min_q_db")
        post = out.get("post_min_q_db")
        if pre is not None and post is not None:
            out["delta_db"] = post - pre
        return out

    def summary(self) -> dict:
        gaps = [g["gap_db"] for g in self.workflow_gaps
                if g["task_kind"] in ("establish-batches", "set-load")]
        alarm_counts = {}
        for a in self.alarms:
            alarm_counts[a.kind] = alarm_counts.get(a.kind, 0) + 1
        return {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "ticks": self.state.tick + 1,
            "tasks": [{"tick": t.tick, "kind": t.kind, "mode": t.mode,
                       "outcome": t.outcome,
                       "backend_calls": t.backend_calls}
                      for t in self.tasks_done],
            "workflow_gaps": self.workflow_gaps,
            "mean_add_drop_gap_db":
                float(np.mean(gaps)) if gaps else None,
            "localizations": self.localizations,
            "aging": self.aging_outcome(),
            "twin_stages": self.stages,
            "alarm_counts": alarm_counts,
            "mode_counters": self.counters,
        }

    def write_artifacts(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        telemetry.write_csv(os.path.join(out_dir, "telemetry.csv"),
                            self.records)
        telemetry.write_alarms(os.path.join(out_dir, "alarms.jsonl"),
                               self.alarms)
        with open(os.path.join(out_dir, "q_trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "n_active", "min_q_true_db", "min_q_meas_db"])
            for tick, n_active, q_true, q_meas in self.q_rows:
                w.writerow([telemetry._fmt(tick), telemetry._fmt(n_active),
                            telemetry._fmt(q_true), telemetry._fmt(q_meas)])
        with open(os.path.join(out_dir, "transcripts.jsonl"), "wb") as fh:
            for t in self.tasks_done:
                fh.write(controlplane.encode_line(t.to_json()))
        self.log.write_jsonl(os.path.join(out_dir, "logs.jsonl"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.stages:
            with open(os.path.join(out_dir, "twin_report.json"), "w") as fh:
                json.dump({"stages": self.stages}, fh, indent=2,
                          sort_keys=True)
                fh.write("\n")

    def close(self):
        if self.server is not None:
            if hasattr(self.control, "close"):
                self.control.close()
            self.server.close()


def run_scenario(scenario: scenario_mod.Scenario, seed: int = 7,
                 out_dir=None, **kwargs) -> dict:
    """Convenience wrapper: construct, run, write artifacts, close."""
    runner = Runner(scenario, seed=seed, **kwargs)
    try:
        summary = runner.run()
        if out_dir is not None:
            runner.write_artifacts(out_dir)
    finally:
        runner.close()
    return summary
