"""Decision backends: the scripted rule engine and an optional remote chat API.

A backend is anything with act(context, schema) -> str. Whatever comes back
is parsed under the strict action grammar by the caller; backends are never
trusted to be well formed. ScriptedPolicy is the deterministic stand-in used
by tests and default runs; RemoteChat forwards to an HTTP text endpoint and
is opt-in only.
"""

from __future__ import annotations

import json
import statistics

from ..optimize import CoordinateAscentSchedule


class LlmBackend:
    """Base class; only the call counter is shared."""

    def __init__(self):
        self.calls = 0

    def act(self, context: str, schema: str) -> str:
        raise NotImplementedError


def _data_payload(context: str) -> dict:
    """Extract the last machine-readable DATA line from a context block."""
    payload = {}
    for line in context.splitlines():
        if line.startswith("DATA: "):
            try:
                payload = json.loads(line[len("DATA: "):])
            except json.JSONDecodeError:
                continue
    return payload


_FAILURE_PLAN = """PLAN
STEP retrieve-docs {"query": "fiber section loss budget playbook", "k": 3} :: pull the loss budget and failure playbook
STEP localize {} :: identify the failing section from telemetry
STEP generate-recovery {} :: build and start the recovery actions
STEP optimize-power {"method": "coordinate_ascent"} :: refine all gains
STEP sync-twin {} :: resynchronize the link model
END"""

_WATCH_PLAN = """PLAN
STEP retrieve-docs {"query": "qdrop baseline trend forecast playbook", "k": 3} :: check the triage guidance
STEP localize {} :: identify the degrading section
STEP check-forecast {} :: decide whether the trend confirms degradation
STEP log-findings {} :: record the watch item
END"""

_WAVELENGTH_PLAN = """PLAN
STEP probe-configs {} :: collect telemetry on a small set of gain settings
STEP fit-twin {} :: refit the link model on the probes
STEP optimize-power {"method": "coordinate_ascent", "on": "twin"} :: optimize on the model
STEP apply-config {} :: apply the optimized gains
STEP verify {} :: confirm measured Q matches the model
END"""


class ScriptedPolicy(LlmBackend):
    """Deterministic policy: canned plans, datasheet-rule localization, and a
    coordinate-ascent schedule for the gain-tuning loop."""

    def __init__(self, step: float = 0.5, max_sweeps: int = 10,
                 include_tilts: bool = False):
        super().__init__()
        self.step = step
        self.max_sweeps = max_sweeps
        self.include_tilts = include_tilts
        self._schedule = None

    def act(self, context: str, schema: str) -> str:
        self.calls += 1
        data = _data_payload(context)
        request = data.get("request", "")
        if request == "react":
            return self._react(data)
        if request == "plan":
            return self._plan(data)
        if request == "localize":
            return self._localize(data)
        if request == "repair":
            return self._repair(data)
        if request == "select_mode":
            return f"ACTION: select_mode {data.get('default', 'RuleCentric')}"
        return "ACTION: finish"

    # -- gain tuning loop ---------------------------------------------------
    def _react(self, data: dict) -> str:
        history = data.get("history", [])
        if not history:
            return "ACTION: finish"
        if len(history) == 1:
            # a one-entry history marks a fresh tuning episode
            self._schedule = None
        if self._schedule is None:
            first = history[0]
            self._schedule = CoordinateAscentSchedule(
                first["gains"], first["tilts"], step=self.step,
                max_sweeps=self.max_sweeps, include_tilts=self.include_tilts,
                gain_bounds=tuple(data.get("gain_bounds", (10.0, 25.0))),
                tilt_bounds=tuple(data.get("tilt_bounds", (-3.0, 3.0))))
            self._schedule.start()
        vec = self._schedule.observe(history[-1]["value"])
        if vec is None:
            return "ACTION: finish"
        gains = ",".join(repr(float(g)) for g in vec[:6])
        return f"ACTION: set_gains {gains}"

    # -- planning -------------------------------------------------------------
    def _plan(self, data: dict) -> str:
        kind = data.get("kind", "")
        if kind in ("establish-batches", "set-load"):
            return _WAVELENGTH_PLAN
        if kind == "qdrop":
            return _WATCH_PLAN
        if kind in ("los", "forecast"):
            return _FAILURE_PLAN
        return "PLAN\nEND"

    # -- localization ---------------------------------------------------------
    def _localize(self, data: dict) -> str:
        window = data.get("window", [])
        if not window:
            return "ACTION: localize none"
        n_spans = len(window[-1]["osc_alive"])
        for s in range(n_spans):
            if not window[-1]["osc_alive"][s]:
                return f"ACTION: localize span={s} kind=Cut"
        budget = float(data.get("budget_db", 22.0))
        threshold = float(data.get("threshold_db", 2.0))
        recent = window[-5:]
        for s in range(n_spans):
            losses = [r["amp_out_dbm"][s] - r["amp_in_dbm"][s + 1]
                      for r in recent]
            excess = statistics.median(losses) - budget
            if excess > threshold:
                return f"ACTION: localize span={s} kind=Aging excess={excess!r}"
        return "ACTION: localize none"

    # -- plan repair ------------------------------------------------------------
    def _repair(self, data: dict) -> str:
        error = data.get("error", "")
        if "CutLink" in error or "dark" in error:
            return 'STEP wait-for-repair {} :: link is dark, hold for repair'
        return 'STEP log-findings {} :: record the unrecoverable step'


class RemoteChat(LlmBackend):
    """HTTP text endpoint backend (opt-in; never used by the test suite).

    POSTs {"context": ..., "schema": ...} as JSON and expects {"text": ...}.
    """

    def __init__(self, url: str, timeout_s: float = 30.0):
        super().__init__()
        if not url:
            raise ValueError("RemoteChat needs an endpoint URL")
        self.url = url
        self.timeout_s = timeout_s

    def act(self, context: str, schema: str) -> str:
        import urllib.request

        self.calls += 1
        body = json.dumps({"context": context, "schema": schema}).encode()
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode())["text"]
