"""Plan generation/execution, the gain-tuning loop, localization, recovery.

Everything a backend emits passes through strict grammars before it can touch
the network: plan steps are validated against the tool registry, the tuning
loop enforces the set_gains action format and gain bounds, and localization
answers are cross-checked against telemetry before anyone acts on them.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

from ..optimize import GainConfig, ObjectiveSample, OptimizerReport, _report
from . import modes

MAX_PLAN_STEPS = 50
SPAN_LOSS_BUDGET_DB = 22.0
SPAN_LOSS_THRESHOLD_DB = 2.0
RECOVERY_GAIN_CAP_DB = 24.0


class PlanRejected(RuntimeError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class ExecutionAborted(RuntimeError):
    def __init__(self, message: str, transcript=None):
        super().__init__(message)
        self.transcript = transcript


class MalformedAction(RuntimeError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class LocalizationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Task:
    kind: str
    tick: int
    payload: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PlanStep:
    tool: str
    args: dict
    rationale: str


@dataclass
class Plan:
    steps: list
    task_kind: str = ""
    source: str = "backend"
    raw_text: str = ""


@dataclass
class ToolCall:
    tool: str
    args: dict
    tick: int


@dataclass
class Observation:
    text: str
    payload: dict = field(default_factory=dict)


@dataclass
class Transcript:
    entries: list = field(default_factory=list)
    outcome: str = ""

    def thought(self, text: str) -> None:
        self.entries.append({"kind": "thought", "text": text})

    def action(self, call: ToolCall) -> None:
        self.entries.append({"kind": "action", "tool": call.tool,
                             "args": call.args, "tick": call.tick})

    def observation(self, obs: Observation) -> None:
        self.entries.append({"kind": "observation", "text": obs.text,
                             "payload": obs.payload})


class ToolRegistry:
    """Named tools the executor may call; nothing else ever runs."""

    def __init__(self):
        self._tools = {}
        self.tick_source = lambda: 0

    def register(self, name: str, fn) -> None:
        self._tools[name] = fn

    def names(self) -> set:
        return set(self._tools)

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def call(self, name: str, args: dict) -> Observation:
        obs = self._tools[name](args)
        if not isinstance(obs, Observation):
            obs = Observation(text=str(obs))
        return obs


@dataclass
class Localization:
    span_id: int
    kind: str  # Cut or Aging
    excess_db: float = 0.0
    raw: str = ""


# -- pre-defined workflows ----------------------------------------------------

class RuleWorkflows:
    """Stored workflows for the rule-driven path; fetches are counted so the
    mode-purity property is checkable."""

    def __init__(self):
        self.fetches = 0
        self._plans = {
            "set-load": [
                PlanStep("probe-configs", {}, "collect telemetry on a small set of gain settings"),
                PlanStep("fit-twin", {}, "refit the link model on the probes"),
                PlanStep("optimize-power", {"method": "coordinate_ascent", "on": "twin"}, "optimize on the model"),
                PlanStep("apply-config", {}, "apply the optimized gains"),
                PlanStep("verify", {}, "confirm measured Q matches the model"),
            ],
        }
        self._plans["establish-batches"] = list(self._plans["set-load"])

    def fetch(self, kind: str) -> Plan:
        if kind not in self._plans:
            raise modes.UnknownEventKind(kind)
        self.fetches += 1
        return Plan(steps=list(self._plans[kind]), task_kind=kind,
                    source="workflow")


WORKFLOWS = RuleWorkflows()


# -- plan text grammar ----------------------------------------------------------

def parse_plan_text(text: str) -> list:
    """Parse backend plan text into steps; raises ValueError on any bad line."""
    lines = [ln.strip() for ln in text.strip().splitlines()]
    if not lines or lines[0] != "PLAN" or lines[-1] != "END":
        raise ValueError("plan must be wrapped in PLAN ... END")
    steps = []
    for ln in lines[1:-1]:
        if not ln:
            continue
        if not ln.startswith("STEP "):
            raise ValueError(f"unparseable plan line: {ln!r}")
        rest = ln[len("STEP "):]
        if " :: " in rest:
            head, rationale = rest.split(" :: ", 1)
        else:
            head, rationale = rest, ""
        head = head.strip()
        if " " in head:
            tool, args_text = head.split(" ", 1)
        else:
            tool, args_text = head, "{}"
        args = json.loads(args_text)
        if not isinstance(args, dict):
            raise ValueError(f"step args must be a JSON object: {ln!r}")
        steps.append(PlanStep(tool=tool, args=args,
                              rationale=rationale.strip()))
    if len(steps) > MAX_PLAN_STEPS:
        raise ValueError(f"plan exceeds {MAX_PLAN_STEPS} steps")
    return steps


def plan(task: Task, mode: modes.OperationMode, backend, store,
         registry, workflows: RuleWorkflows = WORKFLOWS) -> Plan:
    """Produce a validated plan for the task under the given mode.

    RuleCentric fetches the stored workflow verbatim and never touches the
    backend. The other modes ask the backend and validate each step against
    the tool registry, re-prompting once before giving up.
    """
    if mode is modes.OperationMode.RULE_CENTRIC:
        p = workflows.fetch(task.kind)
        for step in p.steps:
            if step.tool not in registry:
                raise PlanRejected(f"workflow step {step.tool!r} is not a "
                                   "registered tool")
        return p

    data = {"request": "plan", "kind": task.kind, "payload": task.payload}
    context = (f"TASK kind={task.kind} tick={task.tick}\n"
               f"Known tools: {', '.join(sorted(registry.names()))}\n"
               f"DATA: {json.dumps(data, sort_keys=True)}")
    schema = ("PLAN\nSTEP <tool> <json args> :: <rationale>\n...\nEND")
    last_raw = ""
    for attempt in range(2):
        raw = backend.act(context, schema)
        last_raw = raw
        try:
            steps = parse_plan_text(raw)
            bad = [s.tool for s in steps if s.tool not in registry]
            if bad:
                raise ValueError(f"unknown tools: {', '.join(bad)}")
            return Plan(steps=steps, task_kind=task.kind, source="backend",
                        raw_text=raw)
        except (ValueError, json.JSONDecodeError) as exc:
            context += f"\nRejected: {exc}. Reply again using the schema only."
    raise PlanRejected("backend failed to produce a valid plan", raw=last_raw)


def execute_plan(plan_obj: Plan, registry: ToolRegistry, backend=None,
                 max_repairs: int = 2) -> Transcript:
    """Run the plan step by step, recording a full transcript.

    A failing tool triggers a repair request to the backend (at most
    max_repairs per plan); the repair step runs, then the failed step is
    retried once. Anything beyond that aborts with the partial transcript.
    """
    transcript = Transcript()
    repairs_used = 0
    for step in plan_obj.steps:
        if step.rationale:
            transcript.thought(step.rationale)
        attempts = 0
        while True:
            call = ToolCall(step.tool, step.args, registry.tick_source())
            transcript.action(call)
            try:
                obs = registry.call(step.tool, step.args)
            except Exception as exc:  # tool errors feed the repair path
                transcript.observation(Observation(
                    text=f"error: {type(exc).__name__}: {exc}"))
                if backend is None or repairs_used >= max_repairs \
                        or attempts >= 1:
                    transcript.outcome = f"aborted at {step.tool}: {exc}"
                    raise ExecutionAborted(transcript.outcome,
                                           transcript=transcript) from exc
                repairs_used += 1
                attempts += 1
                repair = _request_repair(step, exc, registry, backend)
                if repair is None:
                    transcript.outcome = f"aborted at {step.tool}: {exc}"
                    raise ExecutionAborted(transcript.outcome,
                                           transcript=transcript) from exc
                transcript.thought(f"repair: {repair.rationale}")
                rcall = ToolCall(repair.tool, repair.args,
                                 registry.tick_source())
                transcript.action(rcall)
                try:
                    robs = registry.call(repair.tool, repair.args)
                except Exception as rexc:
                    transcript.observation(Observation(
                        text=f"error: {type(rexc).__name__}: {rexc}"))
                    transcript.outcome = f"aborted at {step.tool}: {rexc}"
                    raise ExecutionAborted(transcript.outcome,
                                           transcript=transcript) from rexc
                transcript.observation(robs)
                continue  # retry the failed step
            transcript.observation(obs)
            break
    transcript.outcome = "success"
    return transcript


def _request_repair(step: PlanStep, exc: Exception, registry, backend):
    data = {"request": "repair", "tool": step.tool,
            "error": f"{type(exc).__name__}: {exc}"}
    context = (f"Step {step.tool} failed: {type(exc).__name__}: {exc}\n"
               f"Known tools: {', '.join(sorted(registry.names()))}\n"
               f"DATA: {json.dumps(data, sort_keys=True)}")
    raw = backend.act(context, "STEP <tool> <json args> :: <rationale>")
    line = raw.strip()
    if not line.startswith("STEP "):
        return None
    try:
        steps = parse_plan_text(f"PLAN\n{line}\nEND")
    except (ValueError, json.JSONDecodeError):
        return None
    if not steps or steps[0].tool not in registry:
        return None
    return steps[0]


# -- gain tuning loop -----------------------------------------------------------

REACT_SCHEMA = ("ACTION: set_gains g1,g2,g3,g4,g5,g6\n"
                "or\nACTION: finish")


def parse_react_action(raw: str):
    """Strict action grammar; returns ('finish', None), ('set_gains', list),
    or None when malformed."""
    text = raw.strip()
    if text == "ACTION: finish":
        return ("finish", None)
    prefix = "ACTION: set_gains "
    if not text.startswith(prefix):
        return None
    parts = [p.strip() for p in text[len(prefix):].split(",")]
    if len(parts) != 6:
        return None
    vals = []
    for p in parts:
        try:
            v = float(p)
        except ValueError:
            return None
        if v != v or v in (float("inf"), float("-inf")):
            return None
        vals.append(v)
    return ("set_gains", vals)


def react_optimize(env, backend, max_iters: int = 20,
                   init: GainConfig | None = None, log=None
                   ) -> OptimizerReport:
    """Iterative tune loop: history in, one action out, observation appended.

    Runs until the backend finishes or max_iters evaluations are spent
    (normal completion). Malformed actions are re-prompted; three consecutive
    strikes abort. Out-of-bounds gains are reported back and never applied.
    """
    import time

    t0 = time.perf_counter()
    if init is None:
        init = GainConfig(tuple(env.initial_gains), tuple(env.initial_tilts))
    value = env.evaluate(init)
    history = [{"gains": list(init.gains), "tilts": list(init.tilts),
                "value": value}]
    trace = [ObjectiveSample(init, value, tick=getattr(env, "tick", 0))]
    notes = []
    strikes = 0
    iters = 0
    lo, hi = env.gain_bounds
    while iters < max_iters:
        data = {"request": "react", "history": history,
                "gain_bounds": list(env.gain_bounds),
                "tilt_bounds": list(env.tilt_bounds)}
        context = "\n".join(
            [f"Gain tuning, evaluation {len(history)} "
             f"(bounds {lo}..{hi} dB per amplifier)."]
            + [f"NOTE: {n}" for n in notes]
            + [f"DATA: {json.dumps(data, sort_keys=True)}"])
        raw = backend.act(context, REACT_SCHEMA)
        if log is not None:
            log(raw)
        parsed = parse_react_action(raw)
        if parsed is None:
            strikes += 1
            if strikes >= 3:
                raise MalformedAction(
                    "backend produced 3 malformed actions in a row", raw=raw)
            notes.append(f"malformed action rejected: {raw!r}")
            continue
        strikes = 0
        kind, gains = parsed
        if kind == "finish":
            break
        if any(g < lo or g > hi for g in gains):
            notes.append(f"bounds violation, config not applied: {gains}")
            iters += 1
            continue
        cfg = GainConfig(tuple(gains), init.tilts)
        value = env.evaluate(cfg)
        history.append({"gains": list(cfg.gains), "tilts": list(cfg.tilts),
                        "value": value})
        trace.append(ObjectiveSample(cfg, value,
                                     tick=getattr(env, "tick", len(trace))))
        iters += 1
    return _report(trace, t0)


# -- localization ------------------------------------------------------------

def _window_digest(evidence: dict) -> list:
    window = []
    for rec in evidence.get("window", []):
        window.append({
            "osc_alive": [bool(v) for v in rec["osc_alive"]],
            "amp_in_dbm": [float(v) for v in rec["amp_in_dbm"]],
            "amp_out_dbm": [float(v) for v in rec["amp_out_dbm"]],
        })
    return window


def _has_los_signature(evidence: dict, window: list) -> bool:
    if any(a.get("kind") == "los" for a in evidence.get("alarms", [])):
        return True
    return any(not all(rec["osc_alive"]) for rec in window)


def _measured_excess(window: list, span_id: int, budget: float) -> float:
    recent = window[-5:]
    losses = [rec["amp_out_dbm"][span_id] - rec["amp_in_dbm"][span_id + 1]
              for rec in recent]
    return statistics.median(losses) - budget


_LOC_SCHEMA = ("ACTION: localize span=<int> kind=<Cut|Aging> [excess=<dB>]\n"
               "or\nACTION: localize none")


def parse_localize_action(raw: str):
    text = raw.strip()
    if text == "ACTION: localize none":
        return ("none", None, None, None)
    prefix = "ACTION: localize "
    if not text.startswith(prefix):
        return None
    fields = {}
    for tok in text[len(prefix):].split():
        if "=" not in tok:
            return None
        key, val = tok.split("=", 1)
        fields[key] = val
    if "span" not in fields or "kind" not in fields:
        return None
    try:
        span = int(fields["span"])
    except ValueError:
        return None
    kind = fields["kind"]
    if kind not in ("Cut", "Aging"):
        return None
    excess = None
    if "excess" in fields:
        try:
            excess = float(fields["excess"])
        except ValueError:
            return None
    return ("claim", span, kind, excess)


def localize_failure(evidence: dict, backend) -> Localization:
    """Ask the backend where the failure is, then verify the claim.

    A Cut claim needs a loss-of-signal signature in the evidence; claims that
    fail the cross-check get one re-prompt and then LocalizationFailed.
    """
    window = _window_digest(evidence)
    n_spans = len(window[-1]["osc_alive"]) if window else 0
    budget = float(evidence.get("budget_db", SPAN_LOSS_BUDGET_DB))
    threshold = float(evidence.get("threshold_db", SPAN_LOSS_THRESHOLD_DB))
    data = {"request": "localize", "window": window, "budget_db": budget,
            "threshold_db": threshold,
            "has_los_alarm": any(a.get("kind") == "los"
                                 for a in evidence.get("alarms", []))}
    chunk_titles = [c.get("title", "") for c in evidence.get("chunks", [])]
    context = "\n".join(
        ["Localize the failing fiber section from the evidence."]
        + [f"DOC: {t}" for t in chunk_titles]
        + [f"LOG: {ln}" for ln in evidence.get("logs", [])[-10:]]
        + [f"DATA: {json.dumps(data, sort_keys=True)}"])
    last_raw = ""
    for attempt in range(2):
        raw = backend.act(context, _LOC_SCHEMA)
        last_raw = raw
        parsed = parse_localize_action(raw)
        if parsed is not None:
            state, span, kind, excess = parsed
            if state == "none":
                raise LocalizationFailed("backend found no anomaly")
            if 0 <= span < n_spans:
                if kind == "Cut" and _has_los_signature(evidence, window):
                    return Localization(span, "Cut", 0.0, raw)
                if kind == "Aging":
                    measured = _measured_excess(window, span, budget) \
                        if window else excess
                    if measured is not None and measured > threshold:
                        return Localization(span, "Aging", float(measured),
                                            raw)
        context += (f"\nRejected answer {raw!r}: inconsistent with telemetry. "
                    "Answer again using the schema.")
    raise LocalizationFailed(
        f"no telemetry-consistent localization (last answer: {last_raw!r})")


# -- recovery -----------------------------------------------------------------

def generate_recovery(localization: Localization, twin, state) -> Plan:
    """Recovery plan: compensate (Aging) or hold for repair (Cut), then
    refine gains and resynchronize the model."""
    steps = []
    if localization.kind == "Aging":
        amp = localization.span_id + 1
        current = float(state.gains_db()[amp])
        proposed = min(RECOVERY_GAIN_CAP_DB,
                       current + localization.excess_db)
        steps.append(PlanStep(
            "set-gain", {"amp": amp, "gain_db": proposed},
            f"compensate {localization.excess_db:.2f} dB excess loss on "
            f"section {localization.span_id} (clamped to "
            f"{RECOVERY_GAIN_CAP_DB:.0f} dB)"))
    else:
        steps.append(PlanStep(
            "wait-for-repair", {"span": localization.span_id},
            "link is dark; no gain changes until the repair clears"))
    steps.append(PlanStep("optimize-power", {"method": "coordinate_ascent"},
                          "refine all gains after the corrective action"))
    steps.append(PlanStep("sync-twin", {},
                          "resynchronize the link model with live telemetry"))
    return Plan(steps=steps, task_kind=f"recovery-{localization.kind}",
                source="generated")
