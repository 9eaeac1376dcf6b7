"""Operation-mode selection for incoming tasks."""

from __future__ import annotations

import enum


class UnknownEventKind(KeyError):
    pass


class OperationMode(enum.Enum):
    LLM_NATIVE = "LlmNative"
    LLM_CENTRIC = "LlmCentric"
    RULE_CENTRIC = "RuleCentric"


# Wavelength changes ride the pre-defined workflow; failure handling goes to
# the reasoning path. Overridable per run (e.g. add/drop -> LlmNative).
DEFAULT_MODE_TABLE = {
    "establish-batches": OperationMode.RULE_CENTRIC,
    "set-load": OperationMode.RULE_CENTRIC,
    "qdrop": OperationMode.LLM_CENTRIC,
    "los": OperationMode.LLM_CENTRIC,
    "forecast": OperationMode.LLM_CENTRIC,
}

_BY_NAME = {m.value: m for m in OperationMode}


def parse_mode(name: str) -> OperationMode:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown operation mode {name!r}") from None


def select_mode(kind: str, table=None, backend=None) -> OperationMode:
    """Pick the mode for a task kind.

    The static table decides; when a backend is configured for selection its
    answer is validated against the known modes, with one re-prompt, before
    falling back to the table.
    """
    table = DEFAULT_MODE_TABLE if table is None else table
    if kind not in table:
        raise UnknownEventKind(kind)
    fallback = table[kind]
    if backend is None:
        return fallback
    allowed = ", ".join(sorted(_BY_NAME))
    context = (f"TASK kind={kind}\nChoose the operation mode.\n"
               f"DATA: {{\"kind\": \"{kind}\", \"default\": \"{fallback.value}\"}}")
    schema = f"ACTION: select_mode <one of: {allowed}>"
    for attempt in range(2):
        raw = backend.act(context, schema)
        text = raw.strip()
        if text.startswith("ACTION: select_mode "):
            name = text[len("ACTION: select_mode "):].strip()
            if name in _BY_NAME:
                return _BY_NAME[name]
        context += f"\nInvalid answer {raw!r}; reply exactly with the schema."
    return fallback
