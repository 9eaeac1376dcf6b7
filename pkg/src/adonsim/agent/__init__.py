"""Autonomous operation: mode selection, planning, retrieval, backends."""

from .modes import OperationMode, UnknownEventKind, select_mode, DEFAULT_MODE_TABLE
from .retrieval import DocumentStore, Document, RetrievedChunk, EmptyStore, \
    builtin_store, retrieve
from .backends import LlmBackend, ScriptedPolicy, RemoteChat
from .planner import (Task, Plan, PlanStep, ToolCall, Observation, Transcript,
                      ToolRegistry, Localization, PlanRejected,
                      ExecutionAborted, MalformedAction, LocalizationFailed,
                      RuleWorkflows, WORKFLOWS, plan, execute_plan,
                      react_optimize, localize_failure, generate_recovery,
                      parse_plan_text, parse_react_action)

__all__ = [
    "OperationMode", "UnknownEventKind", "select_mode", "DEFAULT_MODE_TABLE",
    "DocumentStore", "Document", "RetrievedChunk", "EmptyStore",
    "builtin_store", "retrieve",
    "LlmBackend", "ScriptedPolicy", "RemoteChat",
    "Task", "Plan", "PlanStep", "ToolCall", "Observation", "Transcript",
    "ToolRegistry", "Localization", "PlanRejected", "ExecutionAborted",
    "MalformedAction", "LocalizationFailed", "RuleWorkflows", "WORKFLOWS",
    "plan", "execute_plan", "react_optimize", "localize_failure",
    "generate_recovery", "parse_plan_text", "parse_react_action",
]
