"""Deterministic optical-link simulator with an autonomous operations agent.

Subpackages and modules:
  physics       per-channel link model (loss, ASE, NLI, GSNR, Q)
  kernels       numba/numpy dual-backend propagation kernels
  scenario      lifecycle events, hidden ground truth, simulator state
  telemetry     noisy sampling, ring buffer, detectors, forecasting
  twin          calibrated link replica: fit, predict, score, sync
  optimize      brute force, Bayesian optimization, coordinate ascent
  envs          live and twin objective environments
  agent         mode selection, planning, retrieval, localization, ReAct
  controlplane  newline-delimited JSON config/telemetry service
  runner        end-to-end scenario orchestration and artifacts
  cli           command line entry points
"""

__version__ = "0.1.0"
