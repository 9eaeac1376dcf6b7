"""Calibrated software replica of the link.

The twin re-runs the physics with two groups of unknowns replaced by
estimates: per-span extra loss (4 values, init 0) and per-amplifier noise
figure (6 values, init 5.0). Estimation is damped Gauss-Newton /
Levenberg-Marquardt over telemetry residuals: per-amplifier total input and
output powers in dBm plus per-real-channel Q in dB, all weighted equally.

The Jacobian is analytic. Derivatives of the per-channel signal, ASE and NLI
accumulators are propagated forward through the chain in the exact operation
order of the value kernels:

  d(span loss factor)/d(extra)  = f * (-ln10/10)
  d(ASE added by amp a)/d(nf_a) = ase_add * (ln10/10)
  d(NLI added by span)          = 3 * C * P_in^2 * dP_in
  d(dBm)/dP                     = (10/ln10) / P
  d(Q)/d(.)                     = (10/ln10) * (dsig/sig - dnoise/noise)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, physics

LN10_OVER_10 = math.log(10.0) / 10.0
TEN_OVER_LN10 = 10.0 / math.log(10.0)

EXTRA_RANGE = (0.0, 20.0)
NF_RANGE = (3.0, 10.0)
N_PARAMS = 10  # 4 extra losses + 6 noise figures


class InsufficientData(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class SingularUpdate(RuntimeError):
    pass


@dataclass
class TwinParameters:
    extra_loss_db: np.ndarray = field(
        default_factory=lambda: np.zeros(4))
    nf_db: np.ndarray = field(
        default_factory=lambda: np.full(6, 5.0))

    def __post_init__(self):
        self.extra_loss_db = np.asarray(self.extra_loss_db, float).copy()
        self.nf_db = np.asarray(self.nf_db, float).copy()
        self.clamp()

    def clamp(self):
        np.clip(self.extra_loss_db, *EXTRA_RANGE, out=self.extra_loss_db)
        np.clip(self.nf_db, *NF_RANGE, out=self.nf_db)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.extra_loss_db, self.nf_db])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "TwinParameters":
        theta = np.asarray(theta, float)
        return cls(extra_loss_db=theta[:4], nf_db=theta[4:])

    def copy(self) -> "TwinParameters":
        return TwinParameters(self.extra_loss_db.copy(), self.nf_db.copy())

    def to_json(self) -> dict:
        return {"schema": 1,
                "extra_loss_db": [float(v) for v in self.extra_loss_db],
                "nf_db": [float(v) for v in self.nf_db]}

    @classmethod
    def from_json(cls, obj: dict) -> "TwinParameters":
        if obj.get("schema") != 1:
            raise ValueError("unknown twin schema")
        return cls(np.array(obj["extra_loss_db"]), np.array(obj["nf_db"]))


@dataclass
class FitReport:
    iterations: int
    residual_rmse: float
    parameter_deltas: np.ndarray
    converged: bool
    message: str = ""


def _usable(record) -> bool:
    """Fit on healthy-link records only: the clamps around a cut are not
    differentiable and carry no parameter information."""
    return bool(record.osc_alive.all()) and not np.isnan(record.q_db).all()


class DigitalTwin:
    """Twin parameters bound to a nominal link template and launch plan."""

    def __init__(self, link_template: physics.LinkTopology,
                 launch_dbm: float = -20.0, kappa_db: float = 0.0,
                 params: TwinParameters | None = None):
        self.link = link_template
        self.launch_dbm = launch_dbm
        self.kappa_db = kappa_db
        self.params = params if params is not None else TwinParameters()

    # -- prediction ---------------------------------------------------------
    def predict(self, config=None, active=None, gains_db=None, tilts_db=None
                ) -> physics.LinkSnapshot:
        """Pure noiseless prediction under the current estimates."""
        grid = self.link.grid
        if active is not None:
            grid = grid.copy()
            grid.active = np.asarray(active, bool).copy()
            grid.is_real = grid.is_real & grid.active
        link = physics.LinkTopology(self.link.spans, self.link.amplifiers,
                                    grid, self.link.constants)
        if config is not None:
            gains_db = np.asarray(config.gains, float)
            tilts_db = np.asarray(config.tilts, float)
        if gains_db is None:
            gains_db = np.array([a.gain_db for a in link.amplifiers])
        if tilts_db is None:
            tilts_db = np.array([a.tilt_db for a in link.amplifiers])
        launch = np.zeros(grid.slot_count)
        launch[grid.active] = 10.0 ** (self.launch_dbm / 10.0) * 1e-3
        return physics.transmit_arrays(
            link, launch, gains_db, tilts_db, self.params.nf_db,
            self.params.extra_loss_db, np.zeros(4, bool), self.kappa_db)

    def min_q_of(self, gains_db, tilts_db, active, real) -> float:
        snap = self.predict(active=active, gains_db=gains_db, tilts_db=tilts_db)
        q = snap.q_db[np.asarray(real, bool)]
        q = q[~np.isnan(q)]
        return float(q.min()) if q.size else float("nan")

    # -- residuals ------------------------------------------------------------
    def _groups(self, records):
        """Group usable records by (config, active set) for vectorized eval."""
        groups = {}
        for rec in records:
            if not _usable(rec):
                continue
            active = ~np.isnan(rec.rx_dbm)
            key = (tuple(np.round(rec.gains_db, 9)),
                   tuple(np.round(rec.tilts_db, 9)),
                   active.tobytes())
            groups.setdefault(key, []).append(rec)
        return groups

    def residuals_and_jacobian(self, records, theta: np.ndarray | None = None
                               ) -> tuple:
        """Residual vector r = observed - predicted and J = d pred/d theta.

        theta defaults to the current parameter vector. Returns (r, J) with
        J shaped (len(r), 10).
        """
        if theta is None:
            theta = self.params.vector()
        extras = np.asarray(theta[:4], float)
        nfs = np.asarray(theta[4:], float)
        res_parts = []
        jac_parts = []
        for (gains, tilts, active_b), recs in self._groups(records).items():
            gains = np.array(gains)
            tilts = np.array(tilts)
            active = np.frombuffer(active_b, dtype=bool)
            pred, dpred = self._predict_with_grad(gains, tilts, active,
                                                  extras, nfs)
            amp_pred, q_pred = pred
            amp_grad, q_grad = dpred
            for rec in recs:
                obs_amp = np.concatenate([rec.amp_in_dbm, rec.amp_out_dbm])
                res_parts.append(obs_amp - amp_pred)
                jac_parts.append(amp_grad)
                meas = ~np.isnan(rec.q_db)
                qi = self._q_index(active, meas)
                res_parts.append(rec.q_db[meas] - q_pred[qi])
                jac_parts.append(q_grad[qi])
        if not res_parts:
            raise InsufficientData("no usable records")
        return np.concatenate(res_parts), np.vstack(jac_parts)

    @staticmethod
    def _q_index(active: np.ndarray, measured: np.ndarray) -> np.ndarray:
        """Positions of measured slots within the active-slot q vector."""
        idx_by_slot = np.cumsum(active) - 1
        return idx_by_slot[measured]

    def _predict_with_grad(self, gains, tilts, active, extras, nfs):
        """Forward chain with value states (via the kernels) and derivative
        states (numpy, same operation order)."""
        grid = self.link.grid.copy()
        grid.active = active.copy()
        grid.is_real = grid.is_real & active
        link = physics.LinkTopology(self.link.spans, self.link.amplifiers,
                                    grid, self.link.constants)
        launch = np.zeros(grid.slot_count)
        launch[active] = 10.0 ** (self.launch_dbm / 10.0) * 1e-3
        cuts = np.zeros(4, bool)
        inputs = physics.chain_inputs(link, launch, gains, tilts, nfs,
                                      extras, cuts)
        launch_w, glin, ase_add, span_f, span_c = inputs
        sig, ase, nli = kernels.chain_states(*inputs)

        c = grid.slot_count
        n = kernels.N_STATES
        dsig = np.zeros((n, N_PARAMS, c))
        dase = np.zeros((n, N_PARAMS, c))
        dnli = np.zeros((n, N_PARAMS, c))
        d_ase_add = ase_add * LN10_OVER_10  # w.r.t. the amp's own nf
        d_span_f = span_f * (-LN10_OVER_10)  # w.r.t. the span's own extra

        def amp(a, src, dst):
            dsig[dst] = dsig[src] * glin[a]
            dase[dst] = dase[src] * glin[a]
            dase[dst, 4 + a] += d_ase_add[a]
            dnli[dst] = dnli[src] * glin[a]

        def span(s, src, dst):
            pin = sig[src]
            dpin = dsig[src]
            dsig[dst] = dsig[src] * span_f[s]
            dsig[dst, s] += pin * d_span_f[s]
            dase[dst] = dase[src] * span_f[s]
            dase[dst, s] += ase[src] * d_span_f[s]
            dnli[dst] = dnli[src] * span_f[s] + 3.0 * span_c[s] * pin * pin * dpin
            dnli[dst, s] += nli[src] * d_span_f[s]

        amp(0, 0, 1)
        idx = 1
        for s in range(4):
            span(s, idx, idx + 1)
            amp(s + 1, idx + 1, idx + 2)
            idx += 2
        amp(5, 9, 10)

        tot = sig + ase + nli
        dtot = dsig + dase + dnli
        stage_t = np.sum(tot[:, active], axis=1)
        stage_dt = np.sum(dtot[:, :, active], axis=2)
        states = list(kernels.AMP_IN_STATE) + list(kernels.AMP_OUT_STATE)
        amp_pred = 10.0 * np.log10(stage_t[states] * 1e3)
        amp_grad = TEN_OVER_LN10 * stage_dt[states] / stage_t[states, None]

        noise = ase[10][active] + nli[10][active]
        s10 = sig[10][active]
        q_pred = 10.0 * np.log10(s10 / noise) - self.kappa_db
        dnoise = dase[10][:, active] + dnli[10][:, active]
        q_grad = TEN_OVER_LN10 * (dsig[10][:, active] / s10 - dnoise / noise)
        return (amp_pred, q_pred), (amp_grad.copy(), q_grad.T.copy())

    # -- estimation -----------------------------------------------------------
    def fit(self, records, max_iters: int = 200, tol_db: float = 1e-4,
            lam0: float = 1e-3) -> FitReport:
        """Levenberg-Marquardt over the mixed power/Q residuals."""
        usable = [r for r in records if _usable(r)]
        if len(usable) < 20:
            raise InsufficientData(
                f"need >= 20 usable records, have {len(usable)}")
        configs = {(tuple(np.round(r.gains_db, 9)), tuple(np.round(r.tilts_db, 9)))
                   for r in usable}
        theta0 = self.params.vector()
        if len(configs) < 2:
            return FitReport(iterations=0, residual_rmse=float("nan"),
                             parameter_deltas=np.zeros(N_PARAMS),
                             converged=False,
                             message="only one gain config in the data; "
                                     "parameters are not identifiable")

        theta = theta0.copy()
        lam = lam0
        r, jac = self.residuals_and_jacobian(usable, theta)
        cost = float(r @ r)
        iters = 0
        converged = False
        for iters in range(1, max_iters + 1):
            jtj = jac.T @ jac
            jtr = jac.T @ r
            stepped = False
            cand_step_inf = float("inf")
            while lam <= 1e8:
                try:
                    delta = np.linalg.solve(
                        jtj + lam * np.diag(np.diag(jtj))
                        + 1e-12 * np.eye(N_PARAMS), jtr)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand = self._clamp_vec(theta + delta)
                cand_step_inf = float(np.max(np.abs(cand - theta)))
                r_new, jac_new = self.residuals_and_jacobian(usable, cand)
                if float(r_new @ r_new) < cost:
                    theta, r, jac = cand, r_new, jac_new
                    cost = float(r_new @ r_new)
                    lam = max(lam / 10.0, 1e-12)
                    stepped = True
                    break
                lam *= 10.0
            if not stepped:
                # At a (possibly clamped) minimum every damped step is
                # rejected and the candidate steps shrink toward zero;
                # anything else is a genuine numerical failure.
                if cand_step_inf < tol_db:
                    converged = True
                    break
                raise SingularUpdate(
                    "damping escalation exhausted without a descent step")
            if cand_step_inf < tol_db:
                converged = True
                break
        self.params = TwinParameters.from_vector(theta)
        rmse = math.sqrt(cost / r.shape[0])
        return FitReport(iterations=iters, residual_rmse=rmse,
                         parameter_deltas=theta - theta0,
                         converged=converged)

    @staticmethod
    def _clamp_vec(theta: np.ndarray) -> np.ndarray:
        out = theta.copy()
        out[:4] = np.clip(out[:4], *EXTRA_RANGE)
        out[4:] = np.clip(out[4:], *NF_RANGE)
        return out

    def rmse(self, records) -> float:
        """Root mean square predicted-minus-observed Q over real channels."""
        total = 0.0
        count = 0
        for rec in records:
            if not _usable(rec):
                continue
            active = ~np.isnan(rec.rx_dbm)
            snap = self.predict(active=active, gains_db=rec.gains_db,
                                tilts_db=rec.tilts_db)
            meas = ~np.isnan(rec.q_db)
            err = snap.q_db[meas] - rec.q_db[meas]
            total += float(np.sum(err * err))
            count += int(meas.sum())
        if count == 0:
            raise EmptyDataset("no measurable Q records")
        return math.sqrt(total / count)

    def sync(self, record, max_step_db: float = 0.2, lam: float = 1.0
             ) -> float:
        """One damped Gauss-Newton step from a single record; returns the
        infinity norm of the applied step."""
        if not _usable(record):
            return 0.0
        r, jac = self.residuals_and_jacobian([record])
        jtj = jac.T @ jac
        delta = np.linalg.solve(jtj + lam * np.eye(N_PARAMS), jac.T @ r)
        delta = np.clip(delta, -max_step_db, max_step_db)
        self.params = TwinParameters.from_vector(
            self._clamp_vec(self.params.vector() + delta))
        return float(np.max(np.abs(delta)))

    # -- persistence ----------------------------------------------------------
    def save_params(self, path):
        with open(path, "w") as fh:
            json.dump(self.params.to_json(), fh, indent=2, sort_keys=True)

    @staticmethod
    def load_params(path) -> TwinParameters:
        with open(path) as fh:
            return TwinParameters.from_json(json.load(fh))
