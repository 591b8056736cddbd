"""Fixed-lag MAP smoother over SE(3) states: prior, odometry and map factors.

Residual convention (fixed globally): for a pose measurement m of a predicted
pose p, r = log(m^-1 o p) with the product-manifold log ([rotation, translation]
tangent order). Factor Jacobians are analytic in the retraction coordinates;
Gauss-Newton solves the stacked whitened system with a dense Cholesky, which
is ample at lags <= 100.

Sliding the window marginalizes the states older than the lag: the factors
that only touch removed states (and the oldest retained, "boundary", state)
are linearized at the current estimates and Schur-complemented onto the
boundary, producing the new prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import (
    Pose6,
    compose,
    inverse,
    log_map,
    retract,
    skew,
    so3_left_jacobian_inv,
    so3_log,
    so3_right_jacobian_inv,
)


class GaugeError(RuntimeError):
    """Optimization requested on a graph with no prior (gauge freedom)."""


class GraphStructureError(RuntimeError):
    """Factor references a missing or out-of-window state."""


class IndefiniteSystemError(RuntimeError):
    """The normal equations are not positive definite."""


@dataclass
class StateNode:
    node_id: int
    pose: Pose6
    timestamp: float = 0.0


@dataclass
class PriorFactor:
    node: int
    pose: Pose6
    information: np.ndarray


@dataclass
class OdomFactor:
    from_node: int
    to_node: int
    measurement: Pose6
    information: np.ndarray


@dataclass
class MapFactor:
    node: int
    measurement: Pose6
    information: np.ndarray
    fitness: float = 1.0


def pose_residual(measurement: Pose6, predicted: Pose6) -> np.ndarray:
    return log_map(compose(inverse(measurement), predicted))


def unary_pose_terms(measurement: Pose6, x: Pose6):
    """Residual and Jacobian of r = log(m^-1 o x) w.r.t. x's retraction coords."""
    phi = so3_log(measurement.r.T @ x.r)
    r = np.concatenate([phi, measurement.r.T @ (x.t - measurement.t)])
    J = np.zeros((6, 6))
    J[:3, :3] = so3_right_jacobian_inv(phi)
    J[3:, 3:] = measurement.r.T
    return r, [J]


def odometry_terms(measurement: Pose6, xk: Pose6, xk1: Pose6):
    """Residual r = log(m^-1 o xk^-1 o xk1) and Jacobians w.r.t. (xk, xk1)."""
    Rm_t = measurement.r.T
    v = xk.r.T @ (xk1.t - xk.t)  # relative translation in xk's frame
    phi = so3_log(Rm_t @ xk.r.T @ xk1.r)
    r = np.concatenate([phi, Rm_t @ (v - measurement.t)])
    Jk = np.zeros((6, 6))
    Jk[:3, :3] = -so3_left_jacobian_inv(phi) @ Rm_t
    Jk[3:, :3] = Rm_t @ skew(v)
    Jk[3:, 3:] = -Rm_t @ xk.r.T
    Jk1 = np.zeros((6, 6))
    Jk1[:3, :3] = so3_right_jacobian_inv(phi)
    Jk1[3:, 3:] = Rm_t @ xk.r.T
    return r, [Jk, Jk1]


def _check_spd(info):
    info = np.asarray(info, dtype=float).reshape(6, 6)
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError("factor information matrix is not SPD") from exc
    return info


@dataclass
class Graph:
    lag: int = 25
    nodes: dict = field(default_factory=dict)
    prior: PriorFactor | None = None
    odom_factors: list = field(default_factory=list)
    map_factors: list = field(default_factory=list)
    _marginals: dict = field(default_factory=dict)

    def window_ids(self):
        return sorted(self.nodes)

    def estimate(self, node_id) -> Pose6:
        return self.nodes[node_id].pose

    def add_prior(self, node_id, pose: Pose6, information, timestamp=0.0):
        information = _check_spd(information)
        if self.prior is not None:
            raise GraphStructureError("graph already has an active prior")
        if node_id not in self.nodes:
            self.nodes[node_id] = StateNode(node_id, pose, timestamp)
        self.prior = PriorFactor(node_id, pose, information)

    def add_odom_factor(self, from_node, measurement: Pose6, covariance, timestamp=0.0):
        """Creates the successor state, dead-reckoned from the current estimate."""
        if from_node not in self.nodes:
            raise GraphStructureError(f"odometry from unknown state {from_node}")
        information = _check_spd(np.linalg.inv(np.asarray(covariance, dtype=float)))
        to_node = from_node + 1
        init = compose(self.nodes[from_node].pose, measurement)
        self.nodes[to_node] = StateNode(to_node, init, timestamp)
        self.odom_factors.append(OdomFactor(from_node, to_node, measurement, information))
        return to_node

    def add_map_factor(self, factor: MapFactor):
        if factor.node not in self.nodes:
            raise GraphStructureError(
                f"map factor on state {factor.node} outside the current window")
        _check_spd(factor.information)
        self.map_factors.append(factor)

    # -- optimization -----------------------------------------------------

    def _factor_blocks(self):
        """(terms_fn, [node ids], information) per factor; terms_fn maps the
        connected poses to (residual, [Jacobian per node])."""
        out = []
        if self.prior is not None:
            p = self.prior
            out.append((lambda xs, p=p: unary_pose_terms(p.pose, xs[0]),
                        [p.node], p.information))
        for f in self.odom_factors:
            out.append((lambda xs, f=f: odometry_terms(f.measurement, xs[0], xs[1]),
                        [f.from_node, f.to_node], f.information))
        for f in self.map_factors:
            out.append((lambda xs, f=f: unary_pose_terms(f.measurement, xs[0]),
                        [f.node], f.information))
        return out

    def _linearize(self, factors, estimates, index):
        n = len(index)
        H = np.zeros((6 * n, 6 * n))
        b = np.zeros(6 * n)
        cost = 0.0
        for terms_fn, node_ids, W in factors:
            xs = [estimates[i] for i in node_ids]
            r, Js = terms_fn(xs)
            cost += float(r @ W @ r)
            for a, ida in enumerate(node_ids):
                ia = index[ida] * 6
                b[ia:ia + 6] += Js[a].T @ W @ r
                for c, idc in enumerate(node_ids):
                    ic = index[idc] * 6
                    H[ia:ia + 6, ic:ic + 6] += Js[a].T @ W @ Js[c]
        return H, b, cost

    def optimize(self, max_iterations: int = 50, step_tol: float = 1e-8):
        """Gauss-Newton over the window; returns estimates and caches marginals."""
        if self.prior is None:
            raise GaugeError("cannot optimize without a prior factor")
        ids = self.window_ids()
        index = {nid: i for i, nid in enumerate(ids)}
        factors = self._factor_blocks()
        estimates = {nid: self.nodes[nid].pose for nid in ids}
        converged = False
        H = None
        for _ in range(max_iterations):
            H, b, _ = self._linearize(factors, estimates, index)
            try:
                L = np.linalg.cholesky(H)
            except np.linalg.LinAlgError as exc:
                raise IndefiniteSystemError("normal equations not positive definite") from exc
            delta = np.linalg.solve(L.T, np.linalg.solve(L, -b))
            for nid in ids:
                estimates[nid] = retract(estimates[nid], delta[index[nid] * 6:index[nid] * 6 + 6])
            if np.linalg.norm(delta) < step_tol:
                converged = True
                break
        for nid in ids:
            self.nodes[nid].pose = estimates[nid]
        H, _, _ = self._linearize(factors, estimates, index)
        cov = np.linalg.inv(H)
        self._marginals = {
            nid: cov[index[nid] * 6:index[nid] * 6 + 6, index[nid] * 6:index[nid] * 6 + 6]
            for nid in ids}
        return estimates, converged

    def marginal(self, node_id) -> np.ndarray:
        if node_id not in self._marginals:
            self.optimize()
        return self._marginals[node_id]

    # -- fixed-lag marginalization ----------------------------------------

    def slide_window(self, lag=None):
        """Marginalize states older than the window into a prior on the boundary."""
        lag = self.lag if lag is None else lag
        if lag < 2:
            raise ValueError("lag must be >= 2")
        ids = self.window_ids()
        if len(ids) <= lag:
            return
        removed = set(ids[:-lag])
        boundary = ids[-lag]
        involved = sorted(removed) + [boundary]
        index = {nid: i for i, nid in enumerate(involved)}

        sub_factors = []
        if self.prior is not None and self.prior.node in removed:
            p = self.prior
            sub_factors.append((lambda xs, p=p: unary_pose_terms(p.pose, xs[0]),
                                [p.node], p.information))
            self.prior = None
        keep_odom = []
        for f in self.odom_factors:
            if f.from_node in removed or f.to_node in removed:
                sub_factors.append((
                    lambda xs, f=f: odometry_terms(f.measurement, xs[0], xs[1]),
                    [f.from_node, f.to_node], f.information))
            else:
                keep_odom.append(f)
        keep_map = []
        for f in self.map_factors:
            if f.node in removed:
                sub_factors.append((lambda xs, f=f: unary_pose_terms(f.measurement, xs[0]),
                                    [f.node], f.information))
            else:
                keep_map.append(f)

        estimates = {nid: self.nodes[nid].pose for nid in involved}
        H, b, _ = self._linearize(sub_factors, estimates, index)
        nb = index[boundary] * 6
        rr = np.delete(np.arange(6 * len(involved)), np.arange(nb, nb + 6))
        Hrr = H[np.ix_(rr, rr)]
        Hrb = H[np.ix_(rr, range(nb, nb + 6))]
        Hbb = H[nb:nb + 6, nb:nb + 6]
        br = b[rr]
        bb = b[nb:nb + 6]
        sol = np.linalg.solve(Hrr, np.column_stack([Hrb, br]))
        Hbb_marg = Hbb - Hrb.T @ sol[:, :6]
        bb_marg = bb - Hrb.T @ sol[:, 6]
        Hbb_marg = 0.5 * (Hbb_marg + Hbb_marg.T)
        mean = retract(self.nodes[boundary].pose,
                       -np.linalg.solve(Hbb_marg, bb_marg))
        for nid in removed:
            del self.nodes[nid]
            self._marginals.pop(nid, None)
        self.odom_factors = keep_odom
        self.map_factors = keep_map
        self.prior = PriorFactor(boundary, mean, Hbb_marg)

    # -- robustness gate ----------------------------------------------------

    def gate_map_factor(self, candidate: MapFactor, quantile: float = 0.999) -> bool:
        """Chi-square consistency check of a candidate against the current belief."""
        if candidate.node not in self.nodes:
            raise GraphStructureError(f"unknown state {candidate.node}")
        est = self.nodes[candidate.node].pose
        r = pose_residual(candidate.measurement, est)
        lam = np.linalg.inv(np.asarray(candidate.information, dtype=float))
        S = lam + self.marginal(candidate.node)
        m2 = float(r @ np.linalg.solve(S, r))
        return m2 <= chi2.ppf(quantile, df=6)
