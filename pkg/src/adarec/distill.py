"""Teacher-to-student distillation losses.

Three signals are matched: item embeddings (MSE after a learned projection),
output distributions (KL divergence) and hidden layers. Hidden layers of
different depth are matched many-to-many with the earth mover's distance: the
pairwise layer costs feed a transportation linear program that is solved
exactly, and the optimal flow is held fixed while gradients pass through the
costs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LayerSet:
    """Hidden layers (each batch x time x d) with normalised nonnegative weights."""

    layers: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.layers:
            raise ValueError("LayerSet needs at least one layer")
        if self.weights.shape != (len(self.layers),):
            raise ValueError(f"{len(self.layers)} layers but weights of shape {self.weights.shape}")
        if (self.weights < 0).any():
            raise ValueError("layer weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"layer weights sum to {self.weights.sum()}, expected 1")

    @classmethod
    def uniform(cls, layers: list) -> "LayerSet":
        n = len(layers)
        return cls(list(layers), np.full(n, 1.0 / n) if n else np.zeros(0))

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class Projection:
    """Learnable maps from student width to teacher width."""

    w_e: Tensor
    w_h: Tensor

    @classmethod
    def init(cls, d_student: int, d_teacher: int, rng: np.random.Generator) -> "Projection":
        std = 1.0 / np.sqrt(d_student)
        return cls(Tensor(rng.normal(0.0, std, (d_student, d_teacher)), requires_grad=True, name="proj.w_e"),
                   Tensor(rng.normal(0.0, std, (d_student, d_teacher)), requires_grad=True, name="proj.w_h"))

    def parameters(self) -> list:
        return [self.w_e, self.w_h]


@dataclass
class TransportPlan:
    """Flow between teacher layers (rows) and student layers (columns).

    ``row_duals`` / ``col_duals`` certify optimality of the balanced problem;
    when the two sides carry different mass a zero-cost dummy row or column
    absorbs the excess and its dual is the last entry.
    """

    flow: np.ndarray
    cost: np.ndarray
    row_duals: np.ndarray
    col_duals: np.ndarray
    iterations: int = 0

    @property
    def work(self) -> float:
        return float((self.flow * self.cost).sum())


class NotOptimal(RuntimeError):
    pass


def _northwest_corner(supply: np.ndarray, demand: np.ndarray) -> tuple:
    m, n = len(supply), len(demand)
    rs, rd = supply.copy(), demand.copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        x = min(rs[i], rd[j])
        flow[i, j] = x
        basis.append((i, j))
        rs[i] -= x
        rd[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or rs[i] <= rd[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _duals(cost: np.ndarray, basis: list) -> tuple:
    m, n = cost.shape
    adj: list = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in adj[a]:
            if np.isnan(pot[b]):
                i, j = (a, b - m) if a < m else (b, a - m)
                pot[b] = cost[i, j] - pot[a]
                queue.append(b)
    if np.isnan(pot).any():
        raise RuntimeError("transport basis is not a spanning tree")
    return pot[:m], pot[m:]


def _tree_path(basis: list, m: int, n: int, start: int, goal: int) -> list:
    """Cells on the basis-tree path between node ``start`` and node ``goal``."""
    adj: list = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    parent = {start: None}
    queue = deque([start])
    while queue:
        a = queue.popleft()
        if a == goal:
            break
        for b in adj[a]:
            if b not in parent:
                parent[b] = a
                queue.append(b)
    cells = []
    node = goal
    while parent[node] is not None:
        p = parent[node]
        cells.append((p, node - m) if p < m else (node, p - m))
        node = p
    return cells  # ordered from goal back to start


def _transport_simplex(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray,
                       max_iter: int = 100_000) -> tuple:
    m, n = cost.shape
    flow, basis = _northwest_corner(supply, demand)
    tol = 1e-12 * max(1.0, float(np.abs(cost).max()))
    degenerate_run = 0
    for it in range(max_iter):
        u, v = _duals(cost, basis)
        reduced = cost - u[:, None] - v[None, :]
        if reduced.min() >= -tol:
            return flow, basis, u, v, it
        if degenerate_run <= m + n:
            ei, ej = np.unravel_index(int(np.argmin(reduced)), reduced.shape)
        else:
            # Bland's lowest-index rule while stalled rules out cycling
            ei, ej = np.argwhere(reduced < -tol)[0]
        ei, ej = int(ei), int(ej)
        path = _tree_path(basis, m, n, ei, m + ej)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[c] for c in minus)
        leave = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * n + c[1])
        degenerate_run = degenerate_run + 1 if theta == 0 else 0
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        flow[leave] = 0.0
        basis.remove(leave)
        basis.append((ei, ej))
    raise NotOptimal(f"transport simplex did not converge in {max_iter} pivots")


def solve_transport(w_t, w_s, cost) -> TransportPlan:
    """Exact minimum-cost flow with row sums <= ``w_t``, column sums <= ``w_s``
    and total flow ``min(sum w_t, sum w_s)``.

    Uses the transportation simplex: northwest-corner start, dual potentials on
    the basis tree, most-negative pricing with a lowest-index fallback while
    pivots stall. Complementary slackness is checked before returning.
    """
    w_t = np.asarray(w_t, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (len(w_t), len(w_s)):
        raise ValueError(f"cost shape {cost.shape} does not match weights {len(w_t)}x{len(w_s)}")
    if (w_t < 0).any() or (w_s < 0).any():
        raise ValueError("weights must be nonnegative")
    if w_t.sum() <= 0 or w_s.sum() <= 0:
        raise ValueError("weight vectors must not be all zero")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = cost.shape
    excess = w_t.sum() - w_s.sum()
    supply, demand, padded = w_t, w_s, cost
    if excess > 0:
        demand = np.append(w_s, excess)
        padded = np.hstack([cost, np.zeros((n_rows, 1))])
    elif excess < 0:
        supply = np.append(w_t, -excess)
        padded = np.vstack([cost, np.zeros((1, n_cols))])
    flow, basis, u, v, iters = _transport_simplex(padded, supply, demand)
    certify(padded, flow, u, v)
    return TransportPlan(flow[:n_rows, :n_cols].copy(), cost, u, v, iters)


def certify(cost: np.ndarray, flow: np.ndarray, u: np.ndarray, v: np.ndarray,
            tol: float = 1e-9) -> None:
    """Raise :class:`NotOptimal` unless (flow, u, v) satisfy the optimality conditions."""
    scale = max(1.0, float(np.abs(cost).max()))
    reduced = cost - u[:, None] - v[None, :]
    if (flow < -tol).any():
        raise NotOptimal("negative flow")
    if (reduced < -tol * scale).any():
        raise NotOptimal(f"dual infeasible: min reduced cost {reduced.min():.3e}")
    slack = np.abs(reduced[flow > tol])
    if slack.size and slack.max() > tol * scale:
        raise NotOptimal(f"complementary slackness violated by {slack.max():.3e}")


def emd(plan: TransportPlan) -> float:
    """Work of the plan divided by its total flow."""
    total = plan.flow.sum()
    if total <= 0:
        raise ValueError("plan carries no flow")
    return plan.work / total


# ---------------------------------------------------------------------------
# losses


def emb_loss(e_teacher: Tensor, e_student: Tensor, w_e: Tensor) -> Tensor:
    """MSE between the teacher table and the projected student table."""
    if e_teacher.shape[0] != e_student.shape[0]:
        raise ad.ShapeError(f"emb_loss: vocabulary mismatch {e_teacher.shape} vs {e_student.shape}")
    if w_e.shape != (e_student.shape[1], e_teacher.shape[1]):
        raise ad.ShapeError(f"emb_loss: projection {w_e.shape} does not map {e_student.shape} to {e_teacher.shape}")
    return ad.mse(e_teacher, ad.matmul(e_student, w_e))


def pred_loss(z_teacher: Tensor, z_student: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """KL(teacher || student) over probability rows, averaged over unmasked positions."""
    return ad.kl_div(z_teacher, z_student, mask)


def hidden_cost_matrix(h_t: LayerSet, h_s: LayerSet, w_h: Tensor,
                       mask: Optional[np.ndarray] = None) -> Tensor:
    """(N, K) tensor of KL(softmax(H_i^T) || softmax(H_j^S W_h)), averaged over positions."""
    shapes = {layer.shape[:-1] for layer in h_t.layers} | {layer.shape[:-1] for layer in h_s.layers}
    if len(shapes) != 1:
        raise ad.ShapeError(f"hidden layers disagree on (batch, time): {sorted(shapes)}")
    p_t = [ad.softmax(layer) for layer in h_t.layers]
    p_s = [ad.softmax(ad.matmul(layer, w_h)) for layer in h_s.layers]
    rows = [ad.stack([ad.kl_div(pt, ps, mask) for ps in p_s]) for pt in p_t]
    return ad.stack(rows)


def hidden_loss(h_t: LayerSet, h_s: LayerSet, w_h: Tensor, mask: Optional[np.ndarray] = None,
                return_plan: bool = False):
    """EMD between teacher and student hidden layers with the optimal flow held constant."""
    d = hidden_cost_matrix(h_t, h_s, w_h, mask)
    plan = solve_transport(h_t.weights, h_s.weights, d.data)
    total = plan.flow.sum()
    loss = ad.scale(ad.sum(ad.mul(d, plan.flow)), 1.0 / total)
    return (loss, plan) if return_plan else loss


def kd_loss(emb, pred, hidden):
    """Unweighted sum of the three distillation terms."""
    return emb + pred + hidden


def dump_transport(path, records: list) -> None:
    """Write (cost, flow, emd) triples as json for inspecting layer mappings."""
    out = [{"cost": np.asarray(r["cost"]).tolist(), "flow": np.asarray(r["flow"]).tolist(),
            "emd": float(r["emd"])} for r in records]
    Path(path).write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")
