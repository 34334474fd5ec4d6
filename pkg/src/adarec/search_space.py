"""Candidate operations, the shared DAG cell and the student supernet.

A cell has an input node 0 and ``M`` intermediate nodes; every pair ``i < j``
carries an edge whose operation is chosen from :data:`OPS`. Intermediate node
``j`` sums its incoming edges, and the cell output is an attention-weighted sum
of the intermediate nodes. All ``K`` student blocks share one set of
architecture logits but own their operation weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ForwardOutput, Model, constant, normal, padding_mask

OPS = ("std_cnn_3", "std_cnn_5", "cau_cnn_3", "cau_cnn_5", "max_pool_3", "avg_pool_3", "skip", "zero")
OP_INDEX = {name: i for i, name in enumerate(OPS)}
CONV_OPS = tuple(op for op in OPS if "cnn" in op)
MODES = ("soft", "straight_through", "discrete")


def kernel_size(op: str) -> int:
    return int(op.rsplit("_", 1)[1])


def cell_edges(m: int) -> list:
    """Edges (i, j), i < j, 1 <= j <= m, in the order (0,1), (0,2), (1,2), (0,3), ..."""
    return [(i, j) for j in range(1, m + 1) for i in range(j)]


def block_dilation(block: int) -> int:
    return 2 ** (block % 4)


@dataclass
class ArchParams:
    """Edge logits ``theta`` (edges x |OPS|) and output-attention logits (M,)."""

    theta: Tensor
    attn: Tensor
    m: int

    @classmethod
    def uniform(cls, m: int = 3) -> "ArchParams":
        n_edges = len(cell_edges(m))
        return cls(Tensor(np.zeros((n_edges, len(OPS))), requires_grad=True, name="arch.theta"),
                   Tensor(np.zeros(m), requires_grad=True, name="arch.attn"), m)

    @property
    def edges(self) -> list:
        return cell_edges(self.m)

    def parameters(self) -> list:
        return [self.theta, self.attn]

    def to_json(self) -> dict:
        return {"m": self.m, "ops": list(OPS), "theta": self.theta.data.tolist(),
                "attn": self.attn.data.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ArchParams":
        return cls(Tensor(np.array(obj["theta"]), requires_grad=True, name="arch.theta"),
                   Tensor(np.array(obj["attn"]), requires_grad=True, name="arch.attn"), obj["m"])


@dataclass
class DiscreteCell:
    m: int
    ops: list
    attn_logits: list

    @property
    def edges(self) -> list:
        return cell_edges(self.m)

    def attention_weights(self) -> np.ndarray:
        return ad.softmax(Tensor(np.asarray(self.attn_logits, dtype=np.float64))).data

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "edges": [{"from": i, "to": j, "op": op} for (i, j), op in zip(self.edges, self.ops)],
            "attn_logits": [float(a) for a in self.attn_logits],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteCell":
        m = int(obj["m"])
        by_edge = {(e["from"], e["to"]): e["op"] for e in obj["edges"]}
        if set(by_edge) != set(cell_edges(m)):
            raise ValueError("cell json does not list every edge exactly once")
        ops = [by_edge[e] for e in cell_edges(m)]
        unknown = [op for op in ops if op not in OP_INDEX]
        if unknown:
            raise ValueError(f"unknown operations {unknown}")
        return cls(m, ops, list(obj["attn_logits"]))

    def to_dot(self, name: str = "cell") -> str:
        """Graphviz rendering; zero edges are omitted."""
        lines = [f'digraph "{name}" {{', "  rankdir=LR;",
                 '  node [shape=box, style=rounded];',
                 '  n0 [label="c_{k-1}"];']
        for j in range(1, self.m + 1):
            lines.append(f'  n{j} [label="{j}", shape=circle];')
        lines.append('  out [label="c_{k}"];')
        for (i, j), op in zip(self.edges, self.ops):
            if op != "zero":
                lines.append(f'  n{i} -> n{j} [label="{op}"];')
        for j, w in enumerate(self.attention_weights(), start=1):
            lines.append(f'  n{j} -> out [style=dashed, label="{w:.3f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def gumbel_softmax(theta, tau: float, rng: np.random.Generator) -> Tensor:
    """Relaxed categorical sample ``softmax((theta + g) / tau)``, g ~ Gumbel(0, 1).

    ``theta`` holds unnormalised logits, so it equals the log of the category
    probabilities up to an additive constant that the softmax removes.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    g = rng.gumbel(size=theta.shape)
    return ad.softmax(ad.scale(ad.add(theta, g), 1.0 / tau))


def sample_edges(arch: ArchParams, tau: float, rng: Optional[np.random.Generator] = None,
                 noise: Optional[np.ndarray] = None) -> list:
    """One relaxed sample per edge, in edge order.

    ``noise`` (edges x |OPS| Gumbel draws) replays a previous sample against
    the current logits; otherwise fresh noise is drawn from ``rng``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("sample_edges needs rng or noise")
        noise = rng.gumbel(size=arch.theta.shape)
    if noise.shape != arch.theta.shape:
        raise ad.ShapeError(f"noise shape {noise.shape} vs logits {arch.theta.shape}")
    return [ad.softmax(ad.scale(ad.add(ad.index(arch.theta, e), noise[e]), 1.0 / tau))
            for e in range(len(arch.edges))]


def candidate_op_forward(kind: str, x: Tensor, weights: Optional[tuple] = None,
                         dilation: int = 1) -> Tensor:
    """Apply one candidate operation to ``x`` (batch, time, d); length is preserved."""
    if kind not in OP_INDEX:
        raise ValueError(f"unknown operation {kind!r}")
    if x.ndim != 3:
        raise ad.ShapeError(f"{kind}: expected (batch, time, channels), got {x.shape}")
    if kind in CONV_OPS:
        if weights is None:
            raise ValueError(f"{kind} needs (kernel, bias) weights")
        w, b = weights
        k = kernel_size(kind)
        if w.shape[0] != k:
            raise ad.ShapeError(f"{kind}: kernel shape {w.shape} vs size {k}")
        if kind.startswith("std"):
            half = (k - 1) // 2
            return ad.conv1d(x, w, b, dilation=1, padding=(half, half))
        return ad.conv1d(x, w, b, dilation=dilation)
    if weights is not None:
        raise ValueError(f"{kind} takes no weights")
    if kind == "max_pool_3":
        return ad.max_pool1d(x, 3)
    if kind == "avg_pool_3":
        return ad.avg_pool1d(x, 3)
    if kind == "skip":
        return x
    return Tensor(np.zeros(x.shape))


def _masked(h: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    return h if mask is None else ad.mul(h, mask)


def _node_sum(terms: list, like: Tensor) -> Tensor:
    if not terms:
        return Tensor(np.zeros(like.shape))
    acc = terms[0]
    for term in terms[1:]:
        acc = ad.add(acc, term)
    return acc


def cell_forward(x: Tensor, arch, weights: dict, mode: str = "soft", tau: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None, ys: Optional[list] = None,
                 dilation: int = 1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Evaluate one cell on ``x``.

    ``weights`` maps ``(edge_index, op)`` to ``(kernel, bias)`` for conv ops.
    ``soft`` mixes every op by its relaxed sample; ``straight_through`` uses the
    sample's argmax in the forward value and the relaxed sample for gradients;
    ``discrete`` runs the chosen op of a :class:`DiscreteCell` (or the argmax of
    :class:`ArchParams`). ``ys`` reuses an existing per-edge sample.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "discrete":
        cell = arch if isinstance(arch, DiscreteCell) else derive_architecture(arch)
        edges, m = cell.edges, cell.m
        attn = Tensor(cell.attention_weights())
        gates = None
    else:
        if not isinstance(arch, ArchParams):
            raise TypeError(f"{mode} mode needs ArchParams")
        if ys is None:
            if tau is None or rng is None:
                raise ValueError(f"{mode} mode needs tau and rng (or a sample ys)")
            ys = sample_edges(arch, tau, rng)
        edges, m = arch.edges, arch.m
        attn = ad.softmax(arch.attn)
        gates = ys if mode == "soft" else [ad.straight_through(y) for y in ys]
    nodes = [x]
    for j in range(1, m + 1):
        terms = []
        for e, (i, jj) in enumerate(edges):
            if jj != j:
                continue
            h = nodes[i]
            if gates is None:
                op = cell.ops[e]
                if op != "zero":
                    terms.append(candidate_op_forward(op, h, weights.get((e, op)), dilation))
                continue
            for o, op in enumerate(OPS):
                if op == "zero":
                    continue
                val = candidate_op_forward(op, h, weights.get((e, op)), dilation)
                terms.append(ad.mul(ad.index(gates[e], o), val))
        nodes.append(_masked(_node_sum(terms, x), mask))
    out = [ad.mul(ad.index(attn, j - 1), nodes[j]) for j in range(1, m + 1)]
    return _node_sum(out, x)


def derive_architecture(arch: ArchParams) -> DiscreteCell:
    """Per-edge argmax of the logits (lowest index wins ties)."""
    theta = arch.theta.data if isinstance(arch.theta, Tensor) else np.asarray(arch.theta)
    choice = np.argmax(theta, axis=1)
    attn = arch.attn.data if isinstance(arch.attn, Tensor) else np.asarray(arch.attn)
    return DiscreteCell(arch.m, [OPS[c] for c in choice], [float(a) for a in attn])


class StudentModel(Model):
    """Stack of ``K`` cells between an item embedding and a softmax head.

    With ``cell=None`` the model is the search supernet and carries weights for
    every conv candidate on every edge; with a :class:`DiscreteCell` it carries
    only the chosen operations. Each block computes ``lam * cell(x) + x``.
    """

    def __init__(self, n_items: int, d: int, k_blocks: int = 4, m: int = 3,
                 cell: Optional[DiscreteCell] = None, rng: Optional[np.random.Generator] = None,
                 seed: int = 0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.n_items, self.d, self.k_blocks = n_items, d, k_blocks
        self.cell = cell
        self.m = cell.m if cell is not None else m
        v = n_items + 1
        table = self.add(normal(rng, (v, d), 0.1, self.embedding_key))
        table.data[0] = 0.0
        self.block_weights = []
        self.lams = []
        for kb in range(k_blocks):
            ws = {}
            for e in range(len(cell_edges(self.m))):
                ops = CONV_OPS if cell is None else [cell.ops[e]] if cell.ops[e] in CONV_OPS else []
                for op in ops:
                    ks = kernel_size(op)
                    pre = f"block{kb}.edge{e}.{op}"
                    ws[(e, op)] = (self.add(normal(rng, (ks, d, d), 1.0 / np.sqrt(ks * d), pre + ".w")),
                                   self.add(constant(0.0, (d,), pre + ".b")))
            self.block_weights.append(ws)
            self.lams.append(self.add(constant(0.0, (), f"block{kb}.lam")))
        self.add(normal(rng, (d, v), 0.02, "out_w"))
        self.add(constant(0.0, (v,), "out_b"))

    @property
    def is_supernet(self) -> bool:
        return self.cell is None

    def forward(self, ids, rng: Optional[np.random.Generator] = None, arch: Optional[ArchParams] = None,
                mode: str = "discrete", tau: Optional[float] = None, ys: Optional[list] = None) -> ForwardOutput:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        mask = padding_mask(ids)
        layout = self.cell if self.cell is not None else arch
        if layout is None:
            raise ValueError("a supernet forward needs ArchParams")
        if mode != "discrete" and ys is None:
            ys = sample_edges(arch, tau, rng)
        h = ad.mul(ad.embedding(self.params[self.embedding_key], ids), mask)
        hidden = []
        for kb in range(self.k_blocks):
            c = cell_forward(h, layout, self.block_weights[kb], mode, tau, rng, ys,
                             dilation=block_dilation(kb), mask=mask)
            h = ad.add(ad.mul(self.lams[kb], c), h)
            hidden.append(h)
        logits = ad.add(ad.matmul(h, self.params["out_w"]), self.params["out_b"])
        return ForwardOutput(logits, hidden, self.params[self.embedding_key], mask[..., 0])

    def deployed_param_count(self, cell: Optional[DiscreteCell] = None) -> int:
        """Parameters of the discrete student: shared tables, gates and chosen ops."""
        cell = cell or self.cell
        if cell is None:
            raise ValueError("supernet has no discrete cell; pass one")
        n = sum(p.data.size for k, p in self.params.items() if not k.startswith("block"))
        n += self.k_blocks
        for kb in range(self.k_blocks):
            for e, op in enumerate(cell.ops):
                if op in CONV_OPS:
                    ks = kernel_size(op)
                    n += ks * self.d * self.d + self.d
        return int(n)


def cell_json_dump(cell: DiscreteCell) -> str:
    return json.dumps(cell.to_json(), indent=1) + "\n"
