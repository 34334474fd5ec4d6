"""Deep teacher recommenders: a dilated causal CNN stack and a self-attention stack.

Both wrap each residual mapping as ``lam * F(x) + x`` with a learnable ``lam``
that starts at zero, embed items into ``d`` channels and score every item with
a linear softmax head. Padding positions are held at zero between layers so
extra leading padding never alters the representation of real items.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .nn import ForwardOutput, Model, constant, normal, padding_mask
from .objectives import TrainingDiverged, autoregressive_targets, ce_loss, iterate_batches
from .optim import AdamW

log = logging.getLogger(__name__)

FLAVORS = ("nextitnet", "sasrec")


@dataclass
class TeacherConfig:
    flavor: str = "nextitnet"
    d: int = 256
    kernel_size: int = 3
    # per-layer dilations, repeated; two conv layers form one residual block
    dilations: tuple = (1, 2, 4, 8)
    repeats: int = 8
    sa_blocks: int = 8
    n_heads: int = 4
    dropout: Optional[float] = None
    sasrec_order: str = "ffn_first"
    lr: float = 5e-3
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(x) for x in self.dilations)
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown teacher flavor {self.flavor!r}")
        if self.sasrec_order not in ("ffn_first", "attention_first"):
            raise ValueError(f"unknown sasrec_order {self.sasrec_order!r}")
        if self.flavor == "nextitnet" and (len(self.dilations) * self.repeats) % 2:
            raise ValueError("dilation schedule must have an even number of layers")
        if self.flavor == "sasrec" and self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by {self.n_heads} heads")

    @property
    def dropout_rate(self) -> float:
        if self.dropout is not None:
            return self.dropout
        return 0.1 if self.flavor == "sasrec" else 0.0

    def layer_dilations(self) -> list:
        return list(self.dilations) * self.repeats

    @property
    def n_blocks(self) -> int:
        if self.flavor == "nextitnet":
            return len(self.dilations) * self.repeats // 2
        return self.sa_blocks

    def to_json(self) -> dict:
        out = asdict(self)
        out["dilations"] = list(self.dilations)
        return out


@dataclass
class ResidualBlockParams:
    flavor: str
    weights: dict
    lam: Tensor
    dilations: tuple = ()
    n_heads: int = 1
    dropout: float = 0.0
    order: str = "ffn_first"
    extras: dict = field(default_factory=dict)


def nextitnet_block_forward(x: Tensor, params: ResidualBlockParams,
                            mask: Optional[np.ndarray] = None) -> Tensor:
    """``lam * relu(LN2(conv2(relu(LN1(conv1(x)))))) + x`` with causal dilated convs."""
    if params.flavor != "nextitnet":
        raise ValueError("nextitnet_block_forward needs a dilated-conv block")
    w = params.weights
    if x.ndim != 3 or x.shape[2] != w["ln1_g"].shape[0]:
        raise ad.ShapeError(f"block input {x.shape} does not match width {w['ln1_g'].shape[0]}")
    h = x
    for layer, dil in zip((1, 2), params.dilations):
        h = ad.conv1d(h, w[f"conv{layer}_w"], w[f"conv{layer}_b"], dilation=dil)
        h = ad.relu(ad.layer_norm(h, w[f"ln{layer}_g"], w[f"ln{layer}_b"]))
        if mask is not None:
            h = ad.mul(h, mask)
    return ad.add(ad.mul(params.lam, h), x)


def _attention_allowed(mask: Optional[np.ndarray], n: int, t: int) -> np.ndarray:
    causal = ad.causal_mask(t)
    if mask is None:
        return causal
    real = mask[..., 0] > 0
    return causal[None] & (real[:, None, :] | np.eye(t, dtype=bool)[None])


def sasrec_block_forward(x: Tensor, params: ResidualBlockParams,
                         mask: Optional[np.ndarray] = None,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """``lam * H(x) + x`` with ``H = drop(SA(LN2(drop(FFN(LN1(x))))))``.

    ``params.order == "attention_first"`` swaps in the usual attention-then-FFN order.
    ``rng`` enables dropout (training mode).
    """
    if params.flavor != "sasrec":
        raise ValueError("sasrec_block_forward needs a self-attention block")
    w = params.weights
    n, t, d = x.shape
    if d % params.n_heads:
        raise ad.ShapeError(f"width {d} not divisible by {params.n_heads} heads")
    allowed = _attention_allowed(mask, n, t)

    def ffn(h):
        h = ad.relu(ad.add(ad.matmul(h, w["ffn_w1"]), w["ffn_b1"]))
        return ad.add(ad.matmul(h, w["ffn_w2"]), w["ffn_b2"])

    def sa(h):
        q, k, v = (ad.matmul(h, w[name]) for name in ("wq", "wk", "wv"))
        return ad.matmul(ad.attention(q, k, v, params.n_heads, allowed), w["wo"])

    first, second = (ffn, sa) if params.order == "ffn_first" else (sa, ffn)
    h = ad.dropout(first(ad.layer_norm(x, w["ln1_g"], w["ln1_b"])), params.dropout, rng)
    h = ad.dropout(second(ad.layer_norm(h, w["ln2_g"], w["ln2_b"])), params.dropout, rng)
    if mask is not None:
        h = ad.mul(h, mask)
    return ad.add(ad.mul(params.lam, h), x)


class TeacherModel(Model):
    """Embedding table, residual stack and softmax head over ``n_items + 1`` ids."""

    def __init__(self, config: TeacherConfig, n_items: int, max_len: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        self.n_items = n_items
        self.max_len = max_len
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d, v = config.d, n_items + 1
        table = self.add(normal(rng, (v, d), 0.1, self.embedding_key))
        table.data[0] = 0.0
        if config.flavor == "sasrec":
            # indexed by distance from the most recent position
            self.add(normal(rng, (max_len, d), 0.1, "position_embedding"))
        self.blocks = []
        for i in range(config.n_blocks):
            self.blocks.append(self._make_block(i, rng))
        self.add(normal(rng, (d, v), 0.02, "out_w"))
        self.add(constant(0.0, (v,), "out_b"))

    def _make_block(self, i: int, rng) -> ResidualBlockParams:
        c, d = self.config, self.config.d
        pre = f"block{i}."
        w = {}
        if c.flavor == "nextitnet":
            k = c.kernel_size
            for layer in (1, 2):
                w[f"conv{layer}_w"] = self.add(normal(rng, (k, d, d), 1.0 / np.sqrt(k * d), f"{pre}conv{layer}_w"))
                w[f"conv{layer}_b"] = self.add(constant(0.0, (d,), f"{pre}conv{layer}_b"))
                w[f"ln{layer}_g"] = self.add(constant(1.0, (d,), f"{pre}ln{layer}_g"))
                w[f"ln{layer}_b"] = self.add(constant(0.0, (d,), f"{pre}ln{layer}_b"))
            dil = c.layer_dilations()[2 * i: 2 * i + 2]
        else:
            for name in ("ffn_w1", "ffn_w2", "wq", "wk", "wv", "wo"):
                w[name] = self.add(normal(rng, (d, d), 1.0 / np.sqrt(d), pre + name))
            for name in ("ffn_b1", "ffn_b2", "ln1_b", "ln2_b"):
                w[name] = self.add(constant(0.0, (d,), pre + name))
            for name in ("ln1_g", "ln2_g"):
                w[name] = self.add(constant(1.0, (d,), pre + name))
            dil = ()
        lam = self.add(constant(0.0, (), f"{pre}lam"))
        return ResidualBlockParams(c.flavor, w, lam, tuple(dil), c.n_heads,
                                   c.dropout_rate, c.sasrec_order)

    def embed(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        e = ad.embedding(self.params[self.embedding_key], ids)
        if self.config.flavor == "sasrec":
            t = ids.shape[1]
            if t > self.max_len:
                raise ad.ShapeError(f"sequence length {t} exceeds max_len {self.max_len}")
            pos = ad.embedding(self.params["position_embedding"], np.arange(t)[::-1].copy())
            e = ad.add(e, pos)
        return ad.mul(e, mask)

    def forward(self, ids, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        """Run the stack; ``rng`` switches dropout on (training mode)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        mask = padding_mask(ids)
        h = self.embed(ids, mask)
        hidden = []
        for block in self.blocks:
            if block.flavor == "nextitnet":
                h = nextitnet_block_forward(h, block, mask)
            else:
                h = sasrec_block_forward(h, block, mask, rng)
            hidden.append(h)
        logits = ad.add(ad.matmul(h, self.params["out_w"]), self.params["out_b"])
        return ForwardOutput(logits, hidden, self.params[self.embedding_key], mask[..., 0])


def predict_logits(model: Model, seq) -> np.ndarray:
    """Logits (t, |V| + 1) for one padded sequence."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1:
        raise ad.ShapeError(f"expected a single sequence, got shape {seq.shape}")
    return model.forward(seq[None]).logits.data[0]


def train_teacher(train: np.ndarray, config: TeacherConfig, n_items: int,
                  model: Optional[TeacherModel] = None) -> tuple:
    """Minimise next-item cross-entropy over ``train`` (n, t) sequences.

    Returns ``(model, history)`` where history holds one record per epoch.
    """
    train = np.asarray(train, dtype=np.int64)
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = TeacherModel(config, n_items, train.shape[1], rng)
    opt = AdamW(model.parameters(), config.lr, config.weight_decay,
                post_step=model.zero_padding_row)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for step, idx in enumerate(iterate_batches(len(train), config.batch_size, rng)):
            batch = train[idx]
            targets, mask = autoregressive_targets(batch)
            if not mask.any():
                continue
            try:
                out = model.forward(batch, rng if config.dropout_rate > 0 else None)
                loss = ce_loss(ad.softmax(out.logits), targets, mask)
                grads = ad.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged("teacher", epoch, step, str(exc)) from exc
            opt.step(grads)
            losses.append(loss.item())
        rec = {"phase": "teacher", "epoch": epoch, "ce": float(np.mean(losses)) if losses else 0.0}
        history.append(rec)
        log.debug("teacher epoch %d ce %.4f", epoch, rec["ce"])
    model.freeze()
    return model, history
