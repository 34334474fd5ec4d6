"""Interaction logs, item vocabularies, padded sequences and the leave-one-out split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

PAD = 0


class DataError(ValueError):
    """Malformed input data; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, order=True)
class Interaction:
    user: str
    timestamp: int
    item: str


@dataclass
class InteractionLog:
    """Records ordered by user, then timestamp, then item id."""

    records: list

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: (r.user, r.timestamp, r.item))

    def __len__(self) -> int:
        return len(self.records)

    def by_user(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault(r.user, []).append(r.item)
        return out


@dataclass
class Vocabulary:
    """Dense ids 1..|V| for opaque item ids; 0 is the padding id."""

    items: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {item: i + 1 for i, item in enumerate(self.items)}
        if len(self._index) != len(self.items):
            raise DataError("vocabulary contains duplicate items")

    def __len__(self) -> int:
        return len(self.items)

    def encode(self, item: str) -> int:
        try:
            return self._index[item]
        except KeyError:
            raise KeyError(f"unknown item {item!r}") from None

    def decode(self, idx: int) -> str:
        if not 1 <= idx <= len(self.items):
            raise KeyError(f"dense id {idx} outside 1..{len(self.items)}")
        return self.items[idx - 1]

    def to_json(self) -> dict:
        return {"pad": PAD, "items": list(self.items)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["items"]))


@dataclass
class SequenceSet:
    """Fixed-length left-padded sequences, one row each, with the owning user."""

    items: np.ndarray
    users: list

    def __len__(self) -> int:
        return len(self.items)

    @property
    def length(self) -> int:
        return self.items.shape[1]


def _parse_ts(raw, line: int) -> int:
    if isinstance(raw, bool):
        raise DataError(f"timestamp must be an integer, got {raw!r}", line)
    if isinstance(raw, int):
        return raw
    if isinstance(raw, float) and raw.is_integer():
        return int(raw)
    try:
        return int(str(raw).strip())
    except ValueError:
        raise DataError(f"timestamp must be an integer, got {raw!r}", line) from None


def ingest(path, fmt: str = "tsv") -> InteractionLog:
    """Read ``user, item, timestamp`` records from a tsv or jsonl file."""
    path = Path(path)
    if fmt not in ("tsv", "jsonl"):
        raise DataError(f"unknown format {fmt!r}; expected tsv or jsonl")
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n\r")
            if not line.strip():
                continue
            if fmt == "tsv":
                parts = line.split("\t")
                if lineno == 1 and [p.strip().lower() for p in parts] == ["user", "item", "timestamp"]:
                    continue
                if len(parts) != 3:
                    raise DataError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
                user, item, ts = (p.strip() for p in parts)
            else:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid json: {exc.msg}", lineno) from None
                if not isinstance(obj, dict) or not {"user", "item", "ts"} <= obj.keys():
                    raise DataError("record needs keys user, item, ts", lineno)
                user, item, ts = str(obj["user"]), str(obj["item"]), obj["ts"]
            if not user or not item:
                raise DataError("empty user or item id", lineno)
            records.append(Interaction(user, _parse_ts(ts, lineno), item))
    if not records:
        raise DataError(f"{path} contains no records")
    return InteractionLog(records)


def left_pad(items: Iterable[int], t: int) -> np.ndarray:
    items = list(items)
    if len(items) > t:
        raise ValueError(f"{len(items)} items do not fit in length {t}")
    return np.array([PAD] * (t - len(items)) + items, dtype=np.int64)


def chunk(items: list, t: int) -> list:
    """Non-overlapping windows of at most ``t`` items anchored at the most recent end."""
    chunks = []
    end = len(items)
    while end > 0:
        chunks.append(items[max(0, end - t): end])
        end -= t
    return chunks[::-1]


def build_sequences(log: InteractionLog, t: int, min_count: int = 1) -> tuple:
    """Split each user's history into left-padded windows of length ``t``.

    Items seen fewer than ``min_count`` times are dropped first; windows with
    fewer than two real items are discarded. Returns ``(SequenceSet, Vocabulary)``.
    """
    if t < 2:
        raise ValueError(f"sequence length must be >= 2, got {t}")
    histories = log.by_user()
    if min_count > 1:
        counts: dict = {}
        for r in log.records:
            counts[r.item] = counts.get(r.item, 0) + 1
        histories = {u: [i for i in h if counts[i] >= min_count] for u, h in histories.items()}
    kept = []
    for user in sorted(histories):
        for window in chunk(histories[user], t):
            if len(window) >= 2:
                kept.append((user, window))
    vocab = Vocabulary(sorted({item for _, w in kept for item in w}))
    rows = [left_pad([vocab.encode(i) for i in w], t) for _, w in kept]
    items = np.stack(rows) if rows else np.zeros((0, t), dtype=np.int64)
    return SequenceSet(items, [u for u, _ in kept]), vocab


def real_items(seq: np.ndarray) -> np.ndarray:
    return seq[seq != PAD]


@dataclass
class Split:
    train: np.ndarray
    val_target: Optional[int]
    test_target: Optional[int]


def leave_one_out_split(seq: np.ndarray) -> Split:
    """Last item -> test, second to last -> validation, the rest -> training prefix."""
    seq = np.asarray(seq)
    t = len(seq)
    real = real_items(seq)
    if len(real) < 2:
        raise ValueError("sequence needs at least 2 real items")
    if len(real) == 2:
        return Split(seq.copy(), None, None)
    return Split(left_pad(real[:-2].tolist(), t), int(real[-2]), int(real[-1]))


@dataclass
class EvalCases:
    """Inputs (n, t) whose final position predicts ``targets`` (n,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class Dataset:
    """Leave-one-out view of a sequence set."""

    train: np.ndarray
    val: EvalCases
    test: EvalCases
    n_items: int

    @property
    def length(self) -> int:
        return self.train.shape[1]


def split_dataset(seqs: SequenceSet, n_items: int) -> Dataset:
    t = seqs.length
    train, vin, vt, tin, tt = [], [], [], [], []
    for seq in seqs.items:
        s = leave_one_out_split(seq)
        train.append(s.train)
        if s.val_target is None:
            continue
        vin.append(s.train)
        vt.append(s.val_target)
        tin.append(left_pad(real_items(seq)[:-1].tolist(), t))
        tt.append(s.test_target)

    def cases(inputs, targets):
        if not inputs:
            return EvalCases(np.zeros((0, t), dtype=np.int64), np.zeros(0, dtype=np.int64))
        return EvalCases(np.stack(inputs), np.array(targets, dtype=np.int64))

    return Dataset(np.stack(train), cases(vin, vt), cases(tin, tt), n_items)


def next_item_cases(seqs: np.ndarray) -> EvalCases:
    """Predict each row's last real item from the rest; rows with < 2 items are skipped."""
    t = seqs.shape[1]
    inputs, targets = [], []
    for seq in seqs:
        real = real_items(seq)
        if len(real) < 2:
            continue
        inputs.append(left_pad(real[:-1].tolist(), t))
        targets.append(int(real[-1]))
    return EvalCases(np.stack(inputs), np.array(targets, dtype=np.int64))


def markov_scene(n_users: int = 200, n_items: int = 50, length: int = 20, order: int = 1,
                 noise: float = 0.0, seed: int = 0) -> InteractionLog:
    """Synthetic scene whose next item is a fixed function of the previous ``order`` items.

    With probability ``noise`` a step instead draws a uniformly random item.
    Larger ``order`` emulates longer-range sequential dependencies.
    """
    if order < 1 or n_items < 2 or length < 2:
        raise ValueError("need order >= 1, n_items >= 2, length >= 2")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    mults = rng.integers(1, n_items, size=order)
    width = len(str(n_items))
    records = []
    for u in range(n_users):
        seq = list(rng.integers(0, n_items, size=order))
        while len(seq) < length:
            if noise > 0 and rng.random() < noise:
                seq.append(int(rng.integers(0, n_items)))
            else:
                ctx = sum(int(m) * int(x) for m, x in zip(mults, seq[-order:][::-1]))
                seq.append(int(perm[ctx % n_items]))
        user = f"u{u:05d}"
        records.extend(Interaction(user, ts, f"i{int(x):0{width}d}") for ts, x in enumerate(seq[:length]))
    return InteractionLog(records)


def write_sequences(path, seqs: SequenceSet) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in seqs.items:
            fh.write(json.dumps([int(x) for x in row]) + "\n")


def read_sequences(path) -> SequenceSet:
    users, rows = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid json: {exc.msg}", lineno) from None
            if isinstance(obj, list):
                obj = {"user": str(lineno), "items": obj}
            users.append(str(obj["user"]))
            rows.append(np.array(obj["items"], dtype=np.int64))
    if not rows:
        raise DataError(f"{path} contains no sequences")
    if len({len(r) for r in rows}) != 1:
        raise DataError("sequences have differing lengths")
    return SequenceSet(np.stack(rows), users)


def write_vocab(path, vocab: Vocabulary) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), indent=1) + "\n", encoding="utf-8")


def read_vocab(path) -> Vocabulary:
    return Vocabulary.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
