"""Command-line pipeline: prepare, train-teacher, search, derive, retrain, evaluate, export-dot.

Every command works inside one run directory. The resolved configuration is
written to ``config.json`` before any numerics run, and each phase replaces its
own records in ``history.jsonl``, so re-running a command reproduces the same files.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import checkpoint, data
from . import evaluation as ev
from .autodiff import NonFiniteError
from .cost import CostTable, cell_totals
from .objectives import TrainingDiverged
from .search_space import ArchParams, DiscreteCell, derive_architecture
from .teacher import TeacherConfig, train_teacher
from .trainer import SearchConfig, retrain, search, student_width

log = logging.getLogger("adarec")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

CONFIG = "config.json"
SEQUENCES = "sequences.jsonl"
VOCAB = "vocab.json"
TEACHER = "teacher.ckpt"
ARCH_PARAMS = "arch_params.json"
COST_TABLE = "cost_table.json"
ARCH = "arch.json"
STUDENT = "student.ckpt"
HISTORY = "history.jsonl"
METRICS = "metrics.json"
TIMING = "timing.json"
DOT = "cell.dot"
PHASES = ("prepare", "teacher", "search", "derive", "retrain", "evaluate")


class InputError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    pass


@dataclass
class DataConfig:
    input: Optional[str] = None
    format: str = "tsv"
    synthetic: Optional[str] = None
    t: int = 20
    min_count: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0

    def to_json(self) -> dict:
        return {"data": asdict(self.data), "teacher": self.teacher.to_json(),
                "search": self.search.to_json(), "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - {"data", "teacher", "search", "seed"}
        if unknown:
            raise InputError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(_build(DataConfig, obj.get("data", {})), _build(TeacherConfig, obj.get("teacher", {})),
                       _build(SearchConfig, obj.get("search", {})), int(obj.get("seed", 0)))
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid config: {exc}") from exc


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InputError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**values)


def parse_synthetic(scene: str, seed: int) -> dict:
    """``markov:k=4,users=200,items=50,length=20,noise=0`` -> generator kwargs."""
    kind, _, rest = scene.partition(":")
    if kind != "markov":
        raise InputError(f"unknown synthetic scene {kind!r}; expected 'markov:...'")
    out = {"n_users": 200, "n_items": 50, "length": 20, "order": 1, "noise": 0.0, "seed": seed}
    keys = {"k": "order", "order": "order", "users": "n_users", "items": "n_items",
            "length": "length", "noise": "noise", "seed": "seed"}
    for part in filter(None, rest.split(",")):
        key, sep, value = part.partition("=")
        if not sep or key not in keys:
            raise InputError(f"bad synthetic parameter {part!r}")
        try:
            out[keys[key]] = float(value) if key == "noise" else int(value)
        except ValueError as exc:
            raise InputError(f"bad value in {part!r}") from exc
    return out


# ---------------------------------------------------------------------------
# run directory helpers


def _require(run: Path, name: str) -> Path:
    path = run / name
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _replace_history(run: Path, phase: str, records: list) -> None:
    path = run / HISTORY
    kept = []
    if path.exists():
        kept = [line for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip() and json.loads(line).get("phase") != phase]
    lines = kept + [json.dumps(r, sort_keys=True) for r in records]
    # pipeline order, so re-running one phase leaves the file byte-identical
    lines.sort(key=lambda line: PHASES.index(json.loads(line)["phase"]))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def resolve_config(args) -> RunConfig:
    """Config file (``--config``, else the run's config.json, else defaults) plus flag overrides."""
    run = Path(args.out)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        source = path
    else:
        source = run / CONFIG if (run / CONFIG).exists() else None
    if source is not None:
        try:
            cfg = RunConfig.from_json(json.loads(source.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InputError(f"{source}: invalid json: {exc}") from exc
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.teacher.seed = args.seed
        cfg.search.seed = args.seed
    s = cfg.search
    if getattr(args, "beta", None) is not None:
        if args.beta < 0:
            raise InputError("--beta must be >= 0")
        s.beta = args.beta
    for flag, attr in (("no_emb_kd", "use_emb_kd"), ("no_pred_kd", "use_pred_kd"),
                       ("no_hidden_kd", "use_hidden_kd"), ("no_ce", "use_ce")):
        if getattr(args, flag, False):
            setattr(s, attr, False)
    if getattr(args, "input", None):
        cfg.data.input, cfg.data.synthetic = args.input, None
    if getattr(args, "format", None):
        cfg.data.format = args.format
    if getattr(args, "synthetic", None):
        cfg.data.synthetic, cfg.data.input = args.synthetic, None
    if getattr(args, "t", None):
        cfg.data.t = args.t
    return cfg


def _load_dataset(run: Path):
    seqs = data.read_sequences(_require(run, SEQUENCES))
    vocab = data.read_vocab(_require(run, VOCAB))
    return data.split_dataset(seqs, len(vocab)), vocab


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args, cfg: RunConfig, run: Path) -> int:
    d = cfg.data
    if d.synthetic:
        log_ = data.markov_scene(**parse_synthetic(d.synthetic, cfg.seed))
    elif d.input:
        path = Path(d.input)
        if not path.exists():
            raise InputError(f"input file not found: {path}")
        log_ = data.ingest(path, d.format)
    else:
        raise InputError("prepare needs --input or --synthetic")
    seqs, vocab = data.build_sequences(log_, d.t, d.min_count)
    if len(seqs) == 0:
        raise InputError("no sequences with at least 2 items")
    data.write_sequences(run / SEQUENCES, seqs)
    data.write_vocab(run / VOCAB, vocab)
    log.info("prepared %d sequences over %d items", len(seqs), len(vocab))
    _replace_history(run, "prepare", [{"phase": "prepare", "sequences": len(seqs), "items": len(vocab),
                                       "interactions": len(log_)}])
    return EXIT_OK


def cmd_train_teacher(args, cfg: RunConfig, run: Path) -> int:
    ds, vocab = _load_dataset(run)
    model, history = train_teacher(ds.train, cfg.teacher, len(vocab))
    checkpoint.save_teacher(run / TEACHER, model)
    _replace_history(run, "teacher", history)
    log.info("teacher trained: %d parameters", model.param_count())
    return EXIT_OK


def cmd_search(args, cfg: RunConfig, run: Path) -> int:
    teacher = checkpoint.load_teacher(_require(run, TEACHER))
    ds, vocab = _load_dataset(run)
    res = search(ds.train, teacher, cfg.search, len(vocab))
    _write_json(run / ARCH_PARAMS, res.arch.to_json())
    CostTable.build(student_width(teacher, cfg.search), ds.length).dump(run / COST_TABLE)
    _replace_history(run, "search", res.history)
    log.info("search done; argmax cell %s", res.cell.ops)
    return EXIT_OK


def cmd_derive(args, cfg: RunConfig, run: Path) -> int:
    arch = ArchParams.from_json(json.loads(_require(run, ARCH_PARAMS).read_text(encoding="utf-8")))
    cell = derive_architecture(arch)
    _write_json(run / ARCH, cell.to_json())
    _replace_history(run, "derive", [{"phase": "derive", "ops": list(cell.ops)}])
    print(" ".join(f"{i}->{j}:{op}" for (i, j), op in zip(cell.edges, cell.ops)))
    return EXIT_OK


def _load_cell(run: Path) -> DiscreteCell:
    try:
        return DiscreteCell.from_json(json.loads(_require(run, ARCH).read_text(encoding="utf-8")))
    except (KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{run / ARCH}: malformed cell: {exc}") from exc


def cmd_retrain(args, cfg: RunConfig, run: Path) -> int:
    cell = _load_cell(run)
    teacher = checkpoint.load_teacher(_require(run, TEACHER))
    ds, vocab = _load_dataset(run)
    res = retrain(cell, ds.train, teacher, cfg.search, len(vocab))
    checkpoint.save_student(run / STUDENT, res.student, res.projection)
    _replace_history(run, "retrain", res.history)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, run: Path) -> int:
    student = checkpoint.load_student(_require(run, STUDENT))
    teacher = checkpoint.load_teacher(_require(run, TEACHER))
    ds, vocab = _load_dataset(run)
    cases = ds.test if args.split == "test" else ds.val
    if len(cases) == 0:
        raise InputError(f"no {args.split} cases (every sequence has fewer than 3 items)")
    s_eval, t_eval = ev.evaluate(student, cases), ev.evaluate(teacher, cases)
    params = student.deployed_param_count()
    rep = ev.report(s_eval, params, teacher.param_count(), t_eval)
    rep["split"] = args.split
    rep["cell_totals"] = cell_totals(student.cell, student.d, ds.length, student.k_blocks)
    ev.write_report(run / METRICS, rep)
    t_time = ev.inference_time(teacher, cases.inputs, args.timing_batches)
    s_time = ev.inference_time(student, cases.inputs, args.timing_batches)
    speedup = t_time / s_time if s_time > 0 else float("inf")
    _write_json(run / TIMING, {"batches": args.timing_batches, "teacher_seconds": t_time,
                               "student_seconds": s_time, "speedup": speedup})
    _replace_history(run, "evaluate", [{"phase": "evaluate", "split": args.split, **s_eval["metrics"]}])
    print(ev.format_table(rep, speedup))
    return EXIT_OK


def cmd_export_dot(args, cfg: RunConfig, run: Path) -> int:
    cell = _load_cell(run)
    out = Path(args.dot) if args.dot else run / DOT
    out.write_text(cell.to_dot(run.name or "cell"), encoding="utf-8")
    log.info("wrote %s", out)
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train-teacher": cmd_train_teacher,
    "search": cmd_search,
    "derive": cmd_derive,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "export-dot": cmd_export_dot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="json run config; defaults to <out>/config.json when present")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")
    ablation = argparse.ArgumentParser(add_help=False)
    ablation.add_argument("--no-emb-kd", action="store_true", help="drop the embedding distillation term")
    ablation.add_argument("--no-pred-kd", action="store_true", help="drop the prediction distillation term")
    ablation.add_argument("--no-hidden-kd", action="store_true", help="drop the hidden-layer distillation term")
    ablation.add_argument("--no-ce", action="store_true", help="drop the cross-entropy term")
    ablation.add_argument("--beta", type=float, help="efficiency coefficient")

    parser = argparse.ArgumentParser(prog="adarec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="ingest interactions into padded sequences")
    p.add_argument("--input", help="interaction file (user, timestamp, item)")
    p.add_argument("--format", choices=("tsv", "jsonl"))
    p.add_argument("--synthetic", help="generated scene, e.g. markov:k=4,users=200,items=50")
    p.add_argument("--t", type=int, help="sequence length")
    sub.add_parser("train-teacher", parents=[common], help="pretrain the teacher")
    sub.add_parser("search", parents=[common, ablation], help="joint architecture search")
    sub.add_parser("derive", parents=[common], help="argmax the searched logits into arch.json")
    sub.add_parser("retrain", parents=[common, ablation], help="train the derived student from scratch")
    p = sub.add_parser("evaluate", parents=[common], help="rank held-out items; write metrics.json")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--timing-batches", type=int, default=100)
    p = sub.add_parser("export-dot", parents=[common], help="Graphviz diagram of the derived cell")
    p.add_argument("--dot", help="output path (default: <out>/cell.dot)")
    return parser


def _thread_limit():
    raw = os.environ.get("ADAREC_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise InputError(f"ADAREC_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InputError("ADAREC_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = Path(args.out)
    try:
        cfg = resolve_config(args)
        run.mkdir(parents=True, exist_ok=True)
        _write_json(run / CONFIG, cfg.to_json())
        with _thread_limit():
            return COMMANDS[args.command](args, cfg, run)
    except MissingPrerequisite as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (TrainingDiverged, NonFiniteError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (InputError, data.DataError, FileNotFoundError, ValueError, KeyError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
