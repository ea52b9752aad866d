"""Experiment configuration, per-seed orchestration, persistence and reporting.

A run set lives in ``<output>/<name>/``:

    config.json        resolved configuration (every effective value)
    report.json        cross-seed metric report
    seed_<s>/log.jsonl training log, one record per update
    seed_<s>/perf.csv  boundary and periodic evaluations
    seed_<s>/repr_task<i>.npz, embeddings.csv   (AACL variants only)
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from .action_repr import (
    ReprConfig,
    TransitionBuffer,
    decode_accuracy,
    dump_embeddings,
    state_from_arrays,
    state_to_arrays,
)
from .agent import VARIANTS, A2CConfig, AACLAgent, AACLConfig, Learner, run_sequence
from .baselines import METHODS, BaselineConfig, make_baseline
from .envs import CATALOGS, SITUATIONS, GridConfig, SequenceSpec, build_sequence
from .errors import ConfigError
from .metrics import PerfMatrix, aggregate, seed_metrics
from .storage import atomic_save_npz, atomic_write_json, atomic_write_text

log = logging.getLogger(__name__)

ALL_METHODS = tuple(VARIANTS) + METHODS
DEFAULT_STEPS = {"oriented": 150_000, "omni": 300_000}
CSV_COLUMNS = ("seed", "trained_after_task", "eval_task", "mean_return", "phase", "global_step")
EMBED_PROBES = 1000


def _section(cls, drop=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "name": None,
        "method": "AACL",
        "seeds": [0],
        "output": "runs",
        "sequence": {
            "situation": "expansion",
            "family": "oriented",
            "width": 8,
            "height": 8,
            "max_steps": None,
            "goal_rule": None,
            "steps_per_task": None,
            "custom": None,
        },
        "eval": {"interval": 10_000, "episodes": 10},
        "a2c": _section(A2CConfig),
        "repr": _section(ReprConfig, drop=("reg_decoder", "reg_encoder")),
        "aacl": {"exploration_steps": 10_000, "exploration_policy": "random"},
        "baseline": _section(BaselineConfig, drop=("a2c",)),
    }


# keys whose default is None but which accept a value
NULLABLE = {
    ("name",): str,
    ("sequence", "max_steps"): int,
    ("sequence", "goal_rule"): str,
    ("sequence", "steps_per_task"): (int, list),
    ("sequence", "custom"): list,
    ("a2c", "grad_clip"): float,
    ("repr", "grad_clip"): float,
}


def _key_line(text: str | None, path: tuple[str, ...]) -> str:
    """'line N: ' for the key at ``path``, found by walking the parent keys in order."""
    if not text:
        return ""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if not m:
            return ""
        pos = m.start()
    return f"line {text.count(chr(10), 0, pos) + 1}: "


def _check_value(path: tuple[str, ...], value: Any, default: Any) -> Any:
    name = ".".join(path)
    if value is None:
        if default is None or path in NULLABLE:
            return None
        raise ConfigError(f"{name} may not be null")
    want = NULLABLE.get(path) if default is None else type(default)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and want is not bool and want is not None:
        raise ConfigError(f"{name} expects {_tname(want)}, got a boolean")
    if want is not None and not isinstance(value, want):
        raise ConfigError(f"{name} expects {_tname(want)}, got {type(value).__name__}")
    return value


def _tname(t) -> str:
    if isinstance(t, tuple):
        return " or ".join(x.__name__ for x in t)
    return t.__name__


def merge(base: dict, update: dict, text: str | None = None, prefix: tuple[str, ...] = ()) -> dict:
    """Recursive merge that rejects unknown keys and wrongly typed values."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = prefix + (key,)
        if key not in base:
            raise ConfigError(f"{_key_line(text, path)}unknown config key {'.'.join(path)!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{_key_line(text, path)}{'.'.join(path)} must be an object")
            out[key] = merge(base[key], value, text, path)
        else:
            try:
                out[key] = _check_value(path, value, base[key])
            except ConfigError as exc:
                raise ConfigError(f"{_key_line(text, path)}{exc}") from None
    return out


def parse_override(arg: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is read as JSON, else as a string."""
    if "=" not in arg:
        raise ConfigError(f"--set {arg!r}: expected key=value")
    key, raw = arg.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"--set {arg!r}: malformed key")
    nested: Any = value
    for p in reversed(parts):
        nested = {p: nested}
    return nested


def load_config(path: str | os.PathLike | None, overrides: list[str] = ()) -> dict:
    """defaults < file < overrides, validated."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: line 1: top level must be an object")
        try:
            cfg = merge(cfg, data, text)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for arg in overrides:
        try:
            cfg = merge(cfg, parse_override(arg))
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith("--set") else f"--set {arg!r}: {msg}") from None
    validate(cfg)
    return resolve(cfg)


def validate(cfg: dict) -> None:
    seq = cfg["sequence"]
    if cfg["method"] not in ALL_METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; expected one of {ALL_METHODS}")
    if seq["situation"] not in SITUATIONS:
        raise ConfigError(f"unknown situation {seq['situation']!r}; expected one of {SITUATIONS}")
    if seq["family"] not in CATALOGS:
        raise ConfigError(f"unknown family {seq['family']!r}")
    if not cfg["seeds"] or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg["seeds"]):
        raise ConfigError("seeds must be a nonempty list of integers")
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("seeds must be distinct")
    if cfg["eval"]["interval"] < 1:
        raise ConfigError("eval.interval must be >= 1")
    if cfg["eval"]["episodes"] < 1:
        raise ConfigError("eval.episodes must be >= 1")
    steps = seq["steps_per_task"]
    if steps is not None:
        vals = steps if isinstance(steps, list) else [steps]
        if any(not isinstance(v, int) or v < 0 for v in vals):
            raise ConfigError("sequence.steps_per_task must be >= 0")
    # constructing everything surfaces remaining range errors as ConfigError
    try:
        build(cfg)
        agent_configs(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def resolve(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    seq = cfg["sequence"]
    if seq["steps_per_task"] is None:
        seq["steps_per_task"] = DEFAULT_STEPS[seq["family"]]
    if seq["max_steps"] is None:
        seq["max_steps"] = GridConfig(seq["width"], seq["height"]).horizon()
    if seq["goal_rule"] is None:
        seq["goal_rule"] = "corner" if seq["family"] == "oriented" else "random"
    if cfg["name"] is None:
        cfg["name"] = f"{cfg['method']}_{seq['situation']}_{seq['family']}"
    return cfg


def build(cfg: dict) -> SequenceSpec:
    seq = cfg["sequence"]
    grid = GridConfig(seq["width"], seq["height"], seq["max_steps"], seq["goal_rule"])
    steps = seq["steps_per_task"]
    if steps is None:
        steps = DEFAULT_STEPS.get(seq["family"], 0)
    return build_sequence(seq["situation"], seq["family"], grid, steps, 0, seq["custom"])


def agent_configs(cfg: dict) -> tuple[AACLConfig, BaselineConfig]:
    a2c = dict(cfg["a2c"])
    a2c["hidden"] = tuple(a2c["hidden"])
    a2c = A2CConfig(**a2c)
    rep = dict(cfg["repr"])
    rep["hidden"] = tuple(rep["hidden"])
    aacl = AACLConfig(ReprConfig(**rep), a2c, **cfg["aacl"])
    if aacl.exploration_policy not in ("random", "previous"):
        raise ConfigError(f"unknown exploration policy {aacl.exploration_policy!r}")
    return aacl, BaselineConfig(a2c=a2c, **cfg["baseline"])


def make_agent(cfg: dict, seq: SequenceSpec, seed: int) -> Learner:
    task = seq.tasks[0]
    aacl, base = agent_configs(cfg)
    method = cfg["method"]
    if method in VARIANTS:
        return AACLAgent(task.obs_dim, len(task.catalog), aacl, seed, method)
    return make_baseline(method, task.obs_dim, len(task.catalog), seed, base)


def output_root(cfg: dict) -> Path:
    return Path(os.environ.get("CLDC_OUT") or cfg["output"])


def run_dir(cfg: dict) -> Path:
    return output_root(cfg) / cfg["name"]


# -- per-seed run ----------------------------------------------------------


def _perf_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for seed, i, j, v, phase, step in rows:
        w.writerow([seed, i, j, repr(float(v)), phase, step])
    return buf.getvalue()


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def run_seed(cfg: dict, seed: int) -> PerfMatrix:
    """Train and evaluate one seed; artifacts are rewritten at every boundary
    and flushed even when training aborts."""
    seq = build(cfg)
    agent = make_agent(cfg, seq, seed)
    out = run_dir(cfg) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []

    def on_row(trained, task, value, phase, step):
        rows.append((seed, trained, task, value, phase, step))

    def flush():
        atomic_write_text(out / "perf.csv", _perf_csv(rows))
        atomic_write_text(out / "log.jsonl", _jsonl(agent.log))

    def on_task_end(i, task):
        if isinstance(agent, AACLAgent):
            buf = agent.last_buffer
            atomic_save_npz(
                out / f"repr_task{i}.npz",
                **state_to_arrays(agent.repr),
                buf_s=buf.s,
                buf_a=buf.a,
                buf_s_next=buf.s_next,
                buf_active=buf.active,
                task_index=np.array(task.index),
            )
            dump_embeddings(agent.repr, buf.take(np.arange(min(len(buf), EMBED_PROBES))), out / "embeddings.csv")
        flush()

    try:
        P = run_sequence(agent, seq, cfg["eval"]["episodes"], cfg["eval"]["interval"], seed, on_row, on_task_end)
    finally:
        flush()
    return P


def read_perf(path: Path, n_tasks: int | None = None) -> tuple[int, PerfMatrix]:
    """Boundary rows of a perf CSV as a matrix."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("phase", "boundary") == "boundary"]
    if not rows:
        raise ConfigError(f"{path}: no boundary rows")
    n = n_tasks or max(int(r["eval_task"]) for r in rows)
    P = PerfMatrix.empty(n)
    for r in rows:
        P.set(int(r["trained_after_task"]), int(r["eval_task"]), float(r["mean_return"]))
    return int(rows[0]["seed"]), P


def _seed_job(args):
    cfg, seed = args
    return seed, run_seed(cfg, seed)


def run(cfg: dict, jobs: int = 1) -> dict:
    """Run every seed and write the resolved config and the aggregated report."""
    root = run_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write_json(root / "config.json", cfg)
    seeds = cfg["seeds"]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            results = dict(pool.map(_seed_job, [(cfg, s) for s in seeds]))
    else:
        results = {s: run_seed(cfg, s) for s in seeds}
    transfer = cfg["method"] != "IND"
    per_seed = [seed_metrics(results[s], transfer) for s in seeds]
    report = aggregate(cfg["method"], seeds, per_seed).to_dict()
    atomic_write_json(root / "report.json", report)
    return report


# -- report ------------------------------------------------------------------


def _sequence_key(cfg: dict) -> tuple:
    s = cfg["sequence"]
    steps = s["steps_per_task"]
    return (s["situation"], s["family"], s["width"], s["height"], json.dumps(steps), json.dumps(s["custom"]))


def find_runs(root: Path) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("config.json"))


def collect(root: str | os.PathLike) -> dict[str, list[tuple[int, PerfMatrix]]]:
    """Matrices per method from every run set under ``root``."""
    runs = find_runs(Path(root))
    if not runs:
        raise ConfigError(f"no run sets under {root}")
    keys: dict[tuple, list[str]] = {}
    by_method: dict[str, list[tuple[int, PerfMatrix]]] = {}
    for r in runs:
        cfg = json.loads((r / "config.json").read_text())
        keys.setdefault(_sequence_key(cfg), []).append(str(r))
        n = len(build(cfg))
        for p in sorted(r.glob("seed_*/perf.csv")):
            by_method.setdefault(cfg["method"], []).append(read_perf(p, n))
    if len(keys) > 1:
        lines = [f"  {k[0]}/{k[1]} {k[2]}x{k[3]} steps={k[4]}: {', '.join(v)}" for k, v in keys.items()]
        raise ConfigError("runs use incompatible sequences:\n" + "\n".join(lines))
    return by_method


def _fmt(summary: dict) -> str:
    if summary["mean"] is None:
        return "--"
    text = f"{summary['mean']:.3f} ± {summary['ci95']:.3f}"
    return text + (" (n=1)" if summary["flag"] else "")


def report(root: str | os.PathLike) -> tuple[str, str, list[dict]]:
    """(text table, CSV, per-method report dicts) for every run set under ``root``."""
    by_method = collect(root)
    reports = []
    for method in sorted(by_method):
        mats = sorted(by_method[method], key=lambda t: t[0])
        transfer = method != "IND"
        per_seed = [seed_metrics(P, transfer) for _, P in mats]
        reports.append(aggregate(method, [s for s, _ in mats], per_seed).to_dict())
    header = ("method", "return", "forgetting", "transfer", "n")
    table = [header]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["method", "n"]
        + [f"{m}_{s}" for m in ("return", "forgetting", "transfer") for s in ("mean", "sd", "sem", "ci95")]
    )
    for rep in reports:
        r, f, t = rep["continual_return"], rep["forgetting"], rep["forward_transfer"]
        table.append((rep["method"], _fmt(r), _fmt(f), _fmt(t), str(r["n"])))
        w.writerow(
            [rep["method"], r["n"]]
            + [("" if x[k] is None else repr(x[k])) for x in (r, f, t) for k in ("mean", "sd", "sem", "ci95")]
        )
    widths = [max(len(row[k]) for row in table) for k in range(len(header))]
    text = "\n".join("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in table) + "\n"
    return text, buf.getvalue(), reports


# -- probe -------------------------------------------------------------------


def _load_run_config(run: Path) -> dict:
    for p in (run / "config.json", run.parent / "config.json"):
        if p.exists():
            return json.loads(p.read_text())
    raise ConfigError(f"no config.json in {run} or its parent")


def probe(run: str | os.PathLike, task_index: int) -> dict:
    """Embeddings dump and decode accuracy for the state saved after ``task_index``."""
    run = Path(run)
    path = run / f"repr_task{task_index}.npz"
    if not path.exists():
        raise FileNotFoundError(f"no saved encoder-decoder state at {path}")
    cfg = _load_run_config(run)
    seq = build(cfg)
    if not 1 <= task_index <= len(seq):
        raise ConfigError(f"task index {task_index} outside 1..{len(seq)}")
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    state = state_from_arrays(arrays)
    if "buf_a" not in arrays or len(arrays["buf_a"]) == 0:
        raise ConfigError(f"{path} holds no transitions to probe")
    buffer = TransitionBuffer(arrays["buf_s"], arrays["buf_a"], arrays["buf_s_next"], arrays["buf_active"])
    task = seq.tasks[task_index - 1]
    acc = decode_accuracy(state, buffer, task)
    dump_embeddings(state, buffer.take(np.arange(min(len(buffer), EMBED_PROBES))), run / f"probe_task{task_index}_embeddings.csv")
    atomic_write_json(run / f"probe_task{task_index}.json", acc)
    return acc


def write_report(root: str | os.PathLike) -> str:
    text, table_csv, reports = report(root)
    root = Path(root)
    atomic_write_text(root / "summary.txt", text)
    atomic_write_text(root / "summary.csv", table_csv)
    atomic_write_json(root / "summary.json", reports)
    return text


__all__ = [
    "ALL_METHODS",
    "CSV_COLUMNS",
    "default_config",
    "load_config",
    "merge",
    "parse_override",
    "probe",
    "read_perf",
    "report",
    "run",
    "run_seed",
    "write_report",
]
