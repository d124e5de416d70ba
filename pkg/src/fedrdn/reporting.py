"""Report files: writing a run, comparing runs, exporting features.

Layout of a run directory::

    <output_dir>/config.json            echoed RunConfig
    <output_dir>/seed_<s>/summary.json  final metrics, cross-site matrix, registry audit
    <output_dir>/seed_<s>/rounds.jsonl  one record per round per client
    <output_dir>/seed_<s>/rounds.csv    round,client_id,split,loss,accuracy
    <output_dir>/seed_<s>/cross_site.csv
    <output_dir>/seed_<s>/params.npz    final global and local models
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .augmentation import AugContext, Mode, StatsRegistry, apply_pipeline
from .config import RunConfig, config_to_dict, parse_config
from .errors import ConfigError, MisuseError
from .federation import ExperimentResult, build_clients, cross_site_matrix, run_experiment
from .model import ModelSpec, features, forward
from .params import ParameterVector
from .stats_protocol import StatsMessage

SCHEMA_VERSION = 1
LAYER_TAGS = ("penultimate", "logits")


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows: Iterable[Sequence[Any]], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _registry_audit(result: ExperimentResult) -> list[dict] | None:
    if result.registry is None:
        return None
    return [m.to_wire() for m in result.stats_messages]


def _params_npz(result: ExperimentResult) -> bytes:
    arrays = {f"global__{n}": a for n, a in result.final_global}
    for k, pv in enumerate(result.final_locals):
        arrays.update({f"local{k}__{n}": a for n, a in pv})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def summarize(cfg: RunConfig, seed: int, result: ExperimentResult, cross: np.ndarray | None) -> dict[str, Any]:
    final = result.reports[-1]
    K = len(final.clients)
    uplink: dict[str, int] = {}
    for u in result.uploads:
        uplink[u.kind] = uplink.get(u.kind, 0) + u.n_floats
    summary: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_dict(cfg),
        "seed": seed,
        "arm": cfg.augmentation.arm,
        "algorithm": cfg.algorithm.name,
        "num_clients": K,
        "rounds": len(result.reports),
        "final": {
            "per_client_accuracy": [m.test_accuracy for m in final.clients],
            "per_client_loss": [m.test_loss for m in final.clients],
            "avg_accuracy_weighted": final.avg_accuracy_weighted,
            "avg_accuracy_unweighted": final.avg_accuracy_unweighted,
        },
        "cross_site": None if cross is None else cross.tolist(),
        "cross_site_off_diagonal_mean": None,
        "registry": _registry_audit(result),
        "uplink_floats": uplink,
        "versions": {"fedrdn": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    if cross is not None and K > 1:
        summary["cross_site_off_diagonal_mean"] = float(cross[~np.eye(K, dtype=bool)].mean())
    return summary


def write_seed_report(out_dir: Path, cfg: RunConfig, seed: int, result: ExperimentResult,
                      cross: np.ndarray | None) -> dict[str, Any]:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(cfg, seed, result, cross)
    records, rows = [], []
    for r in result.reports:
        for m in r.clients:
            records.append(json.dumps({
                "round": r.t, "client_id": m.client_id,
                "train_loss": m.train_loss, "train_accuracy": m.train_accuracy,
                "test_loss": m.test_loss, "test_accuracy": m.test_accuracy,
            }))
            rows.append((r.t, m.client_id, "train", m.train_loss, m.train_accuracy))
            rows.append((r.t, m.client_id, "test", m.test_loss, m.test_accuracy))
    atomic_write(out_dir / "rounds.jsonl", "\n".join(records) + "\n")
    atomic_write(out_dir / "rounds.csv", _csv(rows, ("round", "client_id", "split", "loss", "accuracy")))
    if cross is not None:
        K = cross.shape[0]
        atomic_write(out_dir / "cross_site.csv", _csv(
            ((s, t, float(cross[s, t])) for s in range(K) for t in range(cross.shape[1])),
            ("source", "target", "accuracy")))
    atomic_write(out_dir / "params.npz", _params_npz(result))
    atomic_write(out_dir / "summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def run_config(cfg: RunConfig, log=None) -> list[dict[str, Any]]:
    """Execute every seed of ``cfg`` and write the report tree; returns the summaries."""
    out = Path(cfg.output_dir)
    atomic_write(out / "config.json", json.dumps(config_to_dict(cfg), indent=2) + "\n")
    fed = cfg.load_federation()
    spec = cfg.model_spec(fed)
    pipeline = cfg.augmentation.pipeline(fed.image_shape[0])
    summaries = []
    for seed in cfg.seeds:
        result = run_experiment(fed, spec, pipeline, cfg.algorithm, seed, workers=cfg.workers,
                                pooled_stats=cfg.augmentation.pooled_std)
        cross = cross_site_matrix(result.final_locals, result.clients, spec) if cfg.cross_site else None
        summaries.append(write_seed_report(out / f"seed_{seed}", cfg, seed, result, cross))
        if log:
            final = result.reports[-1]
            log(f"seed {seed}: avg accuracy {100 * final.avg_accuracy_unweighted:.2f}% "
                f"(weighted {100 * final.avg_accuracy_weighted:.2f}%)")
    return summaries


# --- compare -------------------------------------------------------------------

def load_summaries(path: str | Path) -> list[dict[str, Any]]:
    """Summaries from a ``summary.json`` file or every ``seed_*`` of a run directory."""
    p = Path(path)
    files = [p] if p.is_file() else sorted(p.glob("seed_*/summary.json"), key=lambda f: int(f.parent.name[5:]))
    if not files:
        raise MisuseError(f"no summary.json found under {p}")
    out = []
    for f in files:
        doc = json.loads(f.read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {doc.get('schema_version')!r}", str(f))
        out.append(doc)
    return out


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    per_client: tuple[float, ...]
    average: float
    delta: float
    cross_site: float | None


def _row_label(s: dict[str, Any]) -> str:
    return f"{s['algorithm']}+{s['arm']}"


def compare_reports(paths: Sequence[str | Path], weighted: bool = False) -> list[ComparisonRow]:
    """One row per report (averaged over its seeds); delta is against the first row."""
    if not paths:
        raise MisuseError("compare needs at least one report")
    groups = [load_summaries(p) for p in paths]
    ref = groups[0][0]["config"]
    ref_seeds = sorted(s["seed"] for s in groups[0])
    mismatched = set()
    for path, group in zip(paths, groups):
        cfg = group[0]["config"]
        for key in ("dataset", "model"):
            if cfg[key] != ref[key]:
                mismatched.add(key)
        if sorted(s["seed"] for s in group) != ref_seeds:
            mismatched.add("seeds")
        if len({s["num_clients"] for s in group} | {groups[0][0]["num_clients"]}) != 1:
            mismatched.add("num_clients")
    if mismatched:
        raise ConfigError(f"reports are not comparable; mismatched fields: {sorted(mismatched)}", "compare")
    key = "avg_accuracy_weighted" if weighted else "avg_accuracy_unweighted"
    rows: list[ComparisonRow] = []
    for group in groups:
        per_client = np.mean([s["final"]["per_client_accuracy"] for s in group], axis=0)
        avg = float(np.mean([s["final"][key] for s in group]))
        cs = [s["cross_site_off_diagonal_mean"] for s in group]
        cross = float(np.mean(cs)) if all(c is not None for c in cs) else None
        base = rows[0].average if rows else avg
        rows.append(ComparisonRow(_row_label(group[0]), tuple(float(v) for v in per_client), avg,
                                  avg - base, cross))
    return rows


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Plain-text table; accuracies in percent with two decimals."""
    K = len(rows[0].per_client)
    header = ["method"] + [f"c{k}" for k in range(K)] + ["avg", "delta"]
    body = [[r.label] + [f"{100 * v:.2f}" for v in r.per_client] + [f"{100 * r.average:.2f}",
                                                                     f"{100 * r.delta:+.2f}"] for r in rows]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + body]
    return "\n".join(lines)


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    K = len(rows[0].per_client)
    return _csv(([r.label, *r.per_client, r.average, r.delta] for r in rows),
                ["method"] + [f"client_{k}" for k in range(K)] + ["average", "delta"])


# --- feature export ------------------------------------------------------------

def load_params(npz_path: str | Path, which: str, spec: ModelSpec) -> ParameterVector:
    prefix = "global" if which == "global" else f"local{which.split(':', 1)[1]}" if which.startswith("local:") else None
    if prefix is None:
        raise ConfigError(f"unknown model selector {which!r}; use 'global' or 'local:<k>'", "model")
    with np.load(npz_path) as z:
        segs = []
        for name, _, _ in spec.param_shapes():
            key = f"{prefix}__{name}"
            if key not in z:
                raise ConfigError(f"no parameters for {which!r} in {npz_path}", "model")
            segs.append((name, z[key]))
    return ParameterVector(segs)


def export_features(run_dir: str | Path, seed: int | None = None, layer: str = "penultimate",
                    which: str = "global") -> str:
    """CSV with one row per test sample: client_id, label, then the layer's activations.

    Test images go through each client's test-mode transform first.
    """
    if layer not in LAYER_TAGS:
        raise ConfigError(f"unknown layer tag {layer!r}; expected one of {LAYER_TAGS}", "layer")
    run_dir = Path(run_dir)
    cfg = parse_config(json.loads((run_dir / "config.json").read_text()))
    seed = cfg.seeds[0] if seed is None else seed
    seed_dir = run_dir / f"seed_{seed}"
    summary = json.loads((seed_dir / "summary.json").read_text())
    fed = cfg.load_federation()
    spec = cfg.model_spec(fed)
    params = load_params(seed_dir / "params.npz", which, spec)
    registry = None
    if summary["registry"] is not None:
        registry = StatsRegistry(tuple(StatsMessage.from_wire(m).stats for m in summary["registry"]))
    clients = build_clients(fed, cfg.augmentation.pipeline(fed.image_shape[0]), seed, registry)
    rows = []
    for c in clients:
        x = apply_pipeline(c.test_pipeline.with_mode(Mode.TEST), c.dataset.test_x, c.test_context())
        feats = features(spec, params, x) if layer == "penultimate" else forward(spec, params, x).data
        for label, f in zip(c.dataset.test_y, feats):
            rows.append([c.client_id, int(label), *(float(v) for v in f)])
    dim = spec.feature_dim if layer == "penultimate" else spec.num_classes
    return _csv(rows, ["client_id", "label"] + [f"f{i}" for i in range(dim)])
