"""Scenario runs, results store and report tables."""

from __future__ import annotations

import csv
import fcntl
import io
import json
import logging
import os
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .config import TABLE_METHODS, TrainConfig
from .dataset import DomainDataset, ScenarioSpec, generate_domain, load_dataset, make_scenario, split_dataset
from .models import build_classifier, parameter_checksum, save_checkpoint
from .trainers import (TrainLog, build_ensemble, predict_probs, seed_everything, train_adamatch, train_baseline,
                       train_dbacs, train_offline_pl, train_online_pl)

log = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
METHOD_LABELS = {
    "lower-limit": "lower limit",
    "dbacs": "DBACS",
    "offline-pl": "Offline PL",
    "online-pl": "Online PL",
    "adamatch": "AdaMatch",
    "oracle": "Oracle",
}
EMPTY_CELL = "—"


class HarnessError(RuntimeError):
    pass


class DuplicateRowError(HarnessError):
    pass


# --- data ------------------------------------------------------------------------


def load_datasets(config: TrainConfig) -> dict[int, DomainDataset]:
    """Per-domain datasets with split tags, from ``data_dir`` or freshly generated."""
    if config.data_dir:
        root = Path(config.data_dir)
        out = {}
        for d in range(3):
            sub = root / f"domain_{d}"
            if sub.exists():
                ds = load_dataset(sub)
                out[d] = ds if (ds.splits == "test").any() else split_dataset(ds, config.test_fraction, config.data_seed)
        if not out:
            raise HarnessError(f"no domain_<d> datasets under {root}")
        return out
    return {
        d: split_dataset(generate_domain(d, counts, config.data_seed, config.side), config.test_fraction,
                         config.data_seed)
        for d, counts in config.domain_counts().items()
    }


# --- evaluation ------------------------------------------------------------------


def predictions(clf, x: np.ndarray, aligner=None) -> np.ndarray:
    return predict_probs(clf, x, through=aligner).argmax(dim=1).numpy()


def evaluate(clf, x: np.ndarray, y: np.ndarray, aligner=None) -> float:
    """Top-1 accuracy; inputs pass through ``aligner`` first when given."""
    if len(y) == 0:
        raise HarnessError("empty test set")
    return float((predictions(clf, x, aligner) == np.asarray(y)).mean())


def balanced_accuracy(clf, x: np.ndarray, y: np.ndarray, aligner=None) -> float:
    pred = predictions(clf, x, aligner)
    y = np.asarray(y)
    return float(np.mean([(pred[y == c] == c).mean() for c in np.unique(y)]))


# --- results store ---------------------------------------------------------------


@dataclass
class ResultsRow:
    source: int
    target: int
    mode: str
    target_label_fraction: float
    method: str
    arch: str
    accuracy: float | None
    seed: int
    runtime_seconds: float
    config_hash: str
    balanced_accuracy: float | None = None
    eval_path: str = "direct"
    checksum: str = ""
    error: str = ""

    def key(self) -> tuple:
        return (self.config_hash, self.mode, self.source, self.target, self.method, self.arch, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultsRow":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ResultsStore:
    """Line-delimited JSON rows in ``<dir>/results.jsonl``.

    Appends hold an exclusive lock and replace the file through a temporary
    sibling, so readers never see a partial row.
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.path = self.dir / RESULTS_FILE

    def rows(self) -> list[ResultsRow]:
        if not self.path.exists():
            return []
        return [ResultsRow.from_dict(json.loads(line)) for line in self.path.read_text().splitlines() if line.strip()]

    def append(self, row: ResultsRow, force: bool = False) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / ".lock", "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            existing = self.rows()
            if any(r.key() == row.key() for r in existing):
                if not force:
                    raise DuplicateRowError(f"row {row.key()} already stored; use --force to replace")
                existing = [r for r in existing if r.key() != row.key()]
            existing.append(row)
            fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".results.", suffix=".tmp")
            with os.fdopen(fd, "w") as f:
                f.write("".join(r.to_json() + "\n" for r in existing))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, self.path)

    def has(self, key: tuple) -> bool:
        return any(r.key() == key for r in self.rows())


# --- runs ------------------------------------------------------------------------


def _run_id(config: TrainConfig, spec: ScenarioSpec, method: str, arch: str) -> str:
    return f"{config.config_hash()}_{spec.mode}_{spec.source}-{spec.target}_{method}_{arch}_s{config.seed}"


def _spec(config: TrainConfig, source: int, target: int, mode: str | None = None) -> ScenarioSpec:
    mode = mode or config.mode
    fraction = config.target_label_fraction if mode == "ssda" else 0.0
    return ScenarioSpec(source, target, mode, fraction, config.seed)


def _fresh_classifier(config: TrainConfig, arch: str, side: int):
    seed_everything(config.seed, config.deterministic)
    return build_classifier(arch, side, pretrained=config.pretrained, width=config.width)


def _row(spec: ScenarioSpec, method: str, arch: str, config: TrainConfig, clf, x, y, started: float,
         aligner=None, checksum: str | None = None) -> ResultsRow:
    return ResultsRow(
        source=spec.source, target=spec.target, mode=spec.mode, target_label_fraction=spec.target_label_fraction,
        method=method, arch=arch, accuracy=evaluate(clf, x, y, aligner), seed=config.seed,
        runtime_seconds=round(time.perf_counter() - started, 3), config_hash=config.config_hash(),
        balanced_accuracy=balanced_accuracy(clf, x, y, aligner),
        eval_path="aligner" if aligner is not None else "direct",
        checksum=checksum or parameter_checksum(clf if aligner is None else aligner),
    )


def train_source_classifier(spec: ScenarioSpec, datasets: dict[int, DomainDataset], arch: str,
                            config: TrainConfig, log_: TrainLog | None = None):
    """Baseline on the labeled pool of the scenario (SL, plus TL in SSDA)."""
    scenario = make_scenario(spec, datasets)
    clf = _fresh_classifier(config, arch, datasets[spec.source].side)
    clf, _ = train_baseline(clf, scenario.labeled_x, scenario.labeled_y, config, log=log_)
    return clf, scenario


def run_lower_limit(spec: ScenarioSpec, datasets: dict[int, DomainDataset], arch: str,
                    config: TrainConfig) -> ResultsRow:
    started = time.perf_counter()
    clf, scenario = train_source_classifier(spec, datasets, arch, config)
    x, y = scenario.test[spec.target]
    return _row(spec, "lower-limit", arch, config, clf, x, y, started)


def run_oracle(target: int, datasets: dict[int, DomainDataset], arch: str, config: TrainConfig,
               source: int | None = None) -> ResultsRow:
    """Baseline trained on the target's own labeled train split.

    ``source`` only places the row in that source's table.
    """
    started = time.perf_counter()
    ds = datasets[target]
    x, y = ds.subset("train")
    clf = _fresh_classifier(config, arch, ds.side)
    clf, _ = train_baseline(clf, x, y, config)
    spec_source = source if source is not None else (target + 1) % 3
    spec = _spec(config, spec_source, target)
    xt, yt = ds.subset("test")
    return _row(spec, "oracle", arch, config, clf, xt, yt, started)


def run_scenario(spec: ScenarioSpec, method: str, arch: str, config: TrainConfig,
                 datasets: dict[int, DomainDataset], store: ResultsStore | None = None,
                 force: bool = False, source_classifier=None) -> ResultsRow:
    """Train with ``method`` and evaluate on the target test split.

    DBACS evaluates the frozen source classifier on F-aligned target images.
    Training failures become rows with ``accuracy=None`` and an error tag.
    """
    method = "lower-limit" if method == "baseline" else method
    started = time.perf_counter()
    config = config.replace(seed=spec.seed) if spec.seed != config.seed else config
    if store is not None and not force:
        key = (config.config_hash(), spec.mode, spec.source, spec.target, method, arch, config.seed)
        if store.has(key):
            raise DuplicateRowError(f"row {key} already stored; use --force to replace")
    run_id = _run_id(config, spec, method, arch)
    train_log = TrainLog.for_run(config.runs_dir, run_id)
    try:
        if method == "oracle":
            row = run_oracle(spec.target, datasets, arch, config, source=spec.source)
        elif method == "lower-limit":
            row = run_lower_limit(spec, datasets, arch, config)
        else:
            scenario = make_scenario(spec, datasets)
            side = datasets[spec.source].side
            x, y = scenario.test[spec.target]
            if method == "dbacs":
                if source_classifier is None:
                    f_cc, _ = train_source_classifier(_spec(config, spec.source, spec.target, "uda"), datasets,
                                                      arch, config)
                else:
                    f_cc = source_classifier
                f_cc.freeze()
                seed_everything(config.seed, config.deterministic)
                ens = build_ensemble(f_cc, config)
                run_dir = Path(config.runs_dir) / run_id if config.runs_dir else None
                ens, _ = train_dbacs(ens, scenario, config, log=train_log, run_dir=run_dir)
                row = _row(spec, method, arch, config, f_cc, x, y, started, aligner=ens.F)
            else:
                trainer = {"offline-pl": train_offline_pl, "online-pl": train_online_pl,
                           "adamatch": train_adamatch}[method]
                clf, _ = trainer(_fresh_classifier(config, arch, side), scenario, config, log=train_log)
                row = _row(spec, method, arch, config, clf, x, y, started)
                if config.runs_dir:
                    save_checkpoint(clf, Path(config.runs_dir) / run_id / "ckpt_final", "classifier", arch, side)
    except (RuntimeError, ValueError) as exc:
        log.exception("run %s failed", run_id)
        row = ResultsRow(spec.source, spec.target, spec.mode, spec.target_label_fraction, method, arch, None,
                         config.seed, round(time.perf_counter() - started, 3), config.config_hash(),
                         error=f"{type(exc).__name__}: {exc}")
    if store is not None:
        store.append(row, force=force)
    return row


def run_matrix(config: TrainConfig, mode: str, store: ResultsStore, force: bool = False,
               datasets: dict[int, DomainDataset] | None = None) -> list[ResultsRow]:
    """Every configured (seed, arch, source->target, method) cell of one mode.

    Oracle and (UDA) lower-limit classifiers are trained once per domain and
    reused across pairs; in UDA the lower-limit classifier also serves as the
    frozen DBACS classifier.
    """
    config = config.replace(mode=mode)
    datasets = load_datasets(config) if datasets is None else datasets
    config_hash = config.config_hash()
    rows = []
    for seed in config.seeds:
        cfg = config.replace(seed=seed)
        for arch in config.arch_list:
            oracle_cache: dict[int, ResultsRow] = {}
            source_cache: dict[int, tuple] = {}
            for source, target in config.pair_list():
                spec = _spec(cfg, source, target, mode)
                for method in config.methods:
                    method = "lower-limit" if method == "baseline" else method
                    key = (config_hash, mode, source, target, method, arch, seed)
                    if store.has(key) and not force:
                        log.info("skip stored %s", key)
                        continue
                    log.info("run %s %s %s seed=%d", spec.name, method, arch, seed)
                    if method == "oracle":
                        if target not in oracle_cache:
                            oracle_cache[target] = run_oracle(target, datasets, arch, cfg, source=source)
                        cached = oracle_cache[target]
                        row = ResultsRow(**{**asdict(cached), "source": source, "mode": mode,
                                            "target_label_fraction": spec.target_label_fraction})
                        store.append(row, force=force)
                    elif mode == "uda" and method in ("lower-limit", "dbacs"):
                        if source not in source_cache:
                            started = time.perf_counter()
                            clf, _ = train_source_classifier(spec, datasets, arch, cfg)
                            source_cache[source] = (clf, time.perf_counter() - started)
                        clf, train_seconds = source_cache[source]
                        if method == "lower-limit":
                            x, y = datasets[target].subset("test")
                            row = _row(spec, method, arch, cfg, clf, x, y, time.perf_counter() - train_seconds)
                            store.append(row, force=force)
                        else:
                            import copy

                            row = run_scenario(spec, method, arch, cfg, datasets, store, force,
                                               source_classifier=copy.deepcopy(clf))
                    else:
                        row = run_scenario(spec, method, arch, cfg, datasets, store, force)
                    rows.append(row)
    return rows


# --- report ----------------------------------------------------------------------


@dataclass
class Table:
    mode: str
    source: int
    columns: list[tuple[int, str]]
    cells: dict[tuple[str, tuple[int, str]], tuple[float, int] | None]

    @property
    def title(self) -> str:
        return f"{self.mode.upper()} models accuracy - source domain {self.source}"

    @property
    def stem(self) -> str:
        return f"{self.mode}_source_{self.source}"

    def header(self) -> list[str]:
        return ["Model"] + [f"{self.source}→{t} {arch}" for t, arch in self.columns]

    def body(self) -> list[list[str]]:
        out = []
        for method in TABLE_METHODS:
            line = [METHOD_LABELS[method]]
            for col in self.columns:
                cell = self.cells.get((method, col))
                line.append(EMPTY_CELL if cell is None else f"{cell[0]:.4f} (n={cell[1]})")
            out.append(line)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.body())
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", "", "| " + " | ".join(self.header()) + " |",
                 "|" + "---|" * len(self.header())]
        lines += ["| " + " | ".join(row) + " |" for row in self.body()]
        return "\n".join(lines) + "\n"


def build_tables(rows: list[ResultsRow]) -> list[Table]:
    """One table per (mode, source); cells are seed means of non-null accuracies."""
    if not rows:
        raise HarnessError("results store is empty")
    grouped: dict[tuple[str, int], dict] = defaultdict(lambda: defaultdict(list))
    columns: dict[tuple[str, int], list] = defaultdict(list)
    archs_seen: list[str] = []
    for r in rows:
        if r.arch not in archs_seen:
            archs_seen.append(r.arch)
    for r in rows:
        table_key = (r.mode, r.source)
        col = (r.target, r.arch)
        if col not in columns[table_key]:
            columns[table_key].append(col)
        if r.accuracy is not None and r.method in METHOD_LABELS:
            grouped[table_key][(r.method, col)].append(r.accuracy)
    tables = []
    for (mode, source) in sorted(columns, key=lambda k: (k[0] != "uda", k[0], k[1])):
        cols = sorted(columns[(mode, source)], key=lambda c: (c[0], archs_seen.index(c[1])))
        cells = {key: (float(np.mean(vals)), len(vals)) for key, vals in grouped[(mode, source)].items()}
        tables.append(Table(mode, source, cols, cells))
    return tables


def report(store: ResultsStore, out_dir: str | Path | None = None, fmt: str = "md") -> list[Path]:
    if fmt not in ("csv", "md"):
        raise HarnessError(f"unknown report format {fmt!r}")
    out_dir = Path(out_dir) if out_dir is not None else store.dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for table in build_tables(store.rows()):
        path = out_dir / f"{table.stem}.{fmt}"
        path.write_text(table.to_csv() if fmt == "csv" else table.to_markdown())
        written.append(path)
    return written


def source_classifier_accuracy(clf, x: np.ndarray, y: np.ndarray) -> float:
    with torch.no_grad():
        return evaluate(clf, x, y)
