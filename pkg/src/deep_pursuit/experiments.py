"""Experiment orchestration and the files a run leaves behind.

Each (seed, mode, T) cell is trained, swept over attack strengths and traced.
Its rows are appended to the CSV files as soon as the cell finishes, so an
aborted run keeps its completed cells.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .adversarial import epsilon_sweep
from .checkpoint import checkpoint_save
from .config import ExperimentConfig
from .data import DatasetHandle, downsample, load_cifar10, synth_dataset, synth_textures
from .dictionary import dictionary_metrics
from .exceptions import DataError, OperatorTooLargeError, TopologyError
from .operators import NetworkOperators
from .pursuit import PursuitConfig, run_pursuit
from .records import CSV_FIELDS, RunRecord
from .training import TrainConfig, train

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("config_hash", "seed", "mode", "T", "epoch", "train_loss", "train_acc", "clean_acc",
                  "robust_acc", "epsilon", "converged", "wall_s")
TRACE_FIELDS = ("config_hash", "seed", "mode", "T", "iteration", "layer", "residual", "objective")


def format_value(value) -> str:
    """Locale-independent text: 6 significant digits for floats."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6g")
    return str(value)


@dataclass
class ExperimentResult:
    records: list = field(default_factory=list)
    history: list = field(default_factory=list)
    run_dir: Path | None = None
    errors: list = field(default_factory=list)


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------


def _synthetic(cfg: ExperimentConfig, kind: str, shape: tuple, classes: int):
    tr = cfg.train
    if kind == "textures":
        if len(shape) != 3:
            raise DataError("texture images need a (channels, height, width) network input")
        return tuple(synth_textures(classes, n, tr.data_seed, shape=shape, noise=tr.synth_noise, split=split)
                     for n, split in ((tr.train_samples, "train"), (tr.test_samples, "test")))
    dim = int(np.prod(shape))
    kw = dict(margin=tr.synth_margin, noise=tr.synth_noise, shape=shape)
    return (synth_dataset(classes, dim, tr.train_samples, tr.data_seed, split="train", **kw),
            synth_dataset(classes, dim, tr.test_samples, tr.data_seed, split="test", **kw))


def load_datasets(cfg: ExperimentConfig) -> tuple[DatasetHandle, DatasetHandle]:
    """Train and test splits for ``cfg``.

    CIFAR-10 is read from ``data_dir`` (or the environment); when it is missing
    and ``fallback`` names a synthetic generator, that generator is used instead
    and the substitution is visible in the datasets' provenance.
    """
    spec = cfg.network_spec(cfg.pursuit.modes[0])
    shape = tuple(spec.input_shape)
    tr = cfg.train
    if tr.dataset != "cifar10":
        return _synthetic(cfg, tr.dataset, shape, spec.n_classes)
    directory = tr.data_dir or None
    try:
        train_ds = downsample(load_cifar10(directory, "train").subset(tr.train_samples), tr.downsample)
        test_ds = downsample(load_cifar10(directory, "test").subset(tr.test_samples), tr.downsample)
    except DataError as exc:
        if not tr.fallback:
            raise
        log.warning("CIFAR-10 unavailable (%s); falling back to %s data", exc, tr.fallback)
        return _synthetic(cfg, tr.fallback, shape, spec.n_classes)
    if train_ds.images.shape[1:] != shape:
        raise DataError(f"dataset images {train_ds.images.shape[1:]} do not match network input {shape}")
    return train_ds, test_ds


# ----------------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------------


def write_table(stream, fields: tuple, rows) -> None:
    """CSV with a header line; ``rows`` are mappings keyed by ``fields``."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([format_value(row[f]) for f in fields])


class _CsvSink:
    def __init__(self, path: Path, fields: tuple):
        self.fields = fields
        self._fh = path.open("w", newline="")
        write_table(self._fh, fields, ())

    def write(self, rows) -> None:
        csv.writer(self._fh, lineterminator="\n").writerows(
            [format_value(row[f]) for f in self.fields] for row in rows)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _record_row(rec: RunRecord) -> dict:
    return {f: getattr(rec, f) for f in CSV_FIELDS}


def emit_csv(records, path) -> Path:
    """Write the fixed-schema results table; one line per record plus the header."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    path = Path(path)
    sink = _CsvSink(path, CSV_FIELDS)
    try:
        sink.write(_record_row(r) for r in records)
    finally:
        sink.close()
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# SVG line charts
# ----------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")
_W, _H, _PAD = 640, 400, 60


def _svg_chart(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    pts = [p for s in series.values() for p in s if math.isfinite(p[1])]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(x):
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
           f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
           f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
           f'<text x="{_W / 2:.1f}" y="{_H - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
           f'<text x="15" y="{_H / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {_H / 2:.1f})">{escape(ylabel)}</text>']
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{sx(fx):.1f}" y="{_H - _PAD + 16}" text-anchor="middle" '
                   f'font-size="10">{format(fx, ".3g")}</text>')
        out.append(f'<text x="{_PAD - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" '
                   f'font-size="10">{format(fy, ".3g")}</text>')
    for i, (label, points) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        good = [(x, y) for x, y in sorted(points) if math.isfinite(y)]
        if good:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
            for x, y in good:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        ly = _PAD + 16 * i
        out.append(f'<rect x="{_W - _PAD - 110}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{_W - _PAD - 95}" y="{ly}" font-size="11">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _mean_by(rows, key, value):
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(value(r))
    return {k: float(np.mean(v)) for k, v in groups.items()}


PLOT_KINDS = ("accuracy_vs_epsilon", "accuracy_vs_T", "residual_vs_iteration", "metric_vs_T")


def emit_svg_plot(records, kind: str, path) -> Path:
    """Render one chart from records (seed-averaged); output bytes depend only on the records."""
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    series: dict = {}
    if kind == "accuracy_vs_epsilon":
        t_max = {}
        for r in records:
            t_max[r.mode] = max(t_max.get(r.mode, 0), r.T)
        rows = [r for r in records if r.T == t_max[r.mode]]
        for (mode, eps), v in _mean_by(rows, lambda r: (r.mode, r.epsilon), lambda r: r.robust_acc).items():
            series.setdefault(f"{mode} T={t_max[mode]}", []).append((eps * 255, v))
        title, xl, yl = "Robust accuracy vs attack strength", "epsilon x 255", "accuracy"
    elif kind == "accuracy_vs_T":
        eps = max(r.epsilon for r in records)
        rows = [r for r in records if r.epsilon == eps]
        for (mode, t), v in _mean_by(rows, lambda r: (r.mode, r.T), lambda r: r.robust_acc).items():
            series.setdefault(mode, []).append((t, v))
        title, xl, yl = f"Robust accuracy vs iterations (epsilon={eps * 255:.3g}/255)", "T", "accuracy"
    elif kind == "residual_vs_iteration":
        cells = {}
        for r in records:
            if r.residual_trace:
                cells.setdefault((r.mode, r.T, r.seed), r.residual_trace)
        for (mode, t, _), trace in sorted(cells.items()):
            for it, layers in enumerate(trace):
                for layer, v in enumerate(layers, 1):
                    series.setdefault(f"{mode} T={t} L{layer}", []).append((it, v))
        series = {k: sorted(_mean_by(v, lambda p: p[0], lambda p: p[1]).items()) for k, v in series.items()}
        title, xl, yl = "Reconstruction residual per layer", "iteration", "mean residual norm"
    elif kind == "metric_vs_T":
        for metric in ("coherence", "frame_potential"):
            for (mode, t), v in _mean_by(records, lambda r: (r.mode, r.T), lambda r: getattr(r, metric)).items():
                series.setdefault(f"{mode} {metric}", []).append((t, v))
        title, xl, yl = "Dictionary metrics vs iterations", "T", "value"
    else:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    path = Path(path)
    path.write_text(_svg_chart(series, title, xl, yl))
    return path


# ----------------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------------


def pursuit_mode(label: str) -> str:
    return "dp" if label == "DP-res" else label.lower().replace("-", "")


def _cells(cfg: ExperimentConfig):
    for seed in cfg.train.seeds:
        for label in cfg.pursuit.modes:
            for T in ((0,) if label == "L-TP" else cfg.pursuit.T):
                yield seed, label, T


def trace_rows(rec: RunRecord, state) -> list[dict]:
    rows = []
    for it, (obj, layers) in enumerate(zip(state.objective_trace, state.residual_trace)):
        for layer, res in enumerate(layers, 1):
            rows.append({"config_hash": rec.config_hash, "seed": rec.seed, "mode": rec.mode, "T": rec.T,
                         "iteration": it, "layer": layer, "residual": res, "objective": obj})
    return rows


def run_cell(cfg: ExperimentConfig, seed: int, label: str, T: int, train_ds: DatasetHandle,
             test_ds: DatasetHandle, config_hash: str = ""):
    """Train and evaluate one model; returns ``(params, history, sweep_records, trace_state)``."""
    spec = cfg.network_spec(label)
    tr = cfg.train
    tcfg = TrainConfig(epochs=tr.epochs, batch_size=tr.batch_size, lr=tr.lr, momentum=tr.momentum,
                       weight_decay=tr.weight_decay, seed=seed, mode=pursuit_mode(label), T=T,
                       alpha=cfg.pursuit.alpha, norm=cfg.pursuit.norm, schedule=tr.schedule,
                       attack_epsilon=cfg.attack.train_epsilon, eval_samples=tr.eval_samples or None,
                       label=label)
    params, history = train(train_ds.as_tuple(), spec, tcfg, validation=test_ds.as_tuple(),
                            config_hash=config_hash)
    pconf = tcfg.pursuit
    start = time.perf_counter()
    epsilons = sorted(set((0.0,) + tuple(cfg.attack.epsilons)))
    rows = epsilon_sweep(test_ds.as_tuple(), params, pconf, epsilons, mode_label=label, seed=seed,
                         config_hash=config_hash, epoch=tr.epochs)
    try:
        metrics = dictionary_metrics(params)
    except OperatorTooLargeError as exc:
        log.warning("dictionary metrics skipped: %s", exc)
        metrics = {}
    traced = PursuitConfig(T=T, mode=pconf.mode, alpha=pconf.alpha, trace=True)
    x_trace = test_ds.images[:max(1, cfg.attack.trace_samples)]
    state = run_pursuit(x_trace, params, traced, NetworkOperators(params))
    wall = time.perf_counter() - start
    for r in rows:
        for k, v in metrics.items():
            setattr(r, k, v)
        r.objective = state.objective_trace[-1]
        r.objective_trace = list(state.objective_trace)
        r.residual_trace = [list(v) for v in state.residual_trace]
        r.wall_s += wall / len(rows)
    return params, history, rows, state


def _run_dir(cfg: ExperimentConfig, out_dir) -> Path:
    base = Path(out_dir if out_dir is not None else cfg.output.dir)
    name = cfg.hash()
    if cfg.output.timestamp:
        name = time.strftime("%Y%m%d-%H%M%S") + "-" + name
    run_dir = base / name
    suffix = 1
    while run_dir.exists():
        suffix += 1
        run_dir = base / f"{name}-{suffix}"
    run_dir.mkdir(parents=True)
    return run_dir


def run_experiment(cfg: ExperimentConfig, out_dir=None, datasets=None, sweep: bool = True) -> ExperimentResult:
    """Run every configured cell, writing artifacts under a fresh run directory.

    ``datasets`` may supply ``(train, test)`` handles directly. An L-BP cell on
    a network with skips is reported and skipped; other errors abort the run
    after the completed cells have been flushed to disk.
    """
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    log.info(train_ds.balance_report())
    config_hash = cfg.hash()
    result = ExperimentResult(run_dir=_run_dir(cfg, out_dir))
    run_dir = result.run_dir
    (run_dir / "config.resolved.ini").write_text(cfg.resolved_text())
    if cfg.output.checkpoints:
        (run_dir / "checkpoints").mkdir()
    results = _CsvSink(run_dir / "results.csv", CSV_FIELDS)
    history = _CsvSink(run_dir / "history.csv", HISTORY_FIELDS)
    traces = _CsvSink(run_dir / "traces.csv", TRACE_FIELDS)
    try:
        for seed, label, T in _cells(cfg):
            log.info("cell seed=%d mode=%s T=%d", seed, label, T)
            try:
                params, hist, rows, state = run_cell(cfg, seed, label, T, train_ds, test_ds, config_hash)
            except TopologyError as exc:
                msg = f"{label} T={T} seed={seed}: {exc}"
                log.error("skipping cell: %s", msg)
                result.errors.append(msg)
                continue
            if cfg.output.checkpoints:
                checkpoint_save(params, run_dir / "checkpoints" / f"{label}_T{T}_seed{seed}.dpck")
            history.write({f: getattr(h, f) for f in HISTORY_FIELDS} for h in hist)
            result.history.extend(hist)
            if sweep:
                results.write(_record_row(r) for r in rows)
                traces.write(trace_rows(rows[0], state))
                result.records.extend(rows)
    finally:
        for sink in (results, history, traces):
            sink.close()
    if cfg.output.plots and result.records:
        for kind in PLOT_KINDS:
            emit_svg_plot(result.records, kind, run_dir / f"{kind}.svg")
    return result
