"""Datasets, attack strategies and experiment orchestration."""

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, kernels, metrics
from .attacks import METHODS, AttackConfig, run_attack
from .errors import ParseError, UsageError
from .netcore import Instance, classify, forward, load_model
from .targets import AttackSpec, target_labels

DATA_HEADER = "MLADV-DATA v1"
RESULTS_HEADER = "# MLADV-RESULTS v1"
AGGREGATE_HEADER = "# MLADV-AGGREGATE v1"
HISTOGRAM_HEADER = "# MLADV-HISTOGRAM v1"
MANIFEST_FORMAT = "MLADV-MANIFEST v1"

VOC_NAMES = ("person", "sheep", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus",
             "car", "cat", "chair", "cow", "diningtable", "dog", "horse", "motorbike",
             "pottedplant", "sofa", "train", "tvmonitor")


@dataclass
class Dataset:
    name: str
    instances: list
    label_names: list

    def __post_init__(self):
        if not self.instances:
            raise UsageError("dataset has no instances")
        d = len(self.instances[0].features)
        l = len(self.instances[0].labels)
        for inst in self.instances:
            if len(inst.features) != d or len(inst.labels) != l:
                raise UsageError("instances have inconsistent dimensions")
        if len(self.label_names) != l:
            raise UsageError("label_names length does not match the label count")
        if len(set(self.label_names)) != l:
            raise UsageError("label names must be unique")
        if any(not name or any(ch.isspace() for ch in name) for name in self.label_names):
            raise UsageError("label names must be non-empty and contain no whitespace")

    @property
    def d(self):
        return len(self.instances[0].features)

    @property
    def l(self):
        return len(self.instances[0].labels)

    @property
    def X(self):
        return np.stack([inst.features for inst in self.instances])

    @property
    def Y(self):
        return np.stack([inst.labels for inst in self.instances])

    def label_index(self, name):
        try:
            return self.label_names.index(name)
        except ValueError:
            raise UsageError(f"unknown label {name!r}") from None


def save_dataset(ds, path):
    lines = [DATA_HEADER, f"{ds.d} {ds.l} {len(ds.instances)}", " ".join(ds.label_names)]
    for inst in ds.instances:
        feats = " ".join(f"{v:.17g}" for v in inst.features)
        labels = " ".join(str(int(v)) for v in inst.labels)
        lines.append(f"{feats} | {labels}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != DATA_HEADER:
        raise ParseError(f"expected header {DATA_HEADER!r}", 1)
    try:
        d, l, n = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise ParseError("expected 'd l n'", 2) from None
    if l < 2:
        raise ParseError("need at least two labels", 2)
    if d < 1:
        raise ParseError("need at least one feature", 2)
    if len(lines) < 3:
        raise ParseError("missing label names", 3)
    names = lines[2].split()
    if len(names) != l:
        raise ParseError(f"expected {l} label names, found {len(names)}", 3)
    if len(lines) - 3 < n:
        raise ParseError(f"expected {n} instance rows, found {len(lines) - 3}", len(lines) + 1)
    instances = []
    for k in range(n):
        lineno = k + 4
        row = lines[k + 3]
        if row.count("|") != 1:
            raise ParseError("expected exactly one '|' separator", lineno)
        left, right = row.split("|")
        try:
            feats = [float(t) for t in left.split()]
            labels = [int(t) for t in right.split()]
        except ValueError:
            raise ParseError("non-numeric entry", lineno) from None
        if len(feats) != d or len(labels) != l:
            raise ParseError(f"expected {d} features and {l} labels", lineno)
        if any(v not in (-1, 1) for v in labels):
            raise ParseError("labels must be -1 or 1", lineno)
        instances.append(Instance(feats, labels, uid=k))
    if any(row.strip() for row in lines[3 + n:]):
        raise ParseError("trailing content after the last instance", 4 + n)
    name = os.path.splitext(os.path.basename(path))[0]
    return Dataset(name, instances, names)


def default_label_rates(l, seed=0):
    """One frequent label (60%), one rare label (5%), the rest between 8% and 20%."""
    rng = np.random.default_rng(seed)
    rates = rng.uniform(0.08, 0.2, size=l)
    rates[0] = 0.6
    rates[1] = 0.05
    return rates


def _calibrate_rates(rates, iters=500):
    """Draw probabilities q with q / (1 - prod(1 - q)) == rates.

    Rejecting empty label vectors inflates every rate by the same factor, so
    the fixed point exists whenever the rates sum to more than one. Otherwise
    the plain rates are returned.
    """
    if rates.sum() <= 1.0:
        return rates
    q = rates.copy()
    for _ in range(iters):
        q = rates * (1.0 - np.prod(1.0 - q))
    return q


def synth_dataset(d=400, l=20, n=2000, seed=0, rates=None, amplitude=2.0, noise=0.1):
    """Prototype-mixture multi-label data in the unit box.

    Each label owns a random unit direction; an instance is
    ``clip(0.5 + amplitude * sum of its labels' directions + noise, 0, 1)``.
    Label vectors are redrawn until they contain a positive; the draw
    probabilities are calibrated so the observed rates match ``rates``.
    """
    if l < 2 or d < l:
        raise UsageError("need l >= 2 and d >= l")
    if n < 50:
        raise UsageError("need at least 50 instances")
    rng = np.random.default_rng(seed)
    rates = default_label_rates(l, seed) if rates is None else np.asarray(rates, dtype=float)
    if rates.shape != (l,) or np.any(rates <= 0) or np.any(rates >= 1):
        raise UsageError("rates must be l values in (0, 1)")
    draw = _calibrate_rates(rates)
    protos = rng.normal(size=(l, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    Y = np.empty((n, l), dtype=np.int64)
    for i in range(n):
        row = rng.random(l) < draw
        while not row.any():
            row = rng.random(l) < draw
        Y[i] = np.where(row, 1, -1)
    X = 0.5 + amplitude * ((Y == 1).astype(float) @ protos) + noise * rng.normal(size=(n, d))
    X = np.clip(X, 0.0, 1.0)
    names = list(VOC_NAMES[:l]) + [f"label{j:02d}" for j in range(len(VOC_NAMES), l)]
    instances = [Instance(X[i], Y[i], uid=i) for i in range(n)]
    return Dataset(f"synth-d{d}-l{l}-n{n}-s{seed}", instances, names)


def collect_attackable(instances, p, threshold=0.5):
    """Instances whose every label is classified correctly."""
    out = [inst for inst in instances
           if np.array_equal(classify(p, inst.features, threshold), inst.labels)]
    if not out:
        raise UsageError("no instance is classified correctly on all labels; retrain the model")
    return out


STRATEGIES = ("random_case", "extreme_case", "reduce_label", "augment_label", "fixed")


@dataclass(frozen=True)
class StrategySpec:
    """How attack targets are drawn. ``fixed`` applies ``flip``/``hold`` to every sample."""

    kind: str
    sample_count: int = 200
    label: str = None
    rng_seed: int = 0
    omega: str = "C"
    flip: tuple = ()
    hold: tuple = ()

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise UsageError(f"strategy must be one of {', '.join(STRATEGIES)}")
        if self.sample_count < 1:
            raise UsageError("sample_count must be at least 1")
        if self.kind in ("reduce_label", "augment_label") and not self.label:
            raise UsageError(f"{self.kind} needs a label")
        if self.kind == "fixed":
            AttackSpec(self.flip, self.hold, self.omega)  # validates
        object.__setattr__(self, "flip", tuple(int(i) for i in self.flip))
        object.__setattr__(self, "hold", tuple(int(i) for i in self.hold))
        AttackSpec((0,), (), self.omega)

    @property
    def name(self):
        return f"{self.kind}:{self.label}" if self.label else self.kind

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["flip"], d["hold"] = list(self.flip), list(self.hold)
        return d


def _resolve_label(label, label_names, l):
    if label_names is not None and label in label_names:
        return list(label_names).index(label)
    try:
        j = int(label)
    except (TypeError, ValueError):
        raise UsageError(f"unknown label {label!r}") from None
    if not 0 <= j < l:
        raise UsageError(f"label index {j} out of range")
    return j


def make_specs(X, strategy, label_names=None):
    """Sample ``strategy.sample_count`` (instance, AttackSpec) pairs without replacement."""
    if not X:
        raise UsageError("no attackable instances")
    l = len(X[0].labels)
    everything = range(l)
    om = strategy.omega
    j = None
    if strategy.kind in ("reduce_label", "augment_label"):
        j = _resolve_label(strategy.label, label_names, l)
    if strategy.kind == "fixed":
        AttackSpec(strategy.flip, strategy.hold, om).check_labels(l)
    rng = np.random.default_rng(strategy.rng_seed)
    out = []
    for k in rng.permutation(len(X)):
        inst = X[k]
        y = inst.labels
        pos = np.flatnonzero(y == 1)
        neg = np.flatnonzero(y == -1)
        if strategy.kind == "random_case":
            if len(pos) == 0 or len(neg) == 0:
                continue
            a = (int(rng.choice(pos)), int(rng.choice(neg)))
            spec = AttackSpec(a, tuple(i for i in everything if i not in a), om)
        elif strategy.kind == "extreme_case":
            spec = AttackSpec(tuple(everything), (), om)
        elif strategy.kind == "fixed":
            spec = AttackSpec(strategy.flip, strategy.hold, om)
        elif strategy.kind == "reduce_label":
            if y[j] != 1 or len(pos) < 2:
                continue
            spec = AttackSpec((j,), tuple(i for i in everything if i != j), om)
        else:
            if y[j] != -1:
                continue
            spec = AttackSpec((j,), tuple(i for i in everything if i != j), om)
        out.append((inst, spec))
        if len(out) == strategy.sample_count:
            return out
    raise UsageError(f"{strategy.name} needs {strategy.sample_count} eligible instances, "
                     f"found only {len(out)} (short by {strategy.sample_count - len(out)})")


# ---------------------------------------------------------------------------
# per-instance evaluation

def instance_metrics(res, threshold=0.5):
    spec = res.spec
    tgt = target_labels(res.y, spec)
    h = np.where(res.scores > threshold, 1, -1)
    return {
        "rmsd": res.rmsd,
        "hamming_A": metrics.hamming_on(spec.flip, h, tgt),
        "hamming_B": metrics.hamming_on(spec.hold, h, tgt),
        "instance_f1": metrics.instance_f1(h, tgt),
        "ranking_loss": metrics.ranking_loss(res.scores, tgt),
        "map": metrics.instance_ap(res.scores, tgt),
        "auc": metrics.instance_auc(res.scores, tgt),
        "kendall_tau_b": res.tau_b,
        "success": res.success,
    }


def _fmt(v):
    return metrics.format_value(v)


def _fmt_vec(v):
    return ",".join(f"{float(t):.17g}" for t in v)


def _idx(t):
    return ",".join(str(i) for i in t) or "-"


RESULT_COLUMNS = ("method", "uid", "status", "flip", "hold", "omega", "labels", "rmsd",
                  "satisfied_count", "n_constraints", "success", "tau_b", "param",
                  "param_value", "iterations", "hamming_A", "hamming_B", "instance_f1",
                  "ranking_loss", "map", "auc", "flags", "scores", "x_star")


def _result_row(method, inst, spec, res, m, error=None):
    if res is None:
        blank = ["N.A."] * (len(RESULT_COLUMNS) - 7)
        return [method, str(inst.uid), "failed:" + error.replace("\t", " "), _idx(spec.flip),
                _idx(spec.hold), spec.omega, _idx_labels(inst.labels)] + blank
    return [method, str(inst.uid), "ok", _idx(spec.flip), _idx(spec.hold), spec.omega,
            _idx_labels(inst.labels), _fmt(res.rmsd), str(res.satisfied_count),
            str(res.n_constraints), "1" if res.success else "0", _fmt(res.tau_b),
            res.param_name, _fmt(res.param_value), str(res.iterations), _fmt(m["hamming_A"]),
            _fmt(m["hamming_B"]), _fmt(m["instance_f1"]), _fmt(m["ranking_loss"]),
            _fmt(m["map"]), _fmt(m["auc"]), ",".join(res.flags) or "-",
            _fmt_vec(res.scores), _fmt_vec(res.x_star)]


def _idx_labels(y):
    return ",".join(str(int(v)) for v in y)


# ---------------------------------------------------------------------------
# worker pool

_WORKER = {}


def _init_worker(p, cfg, threshold):
    _WORKER.update(p=p, cfg=cfg, threshold=threshold)


def _run_one(task):
    method, inst, spec = task
    try:
        res = run_attack(method, inst.features, inst.labels, spec, _WORKER["p"], _WORKER["cfg"])
    except Exception as exc:  # recorded per row, never fatal
        return task, None, None, f"{type(exc).__name__}: {exc}"
    return task, res, instance_metrics(res, _WORKER["threshold"]), None


def run_attacks(p, pairs, methods, cfg, workers=1):
    """Run every method on every (instance, spec); returns rows in input order."""
    tasks = [(m, inst, spec) for m in methods for inst, spec in pairs]
    if workers <= 1:
        _init_worker(p, cfg, cfg.threshold)
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(p, cfg, cfg.threshold)) as pool:
        return list(pool.map(_run_one, tasks, chunksize=4))


# ---------------------------------------------------------------------------
# reports

HIST_BINS = 20


def _hist_rows(series, label_names, values_by_label):
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    rows = []
    for j in sorted(values_by_label):
        counts, _ = np.histogram(np.clip(values_by_label[j], 0.0, 1.0), bins=edges)
        for b in range(HIST_BINS):
            rows.append([series, label_names[j], f"{edges[b]:.2f}", f"{edges[b + 1]:.2f}",
                         str(int(counts[b]))])
    return rows


def histogram_rows(records, p, label_names):
    """Score histograms of every flipped label: clean inputs, then each method."""
    clean, per_method = {}, {}
    seen = set()
    for (method, inst, spec), res, _, _ in records:
        key = (inst.uid, spec)
        if key not in seen:
            seen.add(key)
            s0 = forward(p, inst.features)
            for j in spec.flip:
                clean.setdefault(j, []).append(s0[j])
        if res is not None:
            for j in spec.flip:
                per_method.setdefault(method, {}).setdefault(j, []).append(res.scores[j])
    rows = _hist_rows("original", label_names, clean)
    for method in per_method:
        rows += _hist_rows(method, label_names, per_method[method])
    return rows


def write_table(path, header, columns, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def read_table(path, header):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != header:
        raise ParseError(f"expected header {header!r}", 1)
    if len(lines) < 2:
        raise ParseError("missing column line", 2)
    cols = lines[1].split("\t")
    rows = []
    for k, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(cols):
            raise ParseError(f"expected {len(cols)} fields, found {len(parts)}", k)
        rows.append(dict(zip(cols, parts)))
    return cols, rows


AGGREGATE_COLUMNS = ("strategy", "method", "n", "n_failed", "success_rate", "rmsd",
                     "hamming_A", "hamming_B", "instance_f1", "ranking_loss", "map", "auc",
                     "kendall_tau_b", "label_map")


def aggregate_reports(strategy_name, records, methods):
    reports = []
    for method in methods:
        rows, S, T = [], [], []
        for (m, inst, spec), res, mets, err in records:
            if m != method:
                continue
            if res is None:
                rows.append({"failed": True})
                continue
            rows.append(mets)
            S.append(res.scores)
            T.append(target_labels(res.y, spec))
        lmap = metrics.label_wise_map(S, T) if S else metrics.UNDEFINED
        reports.append(metrics.aggregate(strategy_name, method, rows, lmap))
    return reports


def _aggregate_row(rep):
    out = []
    for k, v in zip(rep.__dataclass_fields__, rep.values()):
        out.append(str(v) if isinstance(v, (str, int)) else _fmt(v))
    return out


@dataclass
class ResultRecord:
    """One parsed row of a results file."""

    method: str
    uid: int
    spec: AttackSpec
    y: np.ndarray
    ok: bool
    fields: dict
    scores: np.ndarray = None
    x_star: np.ndarray = None
    x: np.ndarray = None


def _parse_idx(text):
    return () if text == "-" else tuple(int(t) for t in text.split(","))


def _parse_vec(text):
    return np.array([float(t) for t in text.split(",")], dtype=np.float64)


def load_results(path, dataset=None):
    """Parse a results file; with ``dataset`` the clean features are attached by uid."""
    cols, rows = read_table(path, RESULTS_HEADER)
    missing = set(RESULT_COLUMNS) - set(cols)
    if missing:
        raise ParseError(f"results file lacks columns {sorted(missing)}", 2)
    by_uid = {inst.uid: inst for inst in dataset.instances} if dataset is not None else {}
    out = []
    for k, row in enumerate(rows, start=3):
        try:
            spec = AttackSpec(_parse_idx(row["flip"]), _parse_idx(row["hold"]), row["omega"])
            rec = ResultRecord(row["method"], int(row["uid"]), spec,
                               np.array([int(t) for t in row["labels"].split(",")]),
                               row["status"] == "ok", row)
            if rec.ok:
                rec.scores = _parse_vec(row["scores"])
                rec.x_star = _parse_vec(row["x_star"])
        except (ValueError, UsageError) as exc:
            raise ParseError(f"bad results row: {exc}", k) from None
        if dataset is not None:
            if rec.uid not in by_uid:
                raise UsageError(f"instance {rec.uid} is not in the dataset")
            inst = by_uid[rec.uid]
            if not np.array_equal(inst.labels, rec.y):
                raise UsageError(f"labels of instance {rec.uid} differ from the dataset")
            rec.x = inst.features
        out.append(rec)
    return out


def _num(text):
    return metrics.UNDEFINED if text == "N.A." else float(text)


def aggregate_from_results(strategy_name, records):
    """Aggregate rows straight from a results file (same numbers as the run wrote)."""
    reports = []
    for method in dict.fromkeys(r.method for r in records):
        rows, S, T = [], [], []
        for rec in records:
            if rec.method != method:
                continue
            if not rec.ok:
                rows.append({"failed": True})
                continue
            m = {k: _num(rec.fields[k]) for k in metrics.ATTACK_METRICS if k != "kendall_tau_b"}
            m["kendall_tau_b"] = _num(rec.fields["tau_b"])
            m["success"] = rec.fields["success"] == "1"
            rows.append(m)
            S.append(rec.scores)
            T.append(target_labels(rec.y, rec.spec))
        lmap = metrics.label_wise_map(S, T) if S else metrics.UNDEFINED
        reports.append(metrics.aggregate(strategy_name, method, rows, lmap))
    return reports


def victim_report(p, instances, threshold=0.5):
    """Classifier quality on ``instances``: micro/macro F1, Hamming loss, ranking loss."""
    X = np.stack([inst.features for inst in instances])
    Y = np.stack([inst.labels for inst in instances])
    S = np.stack([forward(p, x) for x in X])
    H = np.where(S > threshold, 1, -1)
    return {
        "n": len(instances),
        "micro_f1": metrics.micro_f1(H, Y),
        "macro_f1": metrics.macro_f1(H, Y),
        "hamming_loss": metrics.hamming_loss(H, Y),
        "ranking_loss": metrics.nanmean([metrics.ranking_loss(s, y) for s, y in zip(S, Y)]),
        "attackable": int(np.sum(np.all(H == Y, axis=1))),
    }


# ---------------------------------------------------------------------------
# experiments

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_experiment(p, dataset, strategy, methods, cfg=None, out_dir=".", workers=1,
                   model_path=None, data_path=None, results_name="results.tsv"):
    """Attack a sampled batch with every method and write the report files.

    Returns ``(reports, records)``; the manifest written next to the outputs
    is enough to rerun the experiment with :func:`rerun_experiment`.
    """
    cfg = cfg or AttackConfig()
    methods = list(methods)
    model_path = os.path.abspath(model_path) if model_path else None
    data_path = os.path.abspath(data_path) if data_path else None
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    X = collect_attackable(dataset.instances, p, cfg.threshold)
    pairs = make_specs(X, strategy, dataset.label_names)
    records = run_attacks(p, pairs, methods, cfg, workers)
    os.makedirs(out_dir, exist_ok=True)

    outputs = (results_name, "aggregate.tsv", "histograms.tsv")
    write_table(os.path.join(out_dir, results_name), RESULTS_HEADER, RESULT_COLUMNS,
                [_result_row(m, inst, spec, res, mets, err)
                 for (m, inst, spec), res, mets, err in records])
    reports = aggregate_reports(strategy.name, records, methods)
    write_table(os.path.join(out_dir, "aggregate.tsv"), AGGREGATE_HEADER, AGGREGATE_COLUMNS,
                [_aggregate_row(r) for r in reports])
    write_table(os.path.join(out_dir, "histograms.tsv"), HISTOGRAM_HEADER,
                ("series", "label", "bin_lo", "bin_hi", "count"),
                histogram_rows(records, p, dataset.label_names))

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "backend": kernels.BACKEND,
        "model": {"path": model_path, "sha256": sha256_file(model_path) if model_path else None},
        "data": {"path": data_path, "sha256": sha256_file(data_path) if data_path else None},
        "strategy": strategy.as_dict(),
        "results_name": results_name,
        "workers": workers,
        "methods": methods,
        "attack_config": _jsonable(cfg.as_dict()),
        "outputs": {name: sha256_file(os.path.join(out_dir, name)) for name in outputs},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return reports, records


def _jsonable(d):
    out = {}
    for k, v in d.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_manifest(entry):
    entry = dict(entry)
    for k in ("epsilon_grid", "box"):
        if entry.get(k) is not None:
            entry[k] = tuple(entry[k])
    return AttackConfig(**entry)


def load_manifest(path):
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.lineno) from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"expected format {MANIFEST_FORMAT!r}", 1)
    return manifest


def rerun_experiment(manifest_path, out_dir, workers=1, check=True):
    """Repeat a recorded experiment into ``out_dir``.

    With ``check`` the input hashes must match the manifest. Returns the list
    of output files whose bytes differ from the recorded hashes (empty when
    the rerun is exact).
    """
    manifest = load_manifest(manifest_path)
    model_path = manifest["model"]["path"]
    data_path = manifest["data"]["path"]
    if not model_path or not data_path:
        raise UsageError("manifest does not record model and data paths")
    if check:
        for key, path in (("model", model_path), ("data", data_path)):
            if sha256_file(path) != manifest[key]["sha256"]:
                raise UsageError(f"{key} file {path} changed since the manifest was written")
    strategy = StrategySpec(**manifest["strategy"])
    run_experiment(load_model(model_path), load_dataset(data_path), strategy,
                   manifest["methods"], config_from_manifest(manifest["attack_config"]),
                   out_dir, workers, model_path, data_path, manifest["results_name"])
    return [name for name, digest in manifest["outputs"].items()
            if sha256_file(os.path.join(out_dir, name)) != digest]
