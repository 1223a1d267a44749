"""Scenario orchestration: build the attack data, train, unlearn, measure, report."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import condense as cond
from . import data, detect, nn
from . import unlearn as ul
from .errors import ConfigurationError, ConvergenceWarning

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
SCENARIO_KINDS = ("full", "partial", "pood")
DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 1.0)
INFORMATIVE_ID_BASE = 900_000_000

COLUMNS = [
    "scenario",
    "dataset",
    "method",
    "seed",
    "status",
    "tau",
    "steps",
    "forget_size_normal",
    "forget_size_informative",
    "acc_before",
    "acc_after_normal",
    "acc_after_informative",
    "drop_normal",
    "drop_informative",
    "trace_normal",
    "trace_informative",
    "acc_before_clean",
    "injection_delta",
    "budget_mean_normal",
    "budget_mean_informative",
    "budget_closed_normal",
    "budget_closed_informative",
    "tpr_ss",
    "tpr_que",
    "tpr_strip",
    "notes",
]
FLOAT_COLUMNS = {
    "tau", "acc_before", "acc_after_normal", "acc_after_informative", "drop_normal", "drop_informative",
    "acc_before_clean", "injection_delta", "budget_mean_normal", "budget_mean_informative",
    "budget_closed_normal", "budget_closed_informative", "tpr_ss", "tpr_que", "tpr_strip",
}
INT_COLUMNS = {"seed", "steps", "forget_size_normal", "forget_size_informative"}
TRACE_COLUMNS = {"trace_normal", "trace_informative"}


# ---------------------------------------------------------------- configuration


def default_config() -> dict:
    """The desk-scale configuration tree (JSON-compatible)."""
    return {
        "scenario": {
            "name": "scenario-1",
            "kind": "full",
            "dataset": "mnist",
            "fraction": 1.0,
            "pood_source": "digits",
            "ipc": 10,
            "methods": list(ul.METHODS),
            "seeds": [0],
            "train_size": None,
            "rounds": 1,
            "max_injection_fraction": 0.05,
            "budget": False,
            "detectors": False,
        },
        "condense": {"iterations": 500, "image_lr": 1.0, "real_batch": 64, "width": 16, "depth": 3,
                     "augmentation": True},
        "train": {"epochs": 20, "batch_size": 50, "learning_rate": 0.05, "momentum": 0.0,
                  "schedule": "cosine", "weight_decay": 0.0, "precision": "float32"},
        "unlearn": {"substitute": "blur", "blur_sigma": 2.0, "damping": 0.01, "cg_iters": 100,
                    "cg_tol": 1e-4, "probe_size": 512, "steps": 1, "steps_grid": [1, 3, 10], "max_drop": 0.02, "reduction": "sum",
                    "tau_grid": {k: list(v) for k, v in ul.DEFAULT_TAU_GRID.items()}},
        "budget": {"lr": 0.5, "iterations": 100},
        "detect": {"que_alpha": 4.0, "que_clean_fraction": 0.5, "strip_overlays": 20, "strip_fpr": 0.10,
                   "flag_multiplier": 1.5, "poison_rate": 0.05, "target_label": 0},
    }


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(tree: dict) -> str:
    return hashlib.sha256(canonical_json(tree).encode()).hexdigest()


@dataclass
class ScenarioSpec:
    """One scenario plus the configuration tree that drives every stage."""

    config: dict = field(default_factory=default_config)

    def __post_init__(self):
        self.config = merge_config(default_config(), self.config)
        s = self.config["scenario"]
        if s["kind"] not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario kind {s['kind']!r}")
        if s["kind"] == "partial" and not any(math.isclose(s["fraction"], f) for f in DEFAULT_FRACTIONS):
            if not s.get("allow_any_fraction", False):
                raise ConfigurationError(f"fraction {s['fraction']} not in {DEFAULT_FRACTIONS}")
        bad = set(s["methods"]) - set(ul.METHODS)
        if bad:
            raise ConfigurationError(f"unknown methods {sorted(bad)}")
        if s["rounds"] < 1:
            raise ConfigurationError("rounds must be >= 1")

    @classmethod
    def make(cls, **scenario) -> "ScenarioSpec":
        """Shorthand: keyword overrides of the ``scenario`` subtree; ``config=`` merges a full tree."""
        tree = scenario.pop("config", {})
        return cls(merge_config(tree, {"scenario": scenario}))

    @property
    def scenario(self) -> dict:
        return self.config["scenario"]

    @property
    def seeds(self):
        return [int(x) for x in self.scenario["seeds"]]

    def digest(self) -> str:
        return config_digest(self.config)


def condense_config(spec: ScenarioSpec, seed: int, knowledge: data.LabeledDataset, ipc: int) -> cond.CondenseConfig:
    c = dict(spec.config["condense"])
    smallest = min(len(knowledge.class_indices(k)) for k in range(knowledge.num_classes))
    c["real_batch"] = min(int(c["real_batch"]), smallest)
    return cond.CondenseConfig(ipc=ipc, seed=seed, precision=spec.config["train"]["precision"], **c)


def train_config(spec: ScenarioSpec, seed: int, ledger: bool) -> nn.TrainConfig:
    t = {k: v for k, v in spec.config["train"].items() if k != "precision"}
    return nn.TrainConfig(seed=seed, record_ledger=ledger, batch_partition="segregated" if ledger else "mixed", **t)


def hyperparams(spec: ScenarioSpec, tau: float = 0.0, rounds: int = 1, steps=None) -> ul.Hyperparams:
    u = spec.config["unlearn"]
    return ul.Hyperparams(
        tau=tau, steps=int(u["steps"] if steps is None else steps), rounds=rounds, damping=u["damping"], cg_iters=int(u["cg_iters"]),
        cg_tol=u["cg_tol"], probe_size=int(u["probe_size"]), substitute=u["substitute"],
        blur_sigma=u["blur_sigma"], reduction=u["reduction"],
    )


# ---------------------------------------------------------------- per-seed artifacts


def stratified_sample(ds: data.LabeledDataset, n: int, rng) -> np.ndarray:
    """Indices of a class-stratified random sample of size ``n``."""
    counts = data.stratified_counts(ds.labels, n / len(ds))
    idx = [rng.choice(ds.class_indices(c), k, replace=False) for c, k in counts.items()]
    return np.sort(np.concatenate(idx))


@dataclass
class SeedRun:
    """Everything one seed of a scenario produces before unlearning."""

    seed: int
    train: data.LabeledDataset  # injected, tagged training set
    test: data.LabeledDataset
    knowledge: data.LabeledDataset
    synthetic: Optional[cond.SyntheticSet]
    informative_ids: np.ndarray
    control_ids: np.ndarray
    initial: nn.Model
    model: nn.Model
    ledger: object
    digests: dict

    def subset(self, ids) -> data.LabeledDataset:
        return self.train.select_ids(ids)

    @property
    def base_ids(self) -> np.ndarray:
        mask = self.train.tags == "base"
        return self.train.ids[mask]

    def context(self, probe_seed: int = 0) -> ul.UnlearnContext:
        return ul.UnlearnContext(self.train, self.digests, self.ledger, probe_seed)


def load_victim_data(spec: ScenarioSpec, seed: int):
    s = spec.scenario
    train = data.load_dataset(s["dataset"], "train")
    test = data.load_dataset(s["dataset"], "test")
    if s.get("train_size"):
        train = train.subset(stratified_sample(train, int(s["train_size"]), np.random.default_rng([seed, 7])))
    return train, test


def attacker_knowledge(spec: ScenarioSpec, train: data.LabeledDataset, seed: int) -> data.LabeledDataset:
    s = spec.scenario
    if s["kind"] == "full":
        return train
    if s["kind"] == "partial":
        return data.knowledge_subset(data.KnowledgeView(train, float(s["fraction"]), seed))
    return data.load_dataset(s["pood_source"], "train")


def prepare_seed(spec: ScenarioSpec, seed: int, inject: bool = True, ledger: Optional[bool] = None) -> SeedRun:
    """Condense, inject, and train one seed of the scenario."""
    s = spec.scenario
    train, test = load_victim_data(spec, seed)
    ipc = int(s["ipc"])
    n_inf = ipc * train.num_classes
    if inject and n_inf / len(train) > s["max_injection_fraction"] + 1e-12:
        raise ConfigurationError(f"injection of {n_inf} exceeds {s['max_injection_fraction']:.0%} of {len(train)}")
    rng = np.random.default_rng([seed, 1])
    control_idx = stratified_sample(train, n_inf, rng)
    tags = np.full(len(train), "base", dtype=object)
    tags[control_idx] = "control"
    train = data.LabeledDataset(train.images, train.labels, train.ids, tags, train.name)
    knowledge, synthetic = train, None
    parts = [train]
    inf_ids = np.zeros(0, np.int64)
    if inject:
        knowledge = attacker_knowledge(spec, train, seed)
        synthetic = cond.condense(knowledge, condense_config(spec, seed, knowledge, ipc), num_classes=train.num_classes)
        injected = synthetic.to_dataset(INFORMATIVE_ID_BASE)
        inf_ids = injected.ids
        parts.append(injected)
    full = data.concat(*parts)
    if ledger is None:
        ledger = "amnesiac" in s["methods"]
    init = nn.init_model(nn.convnet(train.num_classes, train.image_shape), seed, spec.config["train"]["precision"])
    model, led = nn.train(init, full, train_config(spec, seed, ledger))
    return SeedRun(seed, full, test, knowledge, synthetic, inf_ids, train.ids[control_idx], init, model, led,
                   full.digests())


def train_unseen(spec: ScenarioSpec, run: SeedRun) -> nn.Model:
    """A model trained like ``run.model`` but never shown the informative or control samples."""
    clean = run.train.subset(np.flatnonzero(run.train.tags == "base"))
    init = nn.init_model(run.model.spec, run.seed + 10_000, run.model.precision)
    model, _ = nn.train(init, clean, train_config(spec, run.seed, False))
    return model


# ---------------------------------------------------------------- method runs


def tuned(spec: ScenarioSpec, run: SeedRun, method: str):
    """(tau, steps) from the normal-data tuning protocol; amnesiac has nothing to tune."""
    u = spec.config["unlearn"]
    if method == "amnesiac":
        return 0.0, int(u["steps"])
    t = ul.tune_tau(run.model, method, list(run.control_ids), run.context(), run.test, u["tau_grid"][method],
                    hyperparams(spec), float(u["max_drop"]), u.get("steps_grid"))
    return t.tau, t.steps


def unlearn_trace(spec: ScenarioSpec, run: SeedRun, method: str, ids, tau: float, rounds: int, steps=None):
    notes = []
    req = ul.UnlearnRequest(method, list(ids), hyper=hyperparams(spec, tau, steps=steps))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        trace = ul.multi_round(run.model, req, run.context(), run.test, rounds)
    notes += sorted({str(w.message).split(" after ")[0] for w in caught if issubclass(w.category, ConvergenceWarning)})
    return trace, notes


def method_row(spec: ScenarioSpec, run: SeedRun, method: str, acc_before: float) -> dict:
    row = base_row(spec, run.seed, method)
    rounds = int(spec.scenario["rounds"])
    tau, steps = tuned(spec, run, method)
    trace_n, notes_n = unlearn_trace(spec, run, method, run.control_ids, tau, rounds, steps)
    trace_i, notes_i = unlearn_trace(spec, run, method, run.informative_ids, tau, rounds, steps)
    row.update(
        tau=tau,
        steps=steps,
        forget_size_normal=len(run.control_ids),
        forget_size_informative=len(run.informative_ids),
        acc_before=acc_before,
        acc_after_normal=trace_n[-1],
        acc_after_informative=trace_i[-1],
        drop_normal=acc_before - trace_n[-1],
        drop_informative=acc_before - trace_i[-1],
        trace_normal=trace_n,
        trace_informative=trace_i,
        notes="; ".join(sorted(set(notes_n + notes_i))),
    )
    return row


def base_row(spec: ScenarioSpec, seed: int, method: str) -> dict:
    row = {c: None for c in COLUMNS}
    row.update(scenario=spec.scenario["name"], dataset=spec.scenario["dataset"], method=method, seed=seed,
               status="ok", notes="")
    return row


def budget_stats(spec: ScenarioSpec, run: SeedRun, unseen: Optional[nn.Model] = None) -> dict:
    unseen = unseen or train_unseen(spec, run)
    b = spec.config["budget"]
    out = {}
    for key, ids in (("normal", run.control_ids), ("informative", run.informative_ids)):
        ds = run.subset(ids)
        res = ul.budget_analysis(run.model, unseen, ds.images, ds.labels, b["lr"], int(b["iterations"]))
        out[f"budget_mean_{key}"] = float(res.budgets.mean())
        out[f"budget_closed_{key}"] = res.closed_fraction()
    return out


def informative_detection(spec: ScenarioSpec, run: SeedRun) -> dict:
    """Detector TPRs for the informative samples inside the injected training set."""
    pool = run.train.subset(np.flatnonzero(run.train.tags != "informative"))
    attack = set(int(i) for i in run.informative_ids)
    reports = detector_reports(spec, run.model, run.train, attack, run.test, pool, run.seed)
    return {"tpr_ss": reports["spectral"].tpr, "tpr_que": reports["que"].tpr, "tpr_strip": reports["strip"].tpr,
            "reports": reports}


def strip_report(spec, model, candidates, attack, holdout, pool, seed) -> detect.DetectionReport:
    d = spec.config["detect"]
    k = int(d["strip_overlays"])
    cal = detect.strip_entropy(model, holdout, pool, k, seed + 1)
    thr = detect.calibrate_low_threshold(list(cal.values()), d["strip_fpr"])
    scores = detect.strip_entropy(model, candidates, pool, k, seed)
    return detect.report_below("strip", scores, attack, thr)


# ---------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    rows: list
    config: dict
    config_digest: str
    tool_version: str = TOOL_VERSION

    def column(self, name, method=None):
        return [r[name] for r in self.rows if method is None or r["method"] == method]


def _run_seed(spec: ScenarioSpec, seed: int) -> list:
    try:
        run = prepare_seed(spec, seed)
    except ConfigurationError:
        raise
    except Exception as exc:  # failure policy: record, keep going
        logger.exception("seed %s failed during preparation", seed)
        row = base_row(spec, seed, "")
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
        return [row]
    return seed_rows(spec, run)


def seed_rows(spec: ScenarioSpec, run: SeedRun) -> list:
    """Report rows for an already prepared seed: one per configured method."""
    s = spec.scenario
    seed = run.seed
    acc_before = nn.accuracy(run.model, run.test.images, run.test.labels)
    extra = {}
    if s["budget"]:
        extra.update(budget_stats(spec, run))
    if s["detectors"]:
        det = informative_detection(spec, run)
        extra.update({k: v for k, v in det.items() if k.startswith("tpr")})
    if not s["methods"]:
        row = base_row(spec, seed, "")
        row.update(acc_before=acc_before, forget_size_informative=len(run.informative_ids), **extra)
        return [row]
    rows = []
    for method in s["methods"]:
        try:
            row = method_row(spec, run, method, acc_before)
        except Exception as exc:
            logger.exception("method %s failed on seed %s", method, seed)
            row = base_row(spec, seed, method)
            row.update(acc_before=acc_before, status=f"failed: {type(exc).__name__}: {exc}")
        row.update(extra)
        rows.append(row)
    return rows


def run_scenario(spec: ScenarioSpec) -> ExperimentReport:
    """Condense, inject, train, then unlearn informative vs size-matched normal data per method and seed."""
    rows = []
    for seed in sorted(spec.seeds):
        rows += _run_seed(spec, seed)
    return ExperimentReport(rows, spec.config, spec.digest())


def retrain_baseline(spec: ScenarioSpec, paired: Optional[ExperimentReport] = None) -> ExperimentReport:
    """Train without injection, unlearn the normal control, and compare acc-before with the injected run."""
    rows = []
    injected_acc = {}
    if paired is not None:
        for r in paired.rows:
            if r["acc_before"] is not None:
                injected_acc[r["seed"]] = r["acc_before"]
    for seed in sorted(spec.seeds):
        clean = prepare_seed(spec, seed, inject=False)
        acc_clean = nn.accuracy(clean.model, clean.test.images, clean.test.labels)
        if seed not in injected_acc:
            inj = prepare_seed(spec, seed, ledger=False)
            injected_acc[seed] = nn.accuracy(inj.model, inj.test.images, inj.test.labels)
        methods = spec.scenario["methods"] or [""]
        for method in methods:
            row = base_row(spec, seed, method)
            row.update(acc_before_clean=acc_clean, acc_before=injected_acc[seed],
                       injection_delta=injected_acc[seed] - acc_clean)
            if method:
                tau, steps = tuned(spec, clean, method)
                trace, notes = unlearn_trace(spec, clean, method, clean.control_ids, tau,
                                             int(spec.scenario["rounds"]), steps)
                row.update(tau=tau, steps=steps,
                           forget_size_normal=len(clean.control_ids), acc_after_normal=trace[-1],
                           drop_normal=acc_clean - trace[-1], trace_normal=trace, notes="; ".join(notes))
            rows.append(row)
    return ExperimentReport(rows, spec.config, spec.digest())


def _cell(name, value) -> str:
    if value is None:
        return ""
    if name in TRACE_COLUMNS:
        return ";".join(repr(float(v)) for v in value)
    if name in FLOAT_COLUMNS:
        return repr(float(value))
    return str(value)


def _parse(name, text):
    if text == "" and name not in ("status", "notes", "method", "scenario", "dataset"):
        return None
    if name in TRACE_COLUMNS:
        return [float(v) for v in text.split(";")]
    if name in FLOAT_COLUMNS:
        return float(text)
    if name in INT_COLUMNS:
        return int(text)
    return text


def emit_report(report: ExperimentReport, fmt: str, path: str) -> None:
    """Write the report as CSV (header row, fixed column order) or JSON (one document)."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# config_digest=" + report.config_digest, "tool_version=" + report.tool_version])
        w.writerow(COLUMNS)
        for r in report.rows:
            w.writerow([_cell(c, r.get(c)) for c in COLUMNS])
        text = buf.getvalue()
    elif fmt == "json":
        doc = {
            "tool_version": report.tool_version,
            "config_digest": report.config_digest,
            "config": report.config,
            "columns": COLUMNS,
            "rows": [{c: _json_value(c, r.get(c)) for c in COLUMNS} for r in report.rows],
        }
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json_value(name, value):
    if value is None:
        return None
    if name in TRACE_COLUMNS:
        return [float(v) for v in value]
    if name in FLOAT_COLUMNS:
        return float(value)
    return value


def read_report(path: str) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return ExperimentReport(doc["rows"], doc["config"], doc["config_digest"], doc["tool_version"])
    lines = list(csv.reader(io.StringIO(text)))
    digest = lines[0][0].split("=", 1)[1]
    version = lines[0][1].split("=", 1)[1]
    header = lines[1]
    if header != COLUMNS:
        raise ConfigurationError("CSV header does not match the report columns")
    rows = [{c: _parse(c, v) for c, v in zip(header, line)} for line in lines[2:]]
    return ExperimentReport(rows, {}, digest, version)


def summarize(report: ExperimentReport) -> str:
    """Per-method means of the drop columns, one line each."""
    out = []
    methods = sorted({r["method"] for r in report.rows if r["method"]})
    for m in methods:
        rows = [r for r in report.rows if r["method"] == m and r["status"] == "ok"]
        if not rows:
            out.append(f"{m:13s} no successful runs")
            continue
        dn = np.mean([r["drop_normal"] for r in rows])
        di = np.mean([r["drop_informative"] for r in rows])
        out.append(f"{m:13s} drop normal {100 * dn:6.2f}  drop informative {100 * di:6.2f}  ({len(rows)} seeds)")
    return "\n".join(out)


# ---------------------------------------------------------------- detector bench


@dataclass
class BenchResult:
    """Detector reports on the BadNets control and on the informative injection of one seed."""

    seed: int
    attack_success: float
    badnets: dict  # detector name -> DetectionReport
    informative: dict

    def rows(self):
        out = []
        for case, reports in (("badnets", self.badnets), ("informative", self.informative)):
            for name, r in sorted(reports.items()):
                out.append({"seed": self.seed, "case": case, "detector": name, "tpr": r.tpr, "fpr": r.fpr,
                            "threshold": r.threshold, "flagged": len(r.flagged), "attack": len(r.attack)})
        return out


def badnets_control(spec: ScenarioSpec, seed: int):
    """Train on a trigger-poisoned copy of the clean training set; returns (model, train, poisoned ids, asr)."""
    d = spec.config["detect"]
    train, test = load_victim_data(spec, seed)
    trigger = data.TriggerSpec(rate=float(d["poison_rate"]), target_label=int(d["target_label"]))
    poisoned, ids = data.apply_trigger(train, trigger, seed)
    init = nn.init_model(nn.convnet(train.num_classes, train.image_shape), seed, spec.config["train"]["precision"])
    model, _ = nn.train(init, poisoned, train_config(spec, seed, False))
    victims = test.subset(np.flatnonzero(test.labels != trigger.target_label))
    asr = float(np.mean(nn.predict(model, data.stamp(victims.images, trigger)) == trigger.target_label))
    return model, poisoned, ids, asr, test


def detector_reports(spec: ScenarioSpec, model, train, attack, holdout, pool, seed) -> dict:
    d = spec.config["detect"]
    reps = detect.extract_representations(model, train)
    classes = detect.class_of(reps)
    n = len(attack)
    mult = float(d["flag_multiplier"])

    def top(name, scores):
        flagged, thr = detect.top_k_flags(scores, detect.expected_flag_count(n, mult))
        tpr, fpr = detect.tpr_fpr(flagged, attack, scores.keys())
        return detect.DetectionReport(name, scores, thr, flagged, set(attack), tpr, fpr, classes)

    out = {
        "spectral": top("spectral", detect.spectral_signature_scores(reps)),
        "que": top("que", detect.que_scores(reps, d["que_alpha"], d["que_clean_fraction"])),
    }
    strip = strip_report(spec, model, train, attack, holdout, pool, seed)
    strip.classes = classes
    out["strip"] = strip
    return out


def detector_bench(spec: ScenarioSpec, seed: int, run: Optional[SeedRun] = None) -> BenchResult:
    model, poisoned, ids, asr, test = badnets_control(spec, seed)
    clean_pool = poisoned.drop_ids(ids)
    bad = detector_reports(spec, model, poisoned, set(ids), test, clean_pool, seed)
    run = run or prepare_seed(spec, seed, ledger=False)
    pool = run.train.subset(np.flatnonzero(run.train.tags != "informative"))
    inf = detector_reports(spec, run.model, run.train, set(int(i) for i in run.informative_ids), run.test, pool, seed)
    return BenchResult(seed, asr, bad, inf)
