"""End-to-end detection experiments and parameter sweeps.

Everything is a pure function of the ``ExperimentConfig``: each random stream
(training data, test data, attacker observations, model initialisations, the
attack schedule) gets its own seed derived from the master seed and a fixed
stream id.

Sweep points share one ``Context`` (data, models, baseline, clean DDBs).  The
attack on every test row is computed once per attacker setting; a point with
occurrence ratio ``r`` attacks the rows whose schedule draw is below ``r``.
Attacks are row-independent, so this gives exactly the same stream as
attacking only the scheduled rows, and attacked sets are nested across ratios.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from importlib import metadata

import numpy as np
import scipy
from scipy import stats

from . import attacks, ddb, fusion, ks, spectrum
from .config import ExperimentConfig

log = logging.getLogger(__name__)

STREAMS = {"train": 0, "test": 1, "observe": 2, "schedule": 3, "fusion": 4, "surrogate": 5, "locations": 6}

GROUP_SIZES = (5, 10, 20, 25, 50, 80, 100, 200, 400)
RATIOS = tuple(round(0.1 * k, 1) for k in range(1, 11))
GRID_SIZES = (10, 25, 50, 100, 200)
M_VALUES = (3, 5, 7, 10)
ALPHAS = (0.001, 0.005, 0.01, 0.05, 0.1)
DDB_METHODS = ("lrt", "deepfool", "cw", "lbfgs")
ATTACK_METHODS = ("fgsm", "pgd", "deepfool", "lbfgs")


def derive_seed(master: int, stream: str, *extra: int) -> int:
    return int(np.random.SeedSequence([master, STREAMS[stream], *extra]).generate_state(1)[0])


class Context:
    """Data, trained models and cached DDBs shared by all points of a sweep."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.timings: dict[str, float] = {}
        s = cfg.scenario
        with self._timed("data"):
            self.scenario = spectrum.heterogeneous_scenario(s.node_count, s.sample_count, s.noise_scale, s.snr,
                                                            s.occupancy_prior, s.seed)
            self.train = spectrum.generate_dataset(self.scenario, cfg.train_size, derive_seed(cfg.seed, "train"))
            self.tests = [spectrum.generate_dataset(self.scenario, cfg.test_size, derive_seed(cfg.seed, "test", t))
                          for t in range(cfg.trials)]
            observed = spectrum.generate_dataset(self.scenario, cfg.observation_size,
                                                 derive_seed(cfg.seed, "observe"))
        with self._timed("train"):
            self.model = fusion.train(self.train, fusion.TrainConfig(seed=derive_seed(cfg.seed, "fusion")))
            self.surrogate = attacks.train_surrogate(
                observed.values, self.model.classify(observed.values),
                fusion.TrainConfig(seed=derive_seed(cfg.seed, "surrogate")))
        h0, h1 = spectrum.estimate_scale_params(self.train, s.sample_count)
        self.direction = ddb.lrt_direction(h0, h1, s.sample_count)
        lo, hi = ddb.data_box(self.train.values)
        self.search = ddb.SearchConfig(box_lower=np.maximum(lo, 0.0), box_upper=hi)
        self.attack_search = replace(attacks.ATTACK_SEARCH, box_lower=self.search.box_lower,
                                     box_upper=self.search.box_upper)
        self._baselines = {}
        self._clean = {}
        self._attacked = {}

    @contextmanager
    def _timed(self, key):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t0

    def ddbs(self, method: str, X) -> ddb.DdbBatch:
        direction = self.direction if method == "lrt" else None
        with self._timed(f"ddb_{method}"):
            return ddb.compute_ddb_set(self.model, X, method, direction, self.search)

    def baseline(self, method: str) -> ks.DdbBaseline:
        if method not in self._baselines:
            self._baselines[method] = ks.build_baseline(self.ddbs(method, self.train.values).usable)
        return self._baselines[method]

    def clean(self, method: str, trial: int) -> ddb.DdbBatch:
        key = (method, trial)
        if key not in self._clean:
            self._clean[key] = self.ddbs(method, self.tests[trial].values)
        return self._clean[key]

    def knowledge(self, att) -> attacks.AttackerKnowledge:
        surrogate = self.surrogate if att.mode == "surrogate" else None
        return attacks.AttackerKnowledge(self.model, [j - 1 for j in att.controlled], att.mode, surrogate)

    def attack_config(self, att, trial: int = 0) -> attacks.AttackConfig:
        step = att.step_size
        if att.method == "pgd":
            # same total L2 budget as one sign step on m coordinates
            step = att.step_size * np.sqrt(len(att.controlled)) / att.pgd_steps
        return attacks.AttackConfig(att.method, float(step), att.pgd_steps, att.ratio,
                                    derive_seed(self.cfg.seed, "schedule", trial), self.attack_search)

    def attacked(self, att, method: str, trial: int):
        """Fully attacked test stream for one attacker setting (ratio ignored):
        perturbed rows, per-row success and their DDBs."""
        key = (att.controlled, att.method, att.mode, att.step_size, att.pgd_steps, method, trial)
        if key not in self._attacked:
            X = self.tests[trial].values
            with self._timed(f"attack_{att.method}"):
                Xa, _ = attacks.perturb(self.knowledge(att), X, self.attack_config(att, trial))
            success = np.asarray(self.model.classify(Xa)) != np.asarray(self.model.classify(X))
            self._attacked[key] = (Xa, success, self.ddbs(method, Xa))
        return self._attacked[key]


@dataclass
class ExperimentReport:
    sweep: str
    rows: list
    meta: dict = field(default_factory=dict)
    # wall-clock seconds per stage; kept out of the emitted report
    timings: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"sweep": self.sweep, "meta": self.meta, "rows": self.rows}


def _clean_float(v):
    v = float(v)
    return v if np.isfinite(v) else None


def evaluate(ctx: Context, cfg: ExperimentConfig) -> tuple[dict, dict]:
    """Run one configuration against the shared context; returns (params, metrics)."""
    att = cfg.attacker
    method = cfg.ddb_method
    base = ctx.baseline(method)
    flagged_attack = flagged_clean = groups = 0
    attacked_slots = successes = 0
    nc_clean = nc_attacked = 0
    iters = []
    for trial in range(cfg.trials):
        clean = ctx.clean(method, trial)
        hit = attacks.attack_schedule(len(clean), att.ratio, derive_seed(cfg.seed, "schedule", trial))
        if att.ratio > 0 and hit.any():
            _, success, adv = ctx.attacked(att, method, trial)
            dist = np.where(hit, adv.distances, clean.distances)
            conv = np.where(hit, adv.converged, clean.converged)
            it = np.where(hit, adv.iterations, clean.iterations)
        else:
            success = np.zeros(len(clean), dtype=bool)
            dist, conv, it = clean.distances, clean.converged, clean.iterations
        conv = conv & np.isfinite(dist)
        attacked_slots += int(hit.sum())
        successes += int((success & hit).sum())
        nc_clean += int((~(clean.converged & np.isfinite(clean.distances))).sum())
        nc_attacked += int((~conv).sum())
        iters.append(it[conv])
        d_clean = ks.stream_detect(base, clean.distances[clean.converged & np.isfinite(clean.distances)],
                                   cfg.group_size, cfg.alpha)
        d_attack = ks.stream_detect(base, dist[conv], cfg.group_size, cfg.alpha)
        k = min(len(d_clean), len(d_attack))
        groups += k
        flagged_clean += sum(d.flagged for d in d_clean[:k])
        flagged_attack += sum(d.flagged for d in d_attack[:k])
    it = np.concatenate(iters).astype(float)
    params = {"m": len(att.controlled), "nodes": " ".join(map(str, att.controlled)), "attack": att.method,
              "mode": att.mode, "step_size": att.step_size, "ratio": att.ratio, "group_size": cfg.group_size,
              "alpha": cfg.alpha, "ddb_method": method}
    metrics = {
        "detection_rate": flagged_attack / groups if groups else 0.0,
        "false_alarm_rate": flagged_clean / groups if groups else 0.0,
        "attack_success_rate": successes / attacked_slots if attacked_slots else 0.0,
        "groups": groups,
        "attacked_slots": attacked_slots,
        "baseline_size": base.size,
        "mean_iterations": float(it.mean()) if it.size else None,
        "p50_iterations": float(np.percentile(it, 50)) if it.size else None,
        "p95_iterations": float(np.percentile(it, 95)) if it.size else None,
        "nonconverged_clean": nc_clean,
        "nonconverged_attacked": nc_attacked,
    }
    return params, metrics


def _row(index, cfg, params, metrics):
    return {"point": index, "config_hash": cfg.hash(), "params": params, "metrics": metrics,
            "config": cfg.to_dict()}


def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "numpy": np.__version__, "scipy": scipy.__version__}


def _report(name, cfg, rows, timings=None) -> ExperimentReport:
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "scale": cfg.scale, "floor_slack": cfg.floor_slack,
            "versions": _versions(), "config": cfg.to_dict()}
    return ExperimentReport(name, rows, meta, dict(timings or {}))


def _points(name, cfg, variants, ctx=None) -> ExperimentReport:
    ctx = ctx or Context(cfg)
    rows = []
    for i, point_cfg in enumerate(variants):
        params, metrics = evaluate(ctx, point_cfg)
        rows.append(_row(i, point_cfg, params, metrics))
        log.info("%s point %d: %s", name, i, metrics)
    return _report(name, cfg, rows, timings=ctx.timings)


def _with_attacker(cfg, **kw):
    return replace(cfg, attacker=replace(cfg.attacker, **kw))


def run_pipeline(cfg: ExperimentConfig, ctx: Context | None = None) -> ExperimentReport:
    return _points("pipeline", cfg, [cfg], ctx)


def run_group_size_sweep(cfg, sizes=GROUP_SIZES, ctx=None) -> ExperimentReport:
    return _points("group_size", cfg, [replace(cfg, group_size=s) for s in sizes], ctx)


def run_occurrence_sweep(cfg, ratios=RATIOS, sizes=GRID_SIZES, ctx=None) -> ExperimentReport:
    variants = [replace(_with_attacker(cfg, ratio=r), group_size=s) for s in sizes for r in ratios]
    return _points("occurrence", cfg, variants, ctx)


def run_malicious_count_sweep(cfg, m_values=M_VALUES, ctx=None) -> ExperimentReport:
    return _points("malicious_count", cfg, [_with_attacker(cfg, m=m, nodes=None) for m in m_values], ctx)


def run_attack_method_sweep(cfg, methods=ATTACK_METHODS, ctx=None) -> ExperimentReport:
    return _points("attack_method", cfg, [_with_attacker(cfg, method=a) for a in methods], ctx)


def run_alpha_sweep(cfg, alphas=ALPHAS, ctx=None) -> ExperimentReport:
    return _points("alpha", cfg, [replace(cfg, alpha=a) for a in alphas], ctx)


def default_location_sets(cfg, count=5, size=4) -> list[tuple]:
    n = cfg.scenario.node_count
    if count * size > n:
        raise ValueError(f"cannot draw {count} disjoint sets of {size} from {n} nodes")
    perm = np.random.default_rng(derive_seed(cfg.seed, "locations")).permutation(n)[:count * size] + 1
    return [tuple(sorted(int(j) for j in perm[k * size:(k + 1) * size])) for k in range(count)]


def validate_location_sets(node_sets, n):
    seen = set()
    for i, s in enumerate(node_sets):
        s = set(s)
        if not s:
            raise ValueError(f"location set {i + 1} is empty")
        if any(not 1 <= j <= n for j in s):
            raise ValueError(f"location set {i + 1} has indices outside 1..{n}")
        if s & seen:
            raise ValueError(f"location set {i + 1} overlaps an earlier set at {sorted(s & seen)}")
        seen |= s


LOCATION_RATIO = 0.3


def run_location_sweep(cfg, node_sets=None, ratio=LOCATION_RATIO, ctx=None) -> ExperimentReport:
    """Detection and attack success per compromised-node set.

    At full occurrence every set is detected in every group, which leaves the
    rank correlation undefined, so this sweep attacks at ``ratio`` (``None``
    keeps the configured ratio).
    """
    node_sets = default_location_sets(cfg) if node_sets is None else [tuple(sorted(s)) for s in node_sets]
    validate_location_sets(node_sets, cfg.scenario.node_count)
    ratio = cfg.attacker.ratio if ratio is None else ratio
    variants = [_with_attacker(cfg, m=len(s), nodes=s, ratio=ratio) for s in node_sets]
    report = _points("location", cfg, variants, ctx)
    succ = [r["metrics"]["attack_success_rate"] for r in report.rows]
    det = [r["metrics"]["detection_rate"] for r in report.rows]
    rho = stats.spearmanr(succ, det).statistic if len(set(succ)) > 1 and len(set(det)) > 1 else float("nan")
    report.meta["spearman_success_detection"] = _clean_float(rho)
    for k, s in enumerate(node_sets):
        report.rows[k]["params"]["location_group"] = k + 1
    return report


def run_method_comparison(cfg, methods=DDB_METHODS, ctx=None) -> ExperimentReport:
    """Iteration and evaluation-count statistics of each DDB method on the same
    clean test vectors."""
    ctx = ctx or Context(cfg)
    X = ctx.tests[0].values[:cfg.comparison_size]
    rows = []
    timings = {}
    for i, method in enumerate(methods):
        counter = fusion.CountingModel(ctx.model)
        direction = ctx.direction if method == "lrt" else None
        t0 = time.perf_counter()
        batch = ddb.compute_ddb_set(counter, X, method, direction, ctx.search)
        elapsed = time.perf_counter() - t0
        it = batch.iterations[batch.converged].astype(float)
        total = max(int(batch.iterations.sum()), 1)
        metrics = {
            "vectors": len(batch),
            "nonconverged": batch.excluded,
            "mean_iterations": float(it.mean()) if it.size else None,
            "var_iterations": float(it.var()) if it.size else None,
            "q25_iterations": float(np.percentile(it, 25)) if it.size else None,
            "q50_iterations": float(np.percentile(it, 50)) if it.size else None,
            "q75_iterations": float(np.percentile(it, 75)) if it.size else None,
            "cdf_at_5": float(np.mean(it <= 5)) if it.size else None,
            "cdf_at_15": float(np.mean(it <= 15)) if it.size else None,
            "forward_evals_per_iteration": counter.forward_evals / total,
            "gradient_evals_per_iteration": counter.gradient_evals / total,
            "mean_distance": float(batch.usable.mean()) if batch.usable.size else None,
        }
        timings[method] = {"seconds": elapsed, "seconds_per_iteration": elapsed / total}
        rows.append(_row(i, cfg, {"ddb_method": method}, metrics))
    return _report("method_comparison", cfg, rows, {**ctx.timings, "methods": timings})


SWEEPS = {
    "pipeline": run_pipeline,
    "group_size": run_group_size_sweep,
    "occurrence": run_occurrence_sweep,
    "malicious_count": run_malicious_count_sweep,
    "method_comparison": run_method_comparison,
    "attack_method": run_attack_method_sweep,
    "location": run_location_sweep,
    "alpha": run_alpha_sweep,
}


def run_sweep(name: str, cfg: ExperimentConfig, ctx: Context | None = None, **kw) -> ExperimentReport:
    if name not in SWEEPS:
        raise ValueError(f"unknown sweep {name!r}; choose from {', '.join(SWEEPS)}")
    return SWEEPS[name](cfg, ctx=ctx, **kw)


# ---- reports ---------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(report: ExperimentReport) -> str:
    """Long format: one line per (point, metric)."""
    params = []
    for r in report.rows:
        params += [k for k in r["params"] if k not in params]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "point", "config_hash", *params, "metric", "value"])
    for r in report.rows:
        head = [report.sweep, r["point"], r["config_hash"], *(_fmt(r["params"].get(p)) for p in params)]
        for k, v in r["metrics"].items():
            w.writerow([*head, k, _fmt(v)])
    return buf.getvalue()


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(report: ExperimentReport, fmt: str, path) -> None:
    text = {"csv": report_csv, "json": report_json}[fmt](report)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- trend checks ----------------------------------------------------------

def monotone(values, tol=0.02, inversions=1) -> bool:
    """Non-decreasing up to ``inversions`` drops, each no larger than ``tol``."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a - 1e-12]
    return len(drops) <= inversions and all(d <= tol + 1e-12 for d in drops)


def _metric(report, name, **where):
    return [r["metrics"][name] for r in report.rows if all(r["params"].get(k) == v for k, v in where.items())]


def check_report(report: ExperimentReport) -> list[tuple[str, bool, str]]:
    """Trend floors and monotonicity claims for a sweep report."""
    slack = report.meta.get("floor_slack", 0.0)
    checks = []

    def add(name, ok, detail=""):
        checks.append((name, bool(ok), detail))

    det = lambda **w: _metric(report, "detection_rate", **w)
    fa = lambda **w: _metric(report, "false_alarm_rate", **w)
    if report.sweep == "pipeline":
        add("detection >= 0.90", det()[0] >= 0.90 - slack, f"{det()[0]:.4f}")
        add("false alarm <= 0.02", fa()[0] <= 0.02, f"{fa()[0]:.4f}")
    elif report.sweep == "group_size":
        sizes = [r["params"]["group_size"] for r in report.rows]
        d = det()
        add("detection monotone in group size", monotone(d), str(d))
        add("false alarm <= 0.02 at every size", max(fa()) <= 0.02, str(fa()))
        if 50 in sizes:
            add("size 50 detection >= 0.95", d[sizes.index(50)] >= 0.95 - slack)
        if 10 in sizes and 400 in sizes:
            add("size 400 >= size 10 - 0.02", d[sizes.index(400)] >= d[sizes.index(10)] - 0.02)
    elif report.sweep == "occurrence":
        sizes = sorted({r["params"]["group_size"] for r in report.rows})
        ratios = sorted({r["params"]["ratio"] for r in report.rows})
        for s in sizes:
            add(f"monotone in ratio at size {s}", monotone(det(group_size=s)), str(det(group_size=s)))
        for r in ratios:
            col = [det(group_size=s, ratio=r)[0] for s in sizes]
            add(f"monotone in size at ratio {r}", monotone(col), str(col))
        if 200 in sizes and 0.3 in ratios:
            v = det(group_size=200, ratio=0.3)[0]
            add("(200, 0.3) >= 0.80", v >= 0.80 - slack, f"{v:.4f}")
        if 10 in sizes and 0.1 in ratios:
            v = det(group_size=10, ratio=0.1)[0]
            add("(10, 0.1) <= 0.10", v <= 0.10 + slack, f"{v:.4f}")
    elif report.sweep == "malicious_count":
        ms = [r["params"]["m"] for r in report.rows]
        d = det()
        add("detection monotone in m", monotone(d), str(d))
        if 3 in ms:
            add("m = 3 detection >= 0.6", d[ms.index(3)] >= 0.6 - slack)
        if 10 in ms:
            add("m = 10 detection >= 0.9", d[ms.index(10)] >= 0.9 - slack)
    elif report.sweep == "method_comparison":
        rows = {r["params"]["ddb_method"]: r["metrics"] for r in report.rows}
        if "lrt" in rows:
            lrt = rows["lrt"]
            add("LRT mean iterations in [7, 15]", 7 <= lrt["mean_iterations"] <= 15, f"{lrt['mean_iterations']:.3f}")
            add("LRT >= 99% within 15 iterations", lrt["cdf_at_15"] >= 0.99, f"{lrt['cdf_at_15']:.4f}")
            add("LRT uses no gradients", lrt["gradient_evals_per_iteration"] == 0)
        for name in ("deepfool", "cw", "lbfgs"):
            if name in rows:
                add(f"{name} >= 1 gradient per iteration", rows[name]["gradient_evals_per_iteration"] >= 1)
        if "lrt" in rows and "deepfool" in rows:
            a, b = rows["lrt"]["var_iterations"], rows["deepfool"]["var_iterations"]
            add("LRT iteration variance < DeepFool", a < b, f"{a:.4f} vs {b:.4f}")
    elif report.sweep == "attack_method":
        for r in report.rows:
            a = r["params"]["attack"]
            floor = 0.9 if a == "fgsm" else 0.7
            v = r["metrics"]["detection_rate"]
            add(f"{a} detection >= {floor}", v >= floor - slack, f"{v:.4f}")
    elif report.sweep == "location":
        rho = report.meta.get("spearman_success_detection")
        add("positive rank correlation of success and detection", rho is not None and rho > 0, str(rho))
    elif report.sweep == "alpha":
        alphas = [r["params"]["alpha"] for r in report.rows]
        add("false alarm monotone in alpha", monotone(fa(), tol=0.0, inversions=0), str(fa()))
        add("detection monotone in alpha", monotone(det(), tol=0.0, inversions=0), str(det()))
        if 0.01 in alphas:
            i = alphas.index(0.01)
            add("alpha 0.01 detection >= 0.9", det()[i] >= 0.9 - slack)
            add("alpha 0.01 false alarm <= 0.02", fa()[i] <= 0.02)
        if 0.001 in alphas:
            add("alpha 0.001 false alarm <= 0.005", fa()[alphas.index(0.001)] <= 0.005)
    return checks
