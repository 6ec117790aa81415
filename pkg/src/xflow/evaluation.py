"""Evaluation protocol: grouped k-fold cross-validation with repeats-take-max,
the paired t-test across folds, and the four-way connection ablation."""
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from xflow.data import group_kfold
from xflow.errors import ContractError
from xflow.models import build_model
from xflow.optim import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("xflow", True, True),
    ("no_xconns", False, True),
    ("no_resconns", True, False),
    ("baseline", False, False),
)


# ---------------------------------------------------------------- Student t tail

def _betacf(a, b, x, tol=1e-15, max_iter=500):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    # the fraction converges fast on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf(t, df):
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    mean_diff: float
    sd_diff: float
    alternative: str = "greater"


def paired_t_test(a, b, alternative="greater", alpha=0.05):
    """Paired t-test of H1: mean(a - b) > 0 (or != 0 with ``alternative="two-sided"``).

    A zero spread of differences returns p = 1 and not significant.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ContractError("paired t-test needs at least 2 pairs")
    if alternative not in ("greater", "two-sided"):
        raise ContractError(f"unknown alternative {alternative!r}")
    d = a - b
    k = d.size
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    if sd == 0.0:
        t = math.copysign(math.inf, mean) if mean else 0.0
        return TTestResult(t, k - 1, 1.0, False, mean, 0.0, alternative)
    t = mean * math.sqrt(k) / sd
    p = t_sf(t, k - 1) if alternative == "greater" else 2.0 * t_sf(abs(t), k - 1)
    p = min(max(p, 0.0), 1.0)
    return TTestResult(t, k - 1, p, p <= alpha, mean, sd, alternative)


# ---------------------------------------------------------------- cross-validation

def repeat_seeds(base_seed, fold, repeat):
    """(model seed, shuffle seed) for one training run, fixed by (base_seed, fold, repeat)."""
    state = np.random.SeedSequence([base_seed, fold, repeat]).generate_state(2)
    return int(state[0]), int(state[1])


def fold_digest(folds):
    h = hashlib.sha256()
    for train_idx, test_idx in folds:
        h.update(np.asarray(train_idx, dtype="<i8").tobytes() + b"|" + np.asarray(test_idx, dtype="<i8").tobytes())
        h.update(b"#")
    return h.hexdigest()


@dataclass
class CrossValReport:
    accuracies: list  # [fold][repeat]
    config: dict
    fold_digest: str
    folds: list = field(default_factory=list, repr=False)

    @property
    def fold_max(self):
        return [max(r) for r in self.accuracies]

    @property
    def mean(self):
        return float(np.mean(self.fold_max))

    @property
    def k(self):
        return len(self.accuracies)

    @property
    def repeats(self):
        return len(self.accuracies[0])

    def rows(self):
        return [(f, r, acc) for f, accs in enumerate(self.accuracies) for r, acc in enumerate(accs)]

    def summary(self):
        return {"mean_accuracy": self.mean, "fold_max": self.fold_max, "k": self.k, "repeats": self.repeats,
                "fold_digest": self.fold_digest, "config": self.config}


_WORKER = {}


def _init_worker(dataset):
    _WORKER["dataset"] = dataset


def _run_job(job):
    model_cfg, train_cfg, train_idx, test_idx, fold, repeat, base_seed = job
    dataset = _WORKER["dataset"]
    model_seed, shuffle_seed = repeat_seeds(base_seed, fold, repeat)
    model = build_model(model_cfg.replace(seed=model_seed))
    train(model, dataset.subset(train_idx), TrainConfig(train_cfg.epochs, train_cfg.batch_size, shuffle_seed,
                                                        train_cfg.lr))
    acc, _ = evaluate(model, dataset.subset(test_idx))
    return fold, repeat, acc


def _run_jobs(dataset, jobs, n_workers):
    if n_workers <= 1:
        _init_worker(dataset)
        try:
            for job in jobs:
                yield _run_job(job)
        finally:
            _WORKER.clear()
        return
    with ProcessPoolExecutor(n_workers, initializer=_init_worker, initargs=(dataset,)) as pool:
        yield from pool.map(_run_job, jobs)


def crossval(model_config, dataset, k, repeats=5, base_seed=0, train_config=None, jobs=1, folds=None):
    """Train ``repeats`` independently seeded models per person-grouped fold and keep each fold's best."""
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    train_config = train_config or TrainConfig()
    folds = folds if folds is not None else group_kfold(dataset, k)
    work = [(model_config, train_config, tr, te, f, r, base_seed)
            for f, (tr, te) in enumerate(folds) for r in range(repeats)]
    acc = [[None] * repeats for _ in folds]
    for fold, repeat, a in _run_jobs(dataset, work, jobs):
        log.info("fold %d repeat %d accuracy %.4f", fold, repeat, a)
        acc[fold][repeat] = a
    config = {"model": model_config.to_dict(), "train": vars(train_config).copy(), "k": len(folds),
              "repeats": repeats, "base_seed": base_seed}
    return CrossValReport(acc, config, fold_digest(folds), [(list(map(int, tr)), list(map(int, te)))
                                                           for tr, te in folds])


def write_report_csv(report, path, row_name=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["config"] if row_name else []) + ["fold", "repeat", "accuracy"])
        for f, r, a in report.rows():
            w.writerow(([row_name] if row_name else []) + [f, r, repr(a)])


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    rows: list  # (name, use_xconns, use_resconns, CrossValReport)

    def report(self, name):
        return next(r for n, _, _, r in self.rows if n == name)

    def t_test(self, name, against="baseline", alternative="greater"):
        return paired_t_test(self.report(name).fold_max, self.report(against).fold_max, alternative)

    def summary(self):
        out = {"rows": []}
        for name, xc, rc, rep in self.rows:
            row = {"config": name, "use_xconns": xc, "use_resconns": rc, "mean_accuracy": rep.mean,
                   "fold_max": rep.fold_max, "fold_digest": rep.fold_digest}
            if name != "baseline":
                t = self.t_test(name)
                row.update({"t_vs_baseline": t.t, "p_vs_baseline": t.p, "significant": t.significant})
            out["rows"].append(row)
        best = self.report("xflow").mean >= self.report("baseline").mean
        out["xflow_at_least_baseline"] = bool(best)
        return out

    def table(self):
        lines = [f"{'config':<12} {'xconns':>6} {'resconns':>8} {'mean acc':>9} {'p vs base':>10}"]
        for name, xc, rc, rep in self.rows:
            p = "" if name == "baseline" else f"{self.t_test(name).p:10.4f}"
            lines.append(f"{name:<12} {int(xc):>6} {int(rc):>8} {rep.mean:9.4f} {p:>10}")
        return "\n".join(lines)

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config", "use_xconns", "use_resconns", "fold", "repeat", "accuracy"])
            for name, xc, rc, rep in self.rows:
                for f, r, a in rep.rows():
                    w.writerow([name, int(xc), int(rc), f, r, repr(a)])
        write_json(self.summary(), json_path)


def ablate(dataset, model_config, k, repeats=5, base_seed=0, train_config=None, jobs=1):
    """Cross-validate the four connection settings on identical folds and seed streams."""
    folds = group_kfold(dataset, k)
    rows = []
    for name, xc, rc in ABLATION_ROWS:
        cfg = model_config.replace(use_xconns=xc, use_resconns=rc)
        log.info("ablation row %s", name)
        rows.append((name, xc, rc, crossval(cfg, dataset, k, repeats, base_seed, train_config, jobs, folds)))
    return AblationResult(rows)
