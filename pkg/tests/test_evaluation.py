import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from xflow import evaluation as ev
from xflow.data import gen_synthetic, group_kfold
from xflow.errors import ContractError
from xflow.models import ModelConfig, build_model, connection_parameter_names
from xflow.optim import TrainConfig


def t_density(x, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_sf(t, df):
    """P(T > t) by adaptive quadrature of the t density."""
    if t >= 0:
        return integrate.quad(t_density, t, np.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)[0]
    return 1.0 - integrate.quad(t_density, -t, np.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)[0]


def small_config(**kw):
    base = dict(architecture="cnn_mlp", num_classes=2, height=8, width=8, mfcc_dim=4, t_avg=3,
                width_mult=0.125, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return gen_synthetic(num_classes=2, n_persons=4, per_class=3, t_min=3, t_max=5, height=8, width=8,
                         seed=3, mfcc_dim=4)


# ---------------------------------------------------------------- incomplete beta / t tail

@pytest.mark.parametrize("a,b,x,expected", [
    (1.0, 1.0, 0.3, 0.3),                   # uniform CDF
    (2.0, 1.0, 0.5, 0.25),                  # x^a
    (1.0, 3.0, 0.2, 1 - 0.8**3),            # 1 - (1-x)^b
    (0.5, 0.5, 0.5, 0.5),                   # symmetric arcsine at the median
])
def test_betainc_closed_forms(a, b, x, expected):
    assert ev.betainc(a, b, x) == pytest.approx(expected, rel=1e-12)


def test_betainc_endpoints_and_domain():
    assert ev.betainc(2.0, 3.0, 0.0) == 0.0
    assert ev.betainc(2.0, 3.0, 1.0) == 1.0
    with pytest.raises(ContractError):
        ev.betainc(2.0, 3.0, 1.5)


@pytest.mark.parametrize("df", [1, 2, 4, 9, 30])
@pytest.mark.parametrize("t", [-3.0, -0.4, 0.0, 0.7, 2.5, 12.0])
def test_t_sf_matches_quadrature(t, df):
    assert ev.t_sf(t, df) == pytest.approx(quad_sf(t, df), rel=1e-9, abs=1e-14)


def test_t_sf_cauchy_closed_form():
    # df = 1 is the Cauchy distribution
    for t in (-2.0, 0.3, 5.0):
        assert ev.t_sf(t, 1) == pytest.approx(0.5 - math.atan(t) / math.pi, rel=1e-12)


# ---------------------------------------------------------------- paired t-test

def test_worked_example_against_quadrature_oracle():
    r = ev.paired_t_test([0.02, 0.05, 0.01, 0.04, 0.03], [0.0] * 5)
    # mean 0.03, sample sd sqrt(2.5e-4): t = 0.03 * sqrt(5) / 0.015811...
    assert r.t == pytest.approx(0.03 * math.sqrt(5) / math.sqrt(2.5e-4), rel=1e-12)
    assert r.t == pytest.approx(4.242640687119285, rel=1e-12)
    assert r.df == 4
    assert r.p == pytest.approx(quad_sf(r.t, 4), abs=1e-10)
    assert r.p == pytest.approx(0.0066177997818413475, rel=1e-8)
    assert r.significant


def test_hundred_random_samples_match_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 11))
        a = rng.uniform(0.5, 1.0, k)
        b = a - rng.normal(rng.normal(0, 0.02), 0.03, k)
        r = ev.paired_t_test(a, b)
        worst = max(worst, abs(r.p - quad_sf(r.t, k - 1)))
    assert worst < 1e-6


@pytest.mark.parametrize("a,b", [([0.9, 0.8, 0.7], [0.9, 0.8, 0.7]), ([2, 2, 2, 2], [1, 1, 1, 1])])
def test_zero_spread_returns_p_one(a, b):
    r = ev.paired_t_test(a, b)
    assert r.p == 1.0
    assert not r.significant
    assert r.sd_diff == 0.0


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=12))
@settings(max_examples=80, deadline=None)
def test_t_antisymmetric_and_p_in_unit_interval(pairs):
    a, b = np.array(pairs).T
    r1, r2 = ev.paired_t_test(a, b), ev.paired_t_test(b, a)
    if r1.sd_diff > 0:
        assert r1.t == -r2.t
        # one-sided tails are complementary
        assert r1.p + r2.p == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= r1.p <= 1.0 and 0.0 <= r2.p <= 1.0


def test_two_sided_is_double_smaller_tail():
    a, b = [0.91, 0.88, 0.95, 0.90], [0.90, 0.89, 0.91, 0.86]
    one, two = ev.paired_t_test(a, b), ev.paired_t_test(a, b, alternative="two-sided")
    assert two.p == pytest.approx(2 * min(one.p, 1 - one.p), rel=1e-12)


@pytest.mark.parametrize("a,b", [([1.0], [0.5]), ([1.0, 2.0], [1.0]), ([[1.0, 2.0]], [[1.0, 2.0]])])
def test_t_test_contract_errors(a, b):
    with pytest.raises(ContractError):
        ev.paired_t_test(a, b)


def test_unknown_alternative():
    with pytest.raises(ContractError):
        ev.paired_t_test([1, 2], [0, 0], alternative="less")


# ---------------------------------------------------------------- crossval protocol (stubbed training)

def fake_accuracy(fold, repeat):
    return round(0.5 + 0.1 * fold + 0.07 * ((repeat * 5 + fold) % 3), 10)


@pytest.fixture
def stub_jobs(monkeypatch):
    seen = []

    def run(job):
        _, _, _, _, fold, repeat, base_seed = job
        seen.append((fold, repeat, ev.repeat_seeds(base_seed, fold, repeat)))
        return fold, repeat, fake_accuracy(fold, repeat)

    monkeypatch.setattr(ev, "_run_job", run)
    return seen


def test_take_max_then_average(stub_jobs, small_data):
    rep = ev.crossval(small_config(), small_data, k=2, repeats=5, base_seed=11,
                      train_config=TrainConfig(epochs=1))
    expected_max = [max(fake_accuracy(f, r) for r in range(5)) for f in range(2)]
    assert rep.accuracies == [[fake_accuracy(f, r) for r in range(5)] for f in range(2)]
    assert rep.fold_max == expected_max
    assert rep.mean == np.mean(expected_max)
    assert rep.repeats == 5 and rep.k == 2
    for f, accs in enumerate(rep.accuracies):
        assert all(rep.fold_max[f] >= a for a in accs)
    assert len(stub_jobs) == 10


def test_single_repeat_mean_is_mean_of_folds(stub_jobs, small_data):
    rep = ev.crossval(small_config(), small_data, k=2, repeats=1, train_config=TrainConfig(epochs=1))
    assert rep.mean == (fake_accuracy(0, 0) + fake_accuracy(1, 0)) / 2


def test_repeat_seeds_distinct_and_reproducible(stub_jobs, small_data):
    ev.crossval(small_config(), small_data, k=2, repeats=3, base_seed=5, train_config=TrainConfig(epochs=1))
    seeds = [s for _, _, s in stub_jobs]
    assert len(set(seeds)) == len(seeds)
    assert ev.repeat_seeds(5, 1, 2) == ev.repeat_seeds(5, 1, 2)
    assert ev.repeat_seeds(5, 1, 2) != ev.repeat_seeds(6, 1, 2)


def test_invalid_repeats(small_data):
    with pytest.raises(ContractError):
        ev.crossval(small_config(), small_data, k=2, repeats=0)


def test_fold_errors_propagate(small_data):
    with pytest.raises(ContractError):
        ev.crossval(small_config(), small_data, k=9, repeats=1)


def test_report_csv(stub_jobs, small_data, tmp_path):
    rep = ev.crossval(small_config(), small_data, k=2, repeats=2, train_config=TrainConfig(epochs=1))
    ev.write_report_csv(rep, tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["fold", "repeat", "accuracy"]
    assert [(int(f), int(r), float(a)) for f, r, a in rows[1:]] == rep.rows()


# ---------------------------------------------------------------- ablation

def test_ablation_rows_flags_and_splits(stub_jobs, small_data, tmp_path):
    res = ev.ablate(small_data, small_config(), k=2, repeats=2, base_seed=3, train_config=TrainConfig(epochs=1))
    assert [(n, xc, rc) for n, xc, rc, _ in res.rows] == list(ev.ABLATION_ROWS)
    assert {(int(xc), int(rc)) for _, xc, rc, _ in res.rows} == {(1, 1), (0, 1), (1, 0), (0, 0)}
    digests = {rep.fold_digest for *_, rep in res.rows}
    assert digests == {ev.fold_digest(group_kfold(small_data, 2))}
    assert len({json.dumps(rep.folds) for *_, rep in res.rows}) == 1
    # identical seed streams across rows
    per_row = [stub_jobs[i * 4:(i + 1) * 4] for i in range(4)]
    assert all(r == per_row[0] for r in per_row)
    # configs differ only in the two flags
    dicts = [rep.config["model"] for *_, rep in res.rows]
    for d in dicts:
        assert {k: v for k, v in d.items() if not k.startswith("use_")} == \
               {k: v for k, v in dicts[0].items() if not k.startswith("use_")}
    base_cfg = ModelConfig.from_dict(res.report("baseline").config["model"])
    assert connection_parameter_names(build_model(base_cfg)) == []

    res.write(tmp_path / "ab.csv", tmp_path / "ab.json")
    rows = list(csv.DictReader(open(tmp_path / "ab.csv")))
    assert len(rows) == 4 * 2 * 2
    summary = json.load(open(tmp_path / "ab.json"))
    assert [r["config"] for r in summary["rows"]] == ["xflow", "no_xconns", "no_resconns", "baseline"]
    assert "p_vs_baseline" in summary["rows"][0] and "p_vs_baseline" not in summary["rows"][3]
    assert len(res.table().splitlines()) == 5


# ---------------------------------------------------------------- real training

def test_desk_scale_crossval_runs():
    data = gen_synthetic(num_classes=4, n_persons=4, per_class=2, t_min=3, t_max=5, height=8, width=8,
                         seed=0, mfcc_dim=4)
    rep = ev.crossval(small_config(num_classes=4), data, k=2, repeats=2, base_seed=0,
                      train_config=TrainConfig(epochs=40, batch_size=8))
    assert 1 / 4 <= rep.mean <= 1.0
    for f, accs in enumerate(rep.accuracies):
        assert len(accs) == 2
        assert rep.fold_max[f] == max(accs)


def test_parallel_matches_serial(small_data):
    cfg, tc = small_config(), TrainConfig(epochs=2, batch_size=8)
    serial = ev.crossval(cfg, small_data, k=2, repeats=2, base_seed=4, train_config=tc, jobs=1)
    parallel = ev.crossval(cfg, small_data, k=2, repeats=2, base_seed=4, train_config=tc, jobs=2)
    assert serial.accuracies == parallel.accuracies
