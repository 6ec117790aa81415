"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line (also collected
into the terminal summary under "acceptance criteria")."""
import inspect
import json
import math
import time

import numpy as np
import pytest
from scipy import integrate
from test_nn import _layer_cases
from test_xconn import X

from xflow import analysis as an
from xflow import autodiff as ad
from xflow import evaluation as ev
from xflow import models as M
from xflow import tensor as T
from xflow.data import (Example, decode_tensor, encode_tensor, gen_synthetic, group_kfold, load_dataset,
                        read_xft, save_dataset, write_xft)
from xflow.errors import FormatError
from xflow.optim import TrainConfig, train

CNN_MLP_SIZES = {  # expected output sizes of the default CNN x MLP
    "cnn.block1": (16, 80, 60), "cnn.pool1": (16, 40, 30), "merge1.cnn": (32, 40, 30),
    "cnn.block2": (32, 40, 30), "cnn.pool2": (32, 20, 15), "merge2.cnn": (64, 20, 15), "cnn.fc": (256,),
    "mlp.fc1": (128,), "merge1.mlp": (192,), "mlp.fc2": (128,), "merge2.mlp": (256,),
    "xconn_12_1.dense": (759,), "xconn_12_2.dense": (204,), "xconn_21_1": (64,), "xconn_21_2": (128,),
    "head.fc": (512,),
}
LSTM_SIZES = {  # LSTM model; channel rows follow the concatenation arithmetic
    "cnn.block1": (8, 80, 60), "cnn.pool1": (8, 40, 30), "merge1.cnn": (16, 40, 30),
    "cnn.block2": (16, 40, 30), "cnn.pool2": (16, 20, 15), "merge2.cnn": (32, 20, 15), "cnn.fc": (64,),
    "mlp.fc1": (32,), "merge1.mlp": (64,), "mlp.fc2": (32,), "merge2.mlp": (96,),
    "xconn_12_1.dense": (375,), "xconn_12_2.dense": (104,), "xconn_21_1": (32,), "xconn_21_2": (64,),
    "lstm": (64,),
}
FLAGS = [(True, True), (False, True), (True, False)]


def quad_sf(t, df):
    def pdf(x):
        c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
        return c * (1 + x * x / df) ** (-(df + 1) / 2)

    tail = integrate.quad(pdf, abs(t), np.inf, epsabs=1e-13, epsrel=1e-12)[0]
    return tail if t >= 0 else 1.0 - tail


def test_criterion_01_shape_contract(criterion):
    with criterion(1, "shape contract: default models reproduce both architecture tables") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        for arch, table in (("cnn_mlp", CNN_MLP_SIZES), ("cnn_mlp_lstm", LSTM_SIZES)):
            cfg = M.ModelConfig(architecture=arch)
            plan = M.shape_plan(cfg)
            for key, shape in table.items():
                assert plan[key] == shape, (arch, key, plan[key], shape)
            model = M.build_model(cfg).eval()
            assert (model.xconn_12_1.fc.n_out, model.xconn_12_2.fc.n_out) == \
                   (table["xconn_12_1.dense"][0], table["xconn_12_2.dense"][0])
            t = cfg.t_avg if arch == "cnn_mlp" else 2
            enc = [model.encode_arrays(rng.random((t, 80, 60)), rng.normal(size=(t, 26))) for _ in range(2)]
            trace = model.trace(enc)
            for key, shape in table.items():
                if key in trace:
                    assert trace[key].shape[1:] == shape, (arch, key, trace[key].shape)
        elapsed = time.perf_counter() - start
        c.note(f"759/204 and 375/104 dense sizes exact, {elapsed:.2f}s")
        assert elapsed < 1.0


def test_criterion_02_gradients(criterion):
    with criterion(2, "gradient suite: layers, connection pipelines, full models < 1e-4") as c:
        start = time.perf_counter()
        worst = {}
        for draw in range(2):
            for name, (loss_fn, params) in _layer_cases(np.random.default_rng(draw)).items():
                worst[f"layer:{name}"] = max(worst.get(f"layer:{name}", 0.0), ad.grad_check(loss_fn, params))
        rng = np.random.default_rng(1)
        for cls, args, in_shape in [(X.XConn2Dto1D, ((3, 4, 4), 2, 5), (2, 3, 4, 4)),
                                    (X.XConn1Dto2D, (6, (2, 5, 4), (3, 2)), (2, 6)),
                                    (X.ResConn2Dto1D, ((2, 4, 6), 3, 4), (2, 2, 4, 6)),
                                    (X.ResConn1Dto2D, (4, (3, 4, 4), (2, 3)), (2, 4))]:
            conn = cls(*args, rng)
            x = ad.Parameter(rng.normal(size=in_shape), "x")
            r = rng.normal(size=conn(x).shape)
            worst[f"conn:{cls.__name__}"] = ad.grad_check(lambda: ad.sum(ad.mul(conn(x), r)),
                                                          [x] + conn.parameters())
        for arch in M.ARCHITECTURES:
            report = M.model_grad_check(M.tiny_config(arch))  # every coordinate of every parameter
            worst[f"model:{arch}"] = max(report.values())
        elapsed = time.perf_counter() - start
        name, value = max(worst.items(), key=lambda kv: kv[1])
        c.note(f"{len(worst)} checks, worst {value:.2e} ({name}), {elapsed:.0f}s")
        assert value < 1e-4
        assert elapsed < 120


def test_criterion_03_adjoint(criterion):
    with criterion(3, "deconv2d is the adjoint of valid conv2d (50 cases, 1e-10)") as c:
        worst = 0.0
        for seed in range(50):
            r = np.random.default_rng(seed)
            ci, co = r.integers(1, 4, size=2)
            h, w = r.integers(3, 9, size=2)
            kh, kw = r.integers(1, h + 1), r.integers(1, w + 1)
            k = r.normal(size=(co, ci, kh, kw))
            x, y = r.normal(size=(ci, h, w)), r.normal(size=(co, h - kh + 1, w - kw + 1))
            lhs = np.vdot(T.conv2d(x, k, np.zeros(co), "valid"), y)
            rhs = np.vdot(x, T.deconv2d(y, k.transpose(1, 0, 2, 3), np.zeros(ci)))
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
        c.note(f"worst {worst:.1e}")
        assert worst <= 1e-10


def test_criterion_04_baseline_equivalence(criterion):
    with criterion(4, "zeroed connections reproduce the baseline exactly (tolerance 0)") as c:
        rng = np.random.default_rng(4)
        compared = 0
        for arch in M.ARCHITECTURES:
            for xc, rc in FLAGS:
                cfg = M.ModelConfig(architecture=arch, num_classes=3, height=8, width=8, mfcc_dim=4, t_avg=3,
                                    use_xconns=xc, use_resconns=rc, seed=7, width_mult=0.5)
                baseline = M.build_model(cfg.baseline()).eval()
                for _, buf in baseline.named_buffers():
                    buf[...] = rng.uniform(0.5, 1.5, buf.shape)
                xflow = M.embed_baseline(baseline, M.build_model(cfg).eval())
                assert all(not np.any(p.value) for n, p in xflow.named_parameters()
                           if n.startswith(M.CONNECTION_PREFIXES))
                clips = [Example(rng.random((t, 8, 8)), rng.normal(size=(t, 4)), 0, 0) for t in (3, 4, 6)]
                enc = [baseline.encode(e) for e in clips]
                tb, tx = baseline.trace(enc), xflow.trace(enc)
                for key, v in tb.items():
                    assert np.array_equal(v, tx[key][tuple(slice(0, s) for s in v.shape)]), (arch, xc, rc, key)
                    compared += 1
                assert np.array_equal(baseline.predict_proba(enc), xflow.predict_proba(enc))
        c.note(f"{compared} stream activations bit-identical across 6 configurations")


def test_criterion_05_overfit(criterion):
    with criterion(5, "XFlow LSTM model reaches 100% train accuracy on 64 examples within 200 epochs") as c:
        start = time.perf_counter()
        data = gen_synthetic(num_classes=4, n_persons=4, per_class=4, t_min=5, t_max=9, height=16, width=16,
                             seed=0)
        assert len(data) == 64
        model = M.build_model(M.ModelConfig(architecture="cnn_mlp_lstm", num_classes=4, height=16, width=16,
                                            seed=0))
        # val on the training set = eval-mode training accuracy after each epoch
        hist = train(model, data, TrainConfig(epochs=200, seed=0), val_dataset=data,
                     on_epoch=lambda row: row["val_acc"] == 1.0)
        elapsed = time.perf_counter() - start
        c.note(f"epoch {hist[-1]['epoch']}: train accuracy {hist[-1]['val_acc']:.3f}, {elapsed:.0f}s")
        assert hist[-1]["val_acc"] == 1.0 and len(hist) <= 200
        assert elapsed < 600


def test_criterion_06_directional_experiment(criterion, tmp_path):
    with criterion(6, "desk-scale four-way ablation report with paired t-test (gates on completion)") as c:
        data = gen_synthetic()  # 10 classes, 15 persons x 5 per class
        assert len(data) == 750
        cfg = M.ModelConfig(architecture="cnn_mlp", num_classes=10, height=16, width=16, mfcc_dim=26,
                            t_avg=11, width_mult=0.5)
        res = ev.ablate(data, cfg, k=5, repeats=3, base_seed=0, train_config=TrainConfig(epochs=6))
        res.write(tmp_path / "ablation.csv", tmp_path / "ablation.json")
        summary = json.loads((tmp_path / "ablation.json").read_text())
        assert [r["config"] for r in summary["rows"]] == ["xflow", "no_xconns", "no_resconns", "baseline"]
        assert len({rep.fold_digest for *_, rep in res.rows}) == 1
        for *_, rep in res.rows:
            assert rep.k == 5 and rep.repeats == 3
            assert all(0.0 <= a <= 1.0 for accs in rep.accuracies for a in accs)
        t = res.t_test("xflow")
        x, b = res.report("xflow").mean, res.report("baseline").mean
        print("\n" + res.table())
        c.note(f"xflow {x:.4f} vs baseline {b:.4f} ({'XFlow >= baseline' if x >= b else 'XFlow < baseline'}), "
               f"t={t.t:.3f}, one-sided p={t.p:.4f}")


def test_criterion_07_statistics_oracle(criterion):
    with criterion(7, "paired t-test matches quadrature oracle within 1e-6; sd=0 gives p=1") as c:
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(2, 12))
            a = rng.uniform(0.3, 1.0, k)
            b = a - rng.normal(rng.normal(0, 0.03), 0.05, k)
            r = ev.paired_t_test(a, b)
            worst = max(worst, abs(r.p - quad_sf(r.t, k - 1)))
        degenerate = [ev.paired_t_test([0.8, 0.7, 0.9], [0.8, 0.7, 0.9]), ev.paired_t_test([1, 1, 1, 1], [0] * 4)]
        c.note(f"worst |p - oracle| {worst:.1e}")
        assert worst < 1e-6
        assert all(r.p == 1.0 and not r.significant for r in degenerate)


def test_criterion_08_protocol(criterion, monkeypatch):
    with criterion(8, "person-pure group k-fold and five-repeats-take-max averaging") as c:
        for persons, k, per_fold in ((10, 10, 1), (36, 9, 4)):
            ids = np.repeat(np.arange(persons), 3)
            folds = group_kfold(ids, k)
            for tr, te in folds:
                assert len(np.unique(ids[te])) == per_fold
                assert not set(ids[tr]) & set(ids[te])
            assert sorted(np.concatenate([te for _, te in folds]).tolist()) == list(range(len(ids)))
        assert inspect.signature(ev.crossval).parameters["repeats"].default == 5

        def fake(job):
            fold, repeat = job[4], job[5]
            return fold, repeat, (fold * 7 + repeat * 3) % 10 / 10

        monkeypatch.setattr(ev, "_run_job", fake)
        data = gen_synthetic(num_classes=2, n_persons=4, per_class=1, t_min=3, t_max=3, height=8, width=8)
        rep = ev.crossval(M.tiny_config("cnn_mlp"), data, k=4)
        expected = [max((f * 7 + r * 3) % 10 / 10 for r in range(5)) for f in range(4)]
        assert rep.repeats == 5 and rep.fold_max == expected and rep.mean == np.mean(expected)
        c.note("10/10 -> 1 person per fold, 36/9 -> 4 per fold; mean of fold maxima exact")


def test_criterion_09_difference_series(criterion, tmp_path):
    with criterion(9, "difference series: constant input, alpha^2 scaling, T-1 CSV rows") as c:
        model = M.build_model(M.ModelConfig(architecture="cnn_mlp_lstm", num_classes=3, height=8, width=8,
                                            mfcc_dim=5, width_mult=0.25, seed=1))
        frames = np.zeros((9, 8, 8))
        const = an.diff_series(model, (frames, np.tile(np.linspace(-1, 1, 5), (9, 1))))
        assert not np.any(const.diff_mfcc) and not np.any(const.diff_img_per_kernel)
        x = np.random.default_rng(9).normal(size=(9, 5))
        base = an.diff_series(model, (frames, x))
        for alpha in (2.0, -0.5, 8.0, 0.125):
            scaled = an.diff_series(model, (frames, alpha * x))
            assert np.array_equal(scaled.diff_mfcc, alpha**2 * base.diff_mfcc)
        base.write_csv(tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        kernels = model.resconn_12_1.out_shape[0]
        assert len(lines) - 1 == 9 - 1
        assert all(len(line.split(",")) == 3 + kernels for line in lines)
        c.note(f"T=9 -> 8 rows x {kernels} kernels; scaling exact for power-of-two alpha")


def test_criterion_10_round_trips(criterion, tmp_path):
    with criterion(10, "XFT, archives and dataset directories reload exactly; truncation is a FormatError") as c:
        rng = np.random.default_rng(10)
        a64 = rng.normal(size=(3, 4, 5))
        a32 = a64.astype(np.float32).astype(np.float64)
        for arr, prec in ((a32, "f32"), (a64, "f64")):
            write_xft(tmp_path / f"t_{prec}.xft", arr, prec)
            assert np.array_equal(read_xft(tmp_path / f"t_{prec}.xft"), arr)
            raw = encode_tensor(arr, prec)
            for cut in range(len(raw)):
                with pytest.raises(FormatError) as err:
                    decode_tensor(raw[:cut])
                assert err.value.offset is not None

        model = M.build_model(M.tiny_config("cnn_mlp_lstm")).eval()
        for _, buf in model.named_buffers():
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
        M.save_params(model, tmp_path / "m.xfp")
        back = M.load_params(tmp_path / "m.xfp")
        state = dict(model.named_parameters()), dict(model.named_buffers())
        for n, p in back.named_parameters():
            assert np.array_equal(p.value, state[0][n].value)
        for n, b in back.named_buffers():
            assert np.array_equal(b, state[1][n])
        raw = (tmp_path / "m.xfp").read_bytes()
        for cut in range(0, len(raw), max(1, len(raw) // 300)):
            (tmp_path / "cut.xfp").write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                M.read_archive(tmp_path / "cut.xfp")

        data = gen_synthetic(num_classes=3, n_persons=2, per_class=2, t_min=3, t_max=6, height=8, width=8)
        save_dataset(data, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert [(e.label, e.person_id) for e in loaded] == [(e.label, e.person_id) for e in data]
        assert all(np.array_equal(a.frames, b.frames) and np.array_equal(a.mfcc, b.mfcc)
                   for a, b in zip(loaded, data))
        victim = tmp_path / "ds" / "ex00003_mfcc.xft"
        victim.write_bytes(victim.read_bytes()[:-5])
        with pytest.raises(FormatError) as err:
            load_dataset(tmp_path / "ds")
        assert "ex00003_mfcc.xft" in str(err.value)
        c.note("bit-exact reloads; every truncated prefix raised FormatError with an offset")
