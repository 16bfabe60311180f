"""Acceptance criteria.  Each test prints one PASS/FAIL line, repeated in the terminal summary."""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from chargepredict.cli import main as cli_main
from chargepredict.data import (MAX_STEPS, RACES, GeneratorConfig, build_sequences, flat_feature_names,
                                generate_synthetic, validation_split)
from chargepredict.explain import (COLUMN_TOL, ROW_TOL, attention_importance, causality_table, correlation_table,
                                   qicvn_importance)
from chargepredict.models import gradcheck_model
from chargepredict.autodiff import Tensor, softmax
from chargepredict.nn import AttentionParams, attention_forward, lstm_cell_step
from chargepredict.qicvn import DensityMatrix, MeasurementSet, QICVNClassifier, WindowSpec, measure, qicvn_forward
from chargepredict.train import (AdamState, TrainConfig, adam_step, compute_metrics, evaluate, metrics_from_confusion,
                                 train)
from conftest import ACCEPTANCE
from test_nn import random_cell, ref_cell
from test_qicvn import random_density, randomize, ref_forward
from test_train import adam_reference

IMBALANCE_EPOCHS = 10
# fixed schedule; some seeds sit on the majority-class plateau for about 12 epochs,
# so early stopping is disabled and the best-validation weights are restored
INTERP = dict(n=3000, epochs=40, batch_size=128, lr=0.003, seeds=(0, 1, 2))


@contextmanager
def criterion(name):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        line = (name, False, f"{info['detail']} {type(exc).__name__}: {exc}".strip().splitlines()[0])
        ACCEPTANCE.append(line)
        print(f"\nFAIL  {line[0]}: {line[2]}")
        raise
    ACCEPTANCE.append((name, True, info["detail"]))
    print(f"\nPASS  {name}: {info['detail']}")


def test_gradient_correctness():
    with criterion("gradient correctness") as info:
        t0 = time.perf_counter()
        worst = {k: gradcheck_model(k, seed=0, tol=1e-4) for k in ("ffnn", "lstm", "bilstm", "bilstm_attn", "qicvn")}
        elapsed = time.perf_counter() - t0
        info["detail"] = ", ".join(f"{k} {r.worst:.1e}" for k, r in worst.items()) + f"; {elapsed:.1f} s"
        assert all(r.worst < 1e-4 for r in worst.values())
        assert elapsed < 30.0


def test_density_matrix_invariants():
    with criterion("density-matrix invariants") as info:
        herm = trace = 0.0
        eig = np.inf
        count = 0
        for seed in range(10):
            model = randomize(QICVNClassifier(7, dim=5, measurements=3, seed=seed), seed + 50, -2.0, 2.0)
            X = np.random.default_rng(seed).normal(scale=2.0, size=(100, 7))
            _, diag = qicvn_forward(model, X)
            rho = diag.densities[0].as_complex()
            count += len(rho)
            rho_h = np.conj(np.swapaxes(rho, -1, -2))
            herm = max(herm, np.abs(rho - rho_h).max())
            trace = max(trace, np.abs(np.trace(rho, axis1=1, axis2=2) - 1.0).max())
            eig = min(eig, np.linalg.eigvalsh(0.5 * (rho + rho_h)).min())
        info["detail"] = f"{count} forwards, hermitian dev {herm:.1e}, trace dev {trace:.1e}, min eig {eig:.1e}"
        assert count == 1000 and herm <= 1e-9 and trace <= 1e-9 and eig >= -1e-8


def test_measurement_completeness():
    with criterion("measurement completeness") as info:
        worst = 0.0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            d = int(rng.integers(2, 7))
            rho = random_density(rng, d)
            Q, _ = np.linalg.qr(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))
            m = MeasurementSet(d, d, rng)
            m.re.data[...], m.im.data[...] = Q.T.real, Q.T.imag
            out = measure(DensityMatrix(Tensor(rho.real), Tensor(rho.imag)), m).data
            worst = max(worst, abs(out.sum() - 1.0))
        info["detail"] = f"200 random bases, max |sum - 1| {worst:.1e}"
        assert worst <= 1e-9


def test_oracle_equivalence():
    with criterion("oracle equivalence") as info:
        dev = 0.0
        for window in (WindowSpec(), WindowSpec("sliding", 3), WindowSpec("partition", 2)):
            model = randomize(QICVNClassifier(6, dim=4, measurements=3, window=window, seed=0), 1)
            X = np.random.default_rng(2).normal(size=(4, 6))
            probs, _ = qicvn_forward(model, X)
            dev = max(dev, max(np.abs(probs.data[b] - ref_forward(model, X[b])).max() for b in range(4)))
        qdev = dev
        for seed in range(5):
            P = random_cell(seed)
            rng = np.random.default_rng(seed + 7)
            x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
            h2, c2 = lstm_cell_step(P, Tensor(x), Tensor(h), Tensor(c))
            rh, rc = ref_cell(P, x, h, c)
            dev = max(dev, np.abs(h2.data - rh).max(), np.abs(c2.data - rc).max())
        info["detail"] = f"qicvn dev {qdev:.1e}, overall dev {dev:.1e}"
        assert dev <= 1e-10


def test_metric_identity():
    with criterion("metric identity") as info:
        rng = np.random.default_rng(0)
        mismatches = 0
        for _ in range(1000):
            cm = rng.integers(0, 50, size=(2, 2))
            cm[0, 0] += cm.sum() == 0
            m = metrics_from_confusion(cm)
            mismatches += m.recall != m.accuracy
        ex = compute_metrics([1, 1, 0, 0], [1, 0, 0, 0])
        got = (ex.accuracy, ex.precision, ex.recall, ex.f1)
        info["detail"] = f"{mismatches} mismatches in 1000; example " + "/".join(f"{v:.4f}" for v in got)
        assert mismatches == 0
        np.testing.assert_allclose(got, (0.75, 0.8333, 0.75, 0.7333), atol=1e-4, rtol=0)


def test_adam_oracle():
    with criterion("Adam oracle") as info:
        grads = [2.0, -1.0, 0.5, 3.0, -0.25]
        p = Tensor([1.0], requires_grad=True)
        state = AdamState()
        got = []
        for g in grads:
            p.grad = np.array([g])
            adam_step(state, [p])
            got.append(p.data[0])
        dev = np.abs(np.array(got) - adam_reference(1.0, grads)).max()
        info["detail"] = f"5-step dev {dev:.1e}, first step 1.0 -> {got[0]:.8f}"
        assert dev <= 1e-12 and abs(got[0] - 0.999) <= 1e-8


def pooled_rate(records, task):
    tr, te = build_sequences(records, task)
    return (tr.labels().sum() + te.labels().sum()) / (len(tr) + len(te))


def test_imbalance_calibration():
    with criterion("imbalance calibration") as info:
        t0 = time.perf_counter()
        records = generate_synthetic(GeneratorConfig(n_suspects=17335), seed=0)
        elapsed = time.perf_counter() - t0
        rates = [pooled_rate(records, f"level{k}") for k in (1, 2, 3)]
        info["detail"] = "rates " + "/".join(f"{100 * r:.2f}" for r in rates) + f" %; generation {elapsed:.1f} s"
        for got, target, tol in zip(rates, (0.067, 0.035, 0.087), (0.015, 0.010, 0.015)):
            assert abs(got - target) <= tol
        assert elapsed < 60.0


@pytest.fixture(scope="module")
def any_task(default_records):
    tr, te = build_sequences(default_records, "any")
    fit, valid = validation_split(tr)
    return fit, valid, te


def test_imbalance_handling(any_task):
    with criterion("imbalance handling") as info:
        fit, valid, te = any_task
        y = te.labels()
        baseline = compute_metrics(y, np.zeros_like(y)).f1
        t0 = time.perf_counter()
        scores = {}
        for kind in ("ffnn", "bilstm_attn", "qicvn"):
            cfg = TrainConfig(model=kind, task="any", epochs=IMBALANCE_EPOCHS, batch_size=32, seed=0, patience=100)
            ckpt, _ = train(cfg, fit, valid)
            m = evaluate(ckpt, te)
            scores[kind] = (m.per_class[1]["recall"], m.f1)
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"majority wF1 {baseline:.3f}; "
                          + ", ".join(f"{k} minority recall {r:.3f} wF1 {f:.3f}" for k, (r, f) in scores.items())
                          + f"; {elapsed / 60:.1f} min")
        for kind in ("bilstm_attn", "qicvn"):
            recall, f1 = scores[kind]
            assert recall >= 0.5, kind
            assert f1 >= baseline + 0.10, kind
        assert scores["ffnn"][0] < scores["bilstm_attn"][0]
        assert elapsed < 15 * 60


def test_interpretability():
    with criterion("interpretability") as info:
        names = flat_feature_names()
        I = len(names)
        race = [f"race_{r}" for r in RACES]
        age = ["age_average"] + [f"step{k + 1:02d}.age_at_booking" for k in range(MAX_STEPS)]
        demographic = set(race) | set(age)
        records = generate_synthetic(GeneratorConfig(n_suspects=INTERP["n"]), seed=0)
        tr, te = build_sequences(records, "any")
        fit, valid = validation_split(tr)
        rows = []
        for seed in INTERP["seeds"]:
            cfg = TrainConfig(model="bilstm_attn", layout="flat", epochs=INTERP["epochs"], seed=seed,
                              patience=INTERP["epochs"], batch_size=INTERP["batch_size"], lr=INTERP["lr"])
            ckpt, _ = train(cfg, fit, valid)
            rep = attention_importance(ckpt, te)
            mean = rep.mean
            top = max((i for i in range(I) if names[i] not in demographic), key=lambda i: mean[i])
            rows.append((seed, rep.group_mean(race) * I, rep.group_mean(age) * I, names[top], mean[top] * I))
        info["detail"] = "; ".join(f"seed {s}: race {r:.2f}/I age {a:.2f}/I top {n} {t:.1f}/I"
                                   for s, r, a, n, t in rows)
        for _, r, a, _, t in rows:
            assert r < 1.0 and a < 1.0 and t > 2.0


def test_probability_hygiene(small_records):
    with criterion("probability hygiene") as info:
        data = {task: build_sequences(small_records, task) for task in ("any", "level1", "level3")}
        worst = {"softmax": 0.0, "attention": 0.0, "importance": 0.0, "column": 0.0}
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(scale=20.0, size=(7, int(rng.integers(2, 9))))
            worst["softmax"] = max(worst["softmax"], np.abs(softmax(Tensor(z)).data.sum(axis=-1) - 1).max())
            A = AttentionParams(4, 3, rng)
            _, w = attention_forward(A, Tensor(rng.normal(size=(3, 6, 4))))
            worst["attention"] = max(worst["attention"], np.abs(w.data.sum(axis=-1) - 1).max())
        by_level = {}
        for kind, task in (("bilstm_attn", "level1"), ("bilstm_attn", "level3"), ("qicvn", "any"), ("ffnn", "any")):
            train_ds, test_ds = data[task]
            cfg = TrainConfig(model=kind, task=task, epochs=1, batch_size=64, seed=0,
                              layout="flat" if kind == "bilstm_attn" else None)
            ckpt, _ = train(cfg, train_ds.subset(range(192)))
            probs = ckpt.predict_proba(test_ds)
            worst["softmax"] = max(worst["softmax"], np.abs(probs.sum(axis=1) - 1).max())
            if kind == "ffnn":
                continue
            rep = (qicvn_importance if kind == "qicvn" else attention_importance)(ckpt, test_ds)
            worst["importance"] = max(worst["importance"], np.abs(rep.rows.sum(axis=1) - 1).max())
            if kind == "bilstm_attn":
                by_level[int(task[-1])] = ckpt
        tables = [correlation_table(data["any"][1]), causality_table(by_level, data["level1"][1])]
        for t in tables:
            for L in (1, 2, 3):
                col = t.column(L)
                if col[0] is not None:
                    worst["column"] = max(worst["column"], abs(sum(col) - 1.0))
        info["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        assert worst["softmax"] <= 1e-12 and worst["attention"] <= 1e-12
        assert worst["importance"] <= ROW_TOL and worst["column"] <= COLUMN_TOL


def artifacts(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def cli_session(root, capsys):
    data = root / "b.csv"
    runs = [["generate", "--n", "500", "--seed", "1", "--out", data],
            ["stats", "--data", data, "--task", "level2"],
            ["gradcheck", "--model", "bilstm_attn"]]
    for kind, task in (("ffnn", "any"), ("qicvn", "any"), ("bilstm_attn", "level1"), ("bilstm_attn", "level3")):
        ck = root / f"{kind}_{task}.json"
        runs += [["train", "--model", kind, "--task", task, "--data", data, "--epochs", "2", "--batch-size", "64",
                  "--seed", "5", "--out", ck, "--layout", "flat"],
                 ["eval", "--ckpt", ck, "--data", data]]
    runs += [["explain", "--ckpt", root / "qicvn_any.json", "--data", data, "--report", root / "rep"],
             ["explain", "--ckpt", root / "bilstm_attn_level1.json", "--data", data, "--report", root / "rep"],
             ["explain", "--kind", "correlation", "--data", data, "--report", root / "rep"],
             ["explain", "--kind", "causality", "--ckpt", root / "bilstm_attn_level1.json",
              "--ckpt", root / "bilstm_attn_level3.json", "--data", data, "--report", root / "rep"]]
    outputs = []
    for argv in runs:
        code = cli_main([str(a) for a in argv])
        out, err = capsys.readouterr()
        assert code == 0, (argv, err)
        outputs.append(out)
    return artifacts(root), outputs


def test_cli_determinism(tmp_path, capsys):
    with criterion("determinism") as info:
        work = tmp_path / "run"
        work.mkdir()
        files_a, out_a = cli_session(work, capsys)
        work.rename(tmp_path / "first")  # rerun with the exact same flags and paths
        work.mkdir()
        files_b, out_b = cli_session(work, capsys)
        differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
        info["detail"] = f"{len(files_a)} artifacts, {len(out_a)} runs, {len(differing)} differ"
        assert files_a.keys() == files_b.keys() and not differing, differing
        assert out_a == out_b
