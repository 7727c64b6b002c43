import csv

import numpy as np
import pytest

from ccdec import experiments as ex
from ccdec import synthetic


def _data(ntrain=6000, nbase=4000, nquery=200, d=16, seed=0):
    s = synthetic.splits(ntrain, nbase, nquery, d=d, seed=seed)
    return ex.Dataset(s["train"], s["base"], s["query"])


def _cfg(tmp_path, **kw):
    base = {
        "ntrain": "5000", "nval": "1000", "m": "4", "bits": "4",
        "nn.epochs": "2", "seeds": "0,1,2,3,4", "output": str(tmp_path),
    }
    base.update({k: str(v) for k, v in kw.items()})
    return ex.build_config(overrides=base)


def _strip_timing(path):
    rows = ex.check_csv_schema(path)
    return [{k: v for k, v in r.items() if k not in ex.TIMING_COLUMNS} for r in rows]


def test_config_precedence(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nm = 8\nbits = 8\nnn.lr = 1e-3\n")
    cfg = ex.load_config(str(f), {"m": "16"})
    assert cfg.m == 16 and cfg.bits == 8
    assert cfg.train_config().lr == 1e-3
    assert ex.ExperimentConfig().m == 16 and ex.ExperimentConfig().bits == 4


@pytest.mark.parametrize(
    "over",
    [{"colour": "red"}, {"nn.bogus": "1"}, {"encoder": "lsq"}, {"decoders": "natural,magic"},
     {"m": "two"}, {"nn.lr": "-1"}, {"decoders": "sdc"}, {"prelim_kmeans": "maybe"},
     {"bits": "3"}, {"sweep.lr": "1e-3,-1"}, {"decoders": "topline", "m": "8", "bits": "4"},
     {"prelim_bits": "8", "prelim_m": "4"}],
)
def test_config_rejects_bad_values(over):
    with pytest.raises(ValueError):
        ex.build_config(overrides=over)


def test_config_file_syntax(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("m 8\n")
    with pytest.raises(ex.ConfigError, match="line 1"):
        ex.load_config(str(f))


def test_optional_fields_parse():
    cfg = ex.build_config(overrides={"nn.hidden": "none", "nn.margin": "0.5", "nn.residual": "true"})
    tc = cfg.train_config()
    assert tc.hidden is None and tc.margin == 0.5 and tc.residual is True


def test_recall_experiment_smoke(tmp_path):
    cfg = _cfg(tmp_path)
    rows = ex.run_recall_experiment(cfg, _data())
    configs = {r["config"] for r in rows}
    assert configs == {"PQ4x4+natural", "PQ4x4+aq", "PQ4x4+nn"}
    assert {r["R"] for r in rows} == {1, 10, 100}
    summary = ex.check_csv_schema(tmp_path / "summary.csv")
    assert len(summary) == 9
    assert all(float(r["recall_std"]) >= 0 for r in summary)
    runs = ex.check_csv_schema(tmp_path / "runs.csv")
    assert len(runs) == 9 * 5
    for r in rows:
        vals = [float(x["recall"]) for x in runs if x["config"] == r["config"] and int(x["R"]) == r["R"]]
        assert r["recall"] == pytest.approx(np.mean(vals))
        assert r["recall_std"] == pytest.approx(np.std(vals, ddof=1))
    ex.check_csv_schema(tmp_path / "mse.csv")


def test_recall_rows_monotone_in_r(tmp_path):
    rows = ex.run_recall_experiment(_cfg(tmp_path, seeds="0"), _data())
    for c in {r["config"] for r in rows}:
        rec = [r["recall"] for r in sorted(rows, key=lambda r: r["R"]) if r["config"] == c]
        assert rec == sorted(rec)


def test_recall_experiment_deterministic(tmp_path):
    data = _data()
    a, b = tmp_path / "a", tmp_path / "b"
    ex.run_recall_experiment(_cfg(a, seeds="3"), data)
    ex.run_recall_experiment(_cfg(b, seeds="3"), data)
    for name in ("summary.csv", "runs.csv"):
        assert _strip_timing(a / name) == _strip_timing(b / name)
    assert (a / "mse.csv").read_bytes() == (b / "mse.csv").read_bytes()


def test_recall_experiment_binary(tmp_path):
    cfg = _cfg(tmp_path, encoder="itq", m=16, bits=1, decoders="sdc,natural,aq", seeds="0,1")
    rows = ex.run_recall_experiment(cfg, _data())
    assert {r["config"] for r in rows} == {"ITQ16x1+sdc", "ITQ16x1+natural", "ITQ16x1+aq"}


def test_recall_experiment_from_files(tmp_path):
    from ccdec.vecs import write_vecs

    d = _data(ntrain=3000, nbase=1000, nquery=20)
    for name in ("train", "base", "query"):
        write_vecs(tmp_path / f"{name}.fvecs", getattr(d, name))
    cfg = _cfg(tmp_path / "out", train=tmp_path / "train.fvecs", base=tmp_path / "base.fvecs",
               query=tmp_path / "query.fvecs", ntrain=2500, nval=500, decoders="natural", seeds="0")
    rows = ex.run_recall_experiment(cfg)
    assert len(rows) == 3


def test_partial_results_flushed(tmp_path, monkeypatch):
    calls = []
    real = ex.evaluate_seed

    def flaky(cfg, data, seed):
        calls.append(seed)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return real(cfg, data, seed)

    monkeypatch.setattr(ex, "evaluate_seed", flaky)
    with pytest.raises(RuntimeError):
        ex.run_recall_experiment(_cfg(tmp_path, decoders="natural"), _data())
    assert len(ex.check_csv_schema(tmp_path / "runs.csv")) == 3


def test_prelim_orderings(tmp_path):
    data = synthetic.gaussian_mixture(12_000, 16, seed=2, stream=1)
    val = synthetic.gaussian_mixture(2000, 16, seed=2, stream=2)
    cfg = _cfg(tmp_path, prelim_bits=8, prelim_m="2,8", prelim_ntrain="1000,3000,10000,1e6",
               **{"nn.epochs": 3, "nn.batch_size": 128})
    rows = ex.run_preliminary_experiment(cfg, data, val)
    get = {(r["ntrain"], r["encoder"], r["decoder"]): r for r in rows}
    grid = sorted({r["ntrain"] for r in rows})
    assert grid == [1000, 3000, 10000]  # 1e6 is beyond the pool
    for n in grid:
        for enc in ("PQ2x4", "PQ8x1"):
            assert get[n, enc, "topline"]["train_mse"] <= get[n, enc, "natural"]["train_mse"] + 1e-9
        assert (
            get[n, "kmeans256", "natural"]["train_mse"]
            <= get[n, "PQ2x4", "topline"]["train_mse"]
            <= get[n, "PQ8x1", "topline"]["train_mse"]
        )
    smallest = grid[0]
    for r in rows:
        if r["ntrain"] == smallest:
            assert r["val_mse"] > r["train_mse"]
    assert [*ex.check_csv_schema(tmp_path / "prelim.csv")[0]] == list(ex.PRELIM_HEADER)


def test_prelim_grid_exceeds_pool(tmp_path):
    cfg = _cfg(tmp_path, prelim_ntrain="1e6")
    with pytest.raises(ex.ConfigError):
        ex.prelim_grid(cfg, 5000)


def test_rerank_sweep(tmp_path):
    data = _data(ntrain=6000, nbase=5000, nquery=500)
    cfg = _cfg(tmp_path, shortlist="1,2,5,10,20,50,100", timing_reps=1, seeds="0", **{"nn.epochs": 10})
    rows = ex.run_rerank_sweep(cfg, data)
    assert [r["L"] for r in rows] == [0, 1, 2, 5, 10, 20, 50, 100]
    r1 = [r["recall_1"] for r in rows]
    assert r1[1] == r1[0]  # L=1 changes nothing
    assert all(r["rerank_ms"] >= 0 and r["scan_ms"] > 0 for r in rows)
    summary = ex.run_recall_experiment(
        ex.build_config(overrides={"ntrain": "5000", "nval": "1000", "m": "4", "bits": "4", "seeds": "0",
                                   "decoders": "natural", "output": str(tmp_path / "rec")}),
        data,
    )
    base = {r["R"]: r["recall"] for r in summary}
    assert rows[0]["recall_1"] == base[1] and rows[0]["recall_10"] == base[10] and rows[0]["recall_100"] == base[100]
    ex.check_csv_schema(tmp_path / "rerank.csv")


@pytest.mark.slow
def test_rerank_recall_monotone_with_trained_decoder(tmp_path):
    # recall@1 should not drop (beyond query noise) as L grows once the decoder is well trained
    data = _data(ntrain=60_000, nbase=20_000, nquery=5000, d=64)
    cfg = _cfg(tmp_path, ntrain=50_000, nval=10_000, m=16, shortlist="2,5,10,20,50,100", timing_reps=1,
               seeds="0", **{"nn.epochs": 150})
    rows = ex.run_rerank_sweep(cfg, data)
    r1 = [r["recall_1"] for r in rows]
    assert all(b >= a - 0.002 for a, b in zip(r1, r1[1:])), r1


def test_five_seed_determinism(tmp_path):
    data = _data(ntrain=3000, nbase=1000, nquery=50)
    cfg = _cfg(tmp_path, ntrain=2500, nval=500, **{"nn.epochs": 1})
    for seed in range(5):
        a = ex.evaluate_seed(cfg, data, seed)
        b = ex.evaluate_seed(cfg, data, seed)
        assert [(r.config, r.recalls, r.train_mse, r.val_mse) for r in a] == [
            (r.config, r.recalls, r.train_mse, r.val_mse) for r in b
        ]


def test_rerank_sweep_rejects_binary(tmp_path):
    with pytest.raises(ex.ConfigError):
        ex.run_rerank_sweep(_cfg(tmp_path, encoder="itq", m=16, bits=1, decoders="natural"), _data())


def test_sensitivity_one_curve_per_point(tmp_path):
    cfg = _cfg(tmp_path, seeds="0", **{"nn.epochs": 1, "sweep.lr": "5e-3,5e-4", "sweep.block_count": "1,2",
                                         "sweep.optimizer": "adam,sgd"})
    curves = ex.run_sensitivity_sweep(cfg, _data())
    assert set(curves) == {("lr", 5e-3), ("lr", 5e-4), ("block_count", 1), ("block_count", 2),
                           ("optimizer", "adam"), ("optimizer", "sgd")}
    files = sorted(p.name for p in (tmp_path / "curves").iterdir())
    assert len(files) == 6
    rows = ex.check_csv_schema(tmp_path / "sensitivity.csv")
    assert len(rows) == 6 * 2
    ref = ex.check_csv_schema(tmp_path / "reference.csv")
    assert [r["decoder"] for r in ref] == ["natural", "aq"]


def test_sensitivity_needs_grid(tmp_path):
    with pytest.raises(ex.ConfigError):
        ex.run_sensitivity_sweep(_cfg(tmp_path), _data())


def test_sensitivity_deterministic(tmp_path):
    data = _data()
    for sub in ("a", "b"):
        ex.run_sensitivity_sweep(_cfg(tmp_path / sub, seeds="1", **{"nn.epochs": 2, "sweep.batch_size": "128,256"}), data)
    assert (tmp_path / "a" / "sensitivity.csv").read_bytes() == (tmp_path / "b" / "sensitivity.csv").read_bytes()


@pytest.mark.slow
def test_batch_sizes_reach_similar_loss(tmp_path):
    data = _data(ntrain=30_000, d=32)
    cfg = _cfg(tmp_path, ntrain=25_000, nval=5000, m=8, seeds="0",
               **{"nn.epochs": 40, "sweep.batch_size": "128,256,512,1024"})
    curves = ex.run_sensitivity_sweep(cfg, data)
    final = [min(h["val_mse"] for h in hist) for hist in curves.values()]
    assert max(final) <= 1.05 * min(final)


def test_schema_check_detects_problems(tmp_path):
    p = tmp_path / "summary.csv"
    p.write_text("config,R\nx,1\n")
    with pytest.raises(ValueError, match="header"):
        ex.check_csv_schema(p)
    q = tmp_path / "other.csv"
    q.write_text("a,b\n1\n")
    with pytest.raises(ValueError, match="fields"):
        ex.check_csv_schema(q)
