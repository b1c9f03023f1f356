import math

import pytest

dcr = pytest.importorskip("dcr")

SPEC = {
    "dataset": {"id": "synthetic",
                "synthetic": {"num_users": 60, "num_items": 40, "min_length": 8,
                              "max_length": 14, "seed": 3}},
    "model": {"mode": "dcr", "encoder": {"kind": "self_attention", "dim": 8, "max_length": 16}},
    "train": {"max_epochs": 2, "batch_size": 32},
    "eval": {"num_negatives": 20, "bucket_boundaries": [5, 20]},
}


@pytest.fixture(scope="module")
def dataset():
    return dcr.load_dataset(SPEC)


def test_dataset(dataset):
    assert dataset.num_users > 0
    assert sum(dataset.all_counts()) == dataset.num_interactions
    assert len(dataset.sequence(0)) >= 3


def test_metrics_and_propensities():
    assert dcr.rank_metrics(3, 10) == (0.5, 1.0)
    pos, neg = dcr.compute_propensities([4, 2, 1])
    assert pos[0] == pytest.approx(1.0)
    assert pos[2] == pytest.approx(0.5)
    assert neg[0] == pytest.approx(1e-3)
    assert dcr.gini_index([1, 1, 1, 1]) == 0.0
    assert sorted(dcr.sample_negatives(0, 17, 101, 100, 7)) == [i for i in range(101) if i != 17]
    assert dcr.significance_test([0.3, 0.4], [0.3, 0.4]) == pytest.approx(0.5)


def test_forward_identities(dataset):
    model = dcr.make_model(SPEC, dataset)
    out = model.forward([1, 2, 3], 4)
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    assert out["y_hat"] == pytest.approx(out["y_m"] * sig(out["y_u"]) * sig(out["y_i"]), abs=1e-12)
    ranked = model.rank([1, 2, 3], [5, 6, 7, 8], c=0.0)
    assert sorted(i for i, _ in ranked) == [5, 6, 7, 8]


def test_fit_evaluate_checkpoint(dataset, tmp_path):
    model = dcr.make_model(SPEC, dataset)
    log = dcr.fit(model, dataset, SPEC)
    assert len(log) == 2
    assert any(r["best"] for r in log)
    report = dcr.evaluate(model, dataset, "test", SPEC)
    assert 0.0 <= report["ndcg"] <= report["hit_rate"] <= 1.0
    assert sum(report["exposure_share"]) == pytest.approx(1.0)
    path = tmp_path / "model.bin"
    model.save(path)
    back = dcr.load_checkpoint(path)
    assert back.forward([1, 2], 3) == model.forward([1, 2], 3)


def test_errors():
    with pytest.raises(dcr.ConfigError):
        dcr.canonical_spec({"modle": {}})
    with pytest.raises(ValueError):
        dcr.load_dataset({"dataset": {"id": "ml-1m", "path": "/nonexistent/ratings.dat"}})


def test_run_experiment(tmp_path):
    spec = dict(SPEC, name="py", output_dir=str(tmp_path), repeat=1,
                sweep={"model.c": [0, 1]})
    table = dcr.run_experiment(spec)
    assert len(table["cells"]) == 2
    assert "best by validation NDCG" in dcr.format_table(table)
    dcr.plot(table, "sweep_curve", tmp_path / "curve.svg")
    assert (tmp_path / "curve.svg").read_text().startswith("<svg")
