import csv
import json

import numpy as np
import pytest

from conftest import synthetic_image
from otappear import __version__
from otappear.cli import bench_rows, dual_task, main
from otappear.image_io import ImageBuffer, load_image, save_image
from otappear.metrics import metric_report


@pytest.fixture
def pair(tmp_path, rng):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_image(synthetic_image(rng, 12, 12), a)
    save_image(synthetic_image(rng, 12, 12), b)
    return a, b


def run(*argv):
    return main([str(x) for x in argv])


def test_transfer_identity_exact(tmp_path, pair):
    a, _ = pair
    out, rep = tmp_path / "o.png", tmp_path / "r.json"
    assert run("transfer", "--source", a, "--target", a, "--out", out, "--method", "exact", "--report", rep) == 0
    assert np.abs(load_image(out).data - load_image(a).data).mean() <= 2 / 255
    report = json.loads(rep.read_text())
    assert report["histogram_distance_after"] < 1e-12
    assert report["version"] == __version__
    assert report["config"]["method"] == "exact" and report["config"]["source"] == str(a)


def test_missing_target_is_usage_error(tmp_path, pair, capsys):
    assert run("transfer", "--source", pair[0], "--out", tmp_path / "o.png") == 2
    assert "usage:" in capsys.readouterr().err


def test_bad_flag_value_exits_2(pair):
    with pytest.raises(SystemExit) as exc:
        run("transfer", "--source", pair[0], "--target", pair[1], "--out", "x.png", "--method", "magic")
    assert exc.value.code == 2


def test_missing_input_is_io_error(tmp_path, pair):
    assert run("transfer", "--source", tmp_path / "nope.png", "--target", pair[1], "--out", tmp_path / "o.png") == 3


def test_unwritable_output_is_io_error(tmp_path, pair):
    assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "no" / "o.png") == 3


def test_corrupt_input_is_io_error(tmp_path, pair):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert run("transfer", "--source", bad, "--target", pair[1], "--out", tmp_path / "o.png") == 3


def test_training_divergence_exits_4(tmp_path, pair):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "neural", "max_points": 16, "train": {"learning_rate": 1e300, "total_iterations": 20}}))
    assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "o.png", "--config", cfg) == 4


def test_sinkhorn_underflow_exits_4(tmp_path, pair):
    code = run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "o.png",
               "--method", "sinkhorn", "--epsilon", "0.02", "--position-weight", "100", "--max-points", "16")
    assert code == 4


def test_config_file_and_flag_override(tmp_path, pair):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"source": str(pair[0]), "target": str(pair[1]), "out": str(tmp_path / "o.png"),
                               "method": "sinkhorn", "max_points": 16, "epsilon": 0.05,
                               "loss_weights": {"msd": 0.5}}))
    rep = tmp_path / "r.json"
    assert run("transfer", "--config", cfg, "--method", "exact", "--report", rep) == 0
    resolved = json.loads(rep.read_text())["config"]
    assert resolved["method"] == "exact" and resolved["max_points"] == 16 and resolved["epsilon"] == 0.05
    assert resolved["loss_weights"]["msd"] == 0.5


@pytest.mark.parametrize("payload", [{"bogus": 1}, {"train": {"bogus": 1}}, {"loss_weights": {"x": 1}}, [1, 2]])
def test_unknown_config_keys_rejected(tmp_path, pair, payload):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(payload))
    assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "o.png", "--config", cfg) == 2


def test_geometry_shape_mismatch_exits_2(tmp_path, pair):
    pos = tmp_path / "pos.png"
    save_image(ImageBuffer.constant(5, 5, 0.5), pos)
    assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "o.png", "--position-map", pos) == 2


def test_transfer_with_geometry_maps(tmp_path, pair):
    pos, nrm = tmp_path / "pos.png", tmp_path / "nrm.png"
    save_image(ImageBuffer(np.random.default_rng(0).random((12, 12, 3))), pos)
    save_image(ImageBuffer.constant(12, 12, (0.5, 0.5, 1.0)), nrm)
    rep = tmp_path / "r.json"
    assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", tmp_path / "o.png",
               "--position-map", pos, "--normal-map", nrm, "--report", rep, "--max-points", "32") == 0
    assert json.loads(rep.read_text())["config"]["normal_map"] == str(nrm)


def strip_timing(path):
    d = json.loads(path.read_text())
    d.pop("seconds", None)
    return d


@pytest.mark.parametrize("method", ["sinkhorn", "exact", "neural"])
def test_transfer_determinism(tmp_path, pair, method):
    outs = []
    o, r = tmp_path / "o.png", tmp_path / "r.json"
    for _ in range(2):
        assert run("transfer", "--source", pair[0], "--target", pair[1], "--out", o, "--report", r,
                   "--method", method, "--seed", 7, "--max-points", 32, "--iters", 200) == 0
        outs.append((o.read_bytes(), strip_timing(r)))
    assert outs[0] == outs[1]


def test_metrics_identical_and_equivalence(tmp_path, pair, capsys):
    a, b = pair
    assert run("metrics", "--a", a, "--b", a) == 0
    same = json.loads(capsys.readouterr().out)
    assert same["ssim_whole"] == 1.0 and same["gram_loss"] == 0.0
    out = tmp_path / "m.json"
    assert run("metrics", "--a", a, "--b", b, "--source", a, "--out", out) == 0
    rep = json.loads(out.read_text())
    lib = metric_report(load_image(a), load_image(b), load_image(a))
    for key, value in lib.items():
        assert rep[key] == value
    assert rep["ssim_edge"] == 1.0
    assert rep["config"]["ssim_edge_against"] == "source"


def test_metrics_dimension_mismatch(tmp_path, pair, capsys):
    c = tmp_path / "c.png"
    save_image(ImageBuffer.constant(10, 12, 0.2), c)
    assert run("metrics", "--a", pair[0], "--b", c) == 2
    assert "differ" in capsys.readouterr().err


def test_dual_task_oracles():
    for task, w1 in (("shift1d", 2.0), ("shift2d", np.hypot(1.0, 0.5)), ("identity", 0.0)):
        src, tgt, oracle = dual_task(task, 0)
        assert oracle == pytest.approx(w1)
        assert np.allclose(np.linalg.norm(tgt - src, axis=1), w1)


def test_dual_demo_identity_and_report(tmp_path, capsys):
    rep = tmp_path / "d.json"
    assert run("dual-demo", "--task", "identity", "--seed", 1, "--iters", 300, "--report", rep) == 0
    assert "estimate=" in capsys.readouterr().out
    d = json.loads(rep.read_text())
    assert d["passed"] and abs(d["estimate"]) < 0.05


@pytest.mark.slow
@pytest.mark.parametrize("task", ["shift1d", "shift2d"])
def test_dual_demo_shifts(task):
    assert run("dual-demo", "--task", task, "--seed", 0) == 0


def test_dual_demo_tolerance_failure_exits_5():
    # two iterations cannot learn a potential: the estimate stays near zero
    assert run("dual-demo", "--task", "shift1d", "--iters", 2) == 5


def test_dual_demo_determinism(tmp_path):
    reps = []
    r = tmp_path / "d.json"
    for _ in range(2):
        run("dual-demo", "--task", "shift2d", "--seed", 3, "--iters", 200, "--report", r)
        reps.append(strip_timing(r))
    assert reps[0] == reps[1]


def test_mask_demo_zero_patches_and_full_frame(tmp_path, pair):
    a, b = pair
    m, y = tmp_path / "m.png", tmp_path / "y.png"
    assert run("mask-demo", "--a", a, "--b", b, "--patches", 0, "--out", m, "--mixed", y) == 0
    assert np.array_equal(load_image(y).data, load_image(a).data)
    assert np.all(load_image(m).data == 0)
    assert run("mask-demo", "--a", a, "--b", b, "--patches", 1, "--patch-range", 1, 1, "--out", m, "--mixed", y) == 0
    assert np.array_equal(load_image(y).data, load_image(b).data)


def test_mask_demo_determinism_and_bad_range(tmp_path, pair):
    a, b = pair
    blobs = []
    m, y = tmp_path / "m.png", tmp_path / "y.png"
    for _ in range(2):
        assert run("mask-demo", "--a", a, "--b", b, "--patches", 3, "--seed", 9, "--soft-edge", 1, "--out", m, "--mixed", y) == 0
        blobs.append((m.read_bytes(), y.read_bytes()))
    assert blobs[0] == blobs[1]
    assert run("mask-demo", "--a", a, "--b", b, "--patch-range", 0.6, 0.2, "--out", tmp_path / "m.png", "--mixed", tmp_path / "y.png") == 2


def read_bench(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_bench_csv_shape_and_solver_inequality(tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--sizes", "16,64,100", "--seed", 2, "--out", out, "--neural-iters", 50) == 0
    rows = read_bench(out)
    assert rows[0] == ["method", "n_points", "cost_or_estimate", "marginal_error", "seconds"]
    body = rows[1:]
    assert all(len(r) == 5 for r in body)
    pairs = sorted((r[0], int(r[1])) for r in body)
    assert pairs == sorted([("sinkhorn", 16), ("exact", 16), ("neural", 16), ("sinkhorn", 64), ("exact", 64),
                            ("neural", 64), ("sinkhorn", 100), ("neural", 100)])
    cost = {(r[0], int(r[1])): float(r[2]) for r in body}
    for n in (16, 64):
        assert cost[("exact", n)] <= cost[("sinkhorn", n)] + 1e-6


def test_bench_determinism_ignoring_timing(tmp_path):
    tables = []
    for k in range(2):
        out = tmp_path / f"b{k}.csv"
        run("bench", "--sizes", "16", "--seed", 4, "--out", out, "--neural-iters", 30)
        tables.append([r[:4] for r in read_bench(out)])
    assert tables[0] == tables[1]


def test_bench_bad_sizes(tmp_path):
    assert run("bench", "--sizes", "a,b", "--out", tmp_path / "b.csv") == 2
    assert run("bench", "--sizes", "0", "--out", tmp_path / "b.csv") == 2


def test_thread_env_honoured(monkeypatch, tmp_path):
    monkeypatch.setenv("OT_APPEARANCE_THREADS", "1")
    assert run("bench", "--sizes", "8", "--out", tmp_path / "b.csv", "--neural-iters", 5) == 0
    monkeypatch.setenv("OT_APPEARANCE_THREADS", "many")
    assert run("bench", "--sizes", "8", "--out", tmp_path / "b.csv") == 2


def test_bench_rows_generator():
    rows = list(bench_rows([8], seed=0, epsilon=0.005, sinkhorn_iters=500, neural_iters=5))
    assert [r[0] for r in rows] == ["sinkhorn", "exact", "neural"]
    assert np.isnan(rows[2][3])
