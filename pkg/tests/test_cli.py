import csv
import shutil

import numpy as np
import pytest

from fsasd import pipeline
from fsasd.cli import main
from fsasd.config import RunConfig, read_config_file, resolve
from fsasd.dataset import scan_dataset
from fsasd.errors import CorruptFile, InvalidInput, UnmatchedClip
from fsasd.metrics import read_report_table
from fsasd.model import load_model
from fsasd.scoring import ClipScore

TINY = ["--duration", "0.25", "--test-normal", "5", "--test-anomaly", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(root), "--seed", "3", *TINY]) == 0
    return root


def _train(dataset, out, backend="selective_mahalanobis", seeds=("13711",), extra=()):
    argv = ["train", "--dataset", str(dataset), "--out", str(out), "--backend", backend,
            "--epochs", "2", *extra]
    for s in seeds:
        argv += ["--seed", s]
    return main(argv)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _train(dataset, out) == 0
    return out


def test_synth_tree_scans(dataset):
    manifest = scan_dataset(dataset)
    assert manifest.machine_types() == ["toycar", "valve"]
    assert len(manifest.select("toycar", 0, split="train")) == 100
    assert len(manifest.select("toycar", 0, split="test")) == 14


def test_synth_refuses_non_empty(dataset, tmp_path):
    assert main(["synth", "--out", str(dataset), *TINY]) == 2
    stray = tmp_path / "notes"
    stray.mkdir()
    (stray / "keep.txt").write_text("x")
    assert main(["synth", "--out", str(stray), "--force", *TINY]) == 2
    assert (stray / "keep.txt").exists()


def test_synth_force_regenerates_identically(dataset, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(dataset, copy)
    assert main(["synth", "--out", str(copy), "--seed", "3", "--force", *TINY]) == 0
    for f in dataset.rglob("*.wav"):
        assert (copy / f.relative_to(dataset)).read_bytes() == f.read_bytes()


def test_one_model_per_section(trained):
    models = sorted(p.name for p in (trained / "seed_13711" / "models").glob("*.model"))
    assert models == ["toycar_section_00.model", "valve_section_00.model"]
    state = load_model(trained / "seed_13711" / "models" / models[0])
    assert state.covariances is not None
    assert set(state.thresholds) == {"mse", "selective_mahalanobis"}
    loss = (trained / "seed_13711" / "models" / "toycar_section_00_loss.csv").read_text()
    assert loss.splitlines()[0] == "epoch,loss" and len(loss.splitlines()) == 3


def test_mse_backend_has_no_covariances(dataset, tmp_path):
    assert _train(dataset, tmp_path, backend="mse") == 0
    state = load_model(pipeline.model_path(tmp_path, 13711, "valve", 0))
    assert state.covariances is None and set(state.thresholds) == {"mse"}


def test_rerun_is_byte_identical(dataset, trained, tmp_path):
    assert _train(dataset, tmp_path) == 0
    for name in ("toycar_section_00.model", "valve_section_00.model"):
        a = (trained / "seed_13711" / "models" / name).read_bytes()
        b = (tmp_path / "seed_13711" / "models" / name).read_bytes()
        assert a == b


def test_scoring_is_blind_and_complete(dataset, trained, tmp_path):
    # scoring must not need labels: hide the ground truth while testing
    blind = tmp_path / "blind"
    shutil.copytree(dataset, blind)
    (blind / "ground_truth.csv").unlink()
    for backend in ("mse", "selective_mahalanobis"):
        assert main(["test", "--dataset", str(blind), "--out", str(trained),
                     "--backend", backend, "--seed", "13711"]) == 0
    for m in ("toycar", "valve"):
        paths = [pipeline.score_path(trained, 13711, b, m, 0)
                 for b in ("mse", "selective_mahalanobis")]
        rows = [list(csv.DictReader(p.open())) for p in paths]
        assert len(rows[0]) == len(rows[1]) == 14
        assert [r["path"] for r in rows[0]] == sorted(r["path"] for r in rows[0])
        assert {r["chosen_domain"] for r in rows[0]} == {"n/a"}
        assert {r["chosen_domain"] for r in rows[1]} <= {"source", "target"}
        assert paths[0].read_text() != paths[1].read_text()
        assert all(r["decision"] in ("normal", "anomaly") for r in rows[0] + rows[1])


def test_evaluate_writes_reports(dataset, trained):
    for backend in ("mse", "selective_mahalanobis"):
        main(["test", "--dataset", str(dataset), "--out", str(trained),
              "--backend", backend, "--seed", "13711"])
        assert main(["evaluate", "--dataset", str(dataset), "--out", str(trained),
                     "--backend", backend, "--seed", "13711"]) == 0
        d = pipeline.report_dir(trained, backend)
        rows = read_report_table(d / "seed_13711.csv")
        assert rows[-1]["metric"] == "TOTAL score"
        assert 0.0 <= float(rows[-1]["hmean"]) <= 1.0
        assert (d / "average.txt").exists() and (d / "decisions_seed_13711.csv").exists()
    assert main(["report", "--out", str(trained), "--seed", "13711"]) == 0


def test_tampered_model(dataset, trained, tmp_path):
    out = tmp_path / "run"
    shutil.copytree(trained, out)
    path = pipeline.model_path(out, 13711, "valve", 0)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        load_model(path)
    cfg = RunConfig(dataset=dataset, out=out, seeds=(13711,))
    result = pipeline.cmd_test(cfg)
    assert list(result.failures) == ["valve_section_00"]
    assert "checksum" in result.failures["valve_section_00"]
    assert main(["test", "--dataset", str(dataset), "--out", str(out), "--seed", "13711"]) == 1


def test_missing_model_is_partial_failure(dataset, tmp_path):
    assert main(["test", "--dataset", str(dataset), "--out", str(tmp_path),
                 "--seed", "13711"]) == 1


def test_unmatched_clip(dataset, trained, tmp_path):
    main(["test", "--dataset", str(dataset), "--out", str(trained), "--seed", "13711"])
    lines = (dataset / "ground_truth.csv").read_text().splitlines()
    gt = tmp_path / "gt.csv"
    dropped = next(l for l in lines if "/test/" in l)
    gt.write_text("\n".join(l for l in lines if l != dropped) + "\n")
    cfg = RunConfig(dataset=dataset, out=trained, seeds=(13711,))
    with pytest.raises(UnmatchedClip) as info:
        pipeline.cmd_evaluate(cfg, gt)
    assert dropped.split(",")[0] in str(info.value)
    assert main(["evaluate", "--out", str(trained), "--ground-truth", str(gt),
                 "--seed", "13711"]) == 2


def test_three_seeds_give_three_plus_average(dataset, tmp_path):
    seeds = ("13711", "13591", "13267")
    assert _train(dataset, tmp_path, "mse", seeds, ["--epochs", "1"]) == 0
    args = ["--dataset", str(dataset), "--out", str(tmp_path)]
    assert main(["test", *args]) == 0
    assert main(["evaluate", *args]) == 0
    d = pipeline.report_dir(tmp_path, "mse")
    assert sorted(p.name for p in d.glob("*.csv") if not p.name.startswith("decisions")
                  and not p.name.endswith("_cells.csv")) == \
        ["average.csv", "seed_13267.csv", "seed_13591.csv", "seed_13711.csv"]
    totals = [float(read_report_table(d / f"seed_{s}.csv")[-1]["hmean"]) for s in seeds]
    avg = float(read_report_table(d / "average.csv")[-1]["hmean"])
    assert avg == pytest.approx(np.mean(totals), abs=1e-12)


def test_perfect_separation_scores_one():
    truth, scores = {}, []
    for m in ("fan", "pump"):
        for i in range(20):
            label = "anomaly" if i % 4 == 0 else "normal"
            dom = "source" if i % 2 else "target"
            path = f"{m}/test/section_00_{i:04d}.wav"
            truth[path] = {"machine_type": m, "section": "0", "domain": dom, "label": label}
            scores.append(ClipScore(f"{i:04d}", 10.0 + i if label == "anomaly" else i / 100,
                                    None, "mse", "n/a", path))
    report, stats = pipeline.evaluate_scores(scores, truth)
    assert report.omega_hmean == 1.0 and stats == {}


def test_config_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nbackend = selective_mahalanobis\nseeds = 1, 2\n"
                        "epochs = 7  # inline\nshrinkage = 0.001\n")
    values = read_config_file(cfg_file)
    assert values == {"backend": "selective_mahalanobis", "seeds": (1, 2), "epochs": 7,
                      "shrinkage": 0.001}
    cfg = resolve(cfg_file, epochs=9, out=str(tmp_path / "o"))
    assert cfg.epochs == 9 and cfg.seeds == (1, 2) and cfg.learning_rate == 1e-3
    assert cfg.digest() == resolve(cfg_file, epochs=9, seeds=[5]).digest()
    assert cfg.digest() != resolve(cfg_file, epochs=10).digest()
    (tmp_path / "bad.cfg").write_text("epoch = 3\n")
    with pytest.raises(InvalidInput):
        read_config_file(tmp_path / "bad.cfg")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--dataset", "x",
                 "--out", "y"]) == 2


def test_config_invariants(tmp_path):
    with pytest.raises(InvalidInput):
        RunConfig(seeds=())
    with pytest.raises(InvalidInput):
        RunConfig(dataset=tmp_path, out=tmp_path)
    with pytest.raises(InvalidInput):
        RunConfig(shrinkage=2.0)
    with pytest.raises(InvalidInput):
        resolve(None, epochs="many")
    defaults = RunConfig()
    assert defaults.seeds == (13711, 13591, 13267) and defaults.epochs == 100
    assert defaults.batch_size == 256 and defaults.p == 0.1


def test_invalid_inputs_exit_two(tmp_path, monkeypatch):
    monkeypatch.setenv("FSASD_LOG_LEVEL", "nonsense")
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--dataset", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "--backend", "knn"])
    assert info.value.code == 2
