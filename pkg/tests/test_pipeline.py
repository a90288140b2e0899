import shutil
from pathlib import Path

import numpy as np
import pytest

from cidacap.backbone import read_embeddings
from cidacap.metrics import REPORT_KEYS
from cidacap.pipeline import DOMAINS, ExperimentConfig, run_eval, run_experiment, run_stage1, run_stage2
from cidacap.pipeline import runner
from cidacap.pipeline.checkpoint import load_checkpoint
from cidacap.pipeline.cli import main
from cidacap.synthdata import SOURCE, TARGET
from conftest import write_tiny_ini


def arrays_of(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files if not k.startswith("rng/")}


def assert_same_arrays(a, b):
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig.load(write_tiny_ini(root))
    reports = run_experiment(cfg)
    return cfg, reports


def test_plan_has_base_source_and_target_steps(tiny_cfg):
    runner.generate_data(tiny_cfg)
    samples = runner.load_data(tiny_cfg)
    steps = runner.plan_increments(tiny_cfg, samples)
    assert steps[0].classes == (0, 1, 2, 3, 4, 5)
    assert steps[-1].classes == (6, 7, 8)
    assert all(s.domain == TARGET for s in steps[-1].data)
    cfg = tiny_cfg.with_overrides({"stage1.base_classes": "0,1,2,3", "stage1.source_increments": "4,5",
                                   "stage1.adapt_target": False})
    steps = runner.plan_increments(cfg, samples)
    assert [s.classes for s in steps] == [(0, 1, 2, 3), (4, 5)]


def test_missing_data_is_reported(tiny_cfg):
    with pytest.raises(FileNotFoundError):
        runner.load_data(tiny_cfg)


def test_reports_have_every_key(finished):
    cfg, reports = finished
    assert set(reports) == set(DOMAINS)
    out = Path(cfg.run.out_dir)
    for d in DOMAINS:
        assert list(reports[d]) == list(REPORT_KEYS)
        back = runner.read_report(out / "reports" / f"report_{d}.txt")
        assert back == reports[d]
        assert (out / "reports" / f"captions_{d}.tsv").exists()
    assert len(list((out / "increments").glob("increment_*.json"))) == 2


def test_features_and_probs_exported(finished):
    cfg, _ = finished
    paths = runner.RunPaths(cfg.run.out_dir)
    records = runner.read_feature_index(paths.features)
    regions = runner.load_regions(paths.features, records[:3])
    assert regions.shape[:2] == (3, 64)
    with np.load(paths.stage1_probs) as z:
        np.testing.assert_allclose(z["probs"].sum(1), 1.0, rtol=1e-5)
        assert set(z["domains"]) == {SOURCE, TARGET}


def test_gold_captions_score_perfectly():
    gold = [["grasper", "is", "cutting", "fat"], ["probe", "is", "holding", "kidney"],
            ["suction", "is", "suturing", "tissue"]]
    rep = runner.evaluate_captions(gold, gold)
    assert rep["bleu4"] == pytest.approx(1.0)
    assert rep["rouge_l"] == pytest.approx(1.0)
    assert rep["cider"] == pytest.approx(10.0)
    with pytest.raises(ValueError):
        runner.evaluate_captions([], [])


def test_eval_is_repeatable(finished):
    cfg, reports = finished
    again = run_eval(cfg)
    assert again == reports


def test_fixed_seed_runs_identical(finished, tmp_path):
    cfg, reports = finished
    other = ExperimentConfig.load(write_tiny_ini(tmp_path))
    assert run_experiment(other) == reports
    for d in DOMAINS:
        a = (Path(cfg.run.out_dir) / "reports" / f"report_{d}.txt").read_text()
        b = (Path(other.run.out_dir) / "reports" / f"report_{d}.txt").read_text()
        assert a == b


@pytest.mark.parametrize("stop", [1, 2, 3])
def test_stage1_resume_is_bit_exact(finished, tmp_path, stop):
    cfg, _ = finished
    other = ExperimentConfig.load(write_tiny_ini(tmp_path))
    runner.generate_data(other)
    model, _ = run_stage1(other, stop_after_epoch=stop)
    run_stage1(other, resume=True)
    a = arrays_of(Path(cfg.run.out_dir) / "checkpoints" / "stage1_final.npz")
    b = arrays_of(Path(other.run.out_dir) / "checkpoints" / "stage1_final.npz")
    assert_same_arrays(a, b)


@pytest.mark.parametrize("stop", [1, 3])
def test_stage2_resume_is_bit_exact(finished, tmp_path, stop):
    cfg, _ = finished
    other = ExperimentConfig.load(write_tiny_ini(tmp_path))
    shutil.copytree(Path(cfg.data.root), Path(other.data.root))
    shutil.copytree(Path(cfg.run.out_dir), Path(other.run.out_dir),
                    ignore=shutil.ignore_patterns("stage2_*", "reports"))
    assert run_stage2(other, stop_after_epoch=stop) is None
    run_stage2(other, resume=True)
    for name in ("stage2_SD", "stage2_TD_one_shot", "stage2_TD_few_shot"):
        a = arrays_of(Path(cfg.run.out_dir) / "checkpoints" / f"{name}.npz")
        b = arrays_of(Path(other.run.out_dir) / "checkpoints" / f"{name}.npz")
        assert_same_arrays(a, b)


def test_resume_refuses_changed_config(finished, tmp_path):
    cfg, _ = finished
    other = ExperimentConfig.load(write_tiny_ini(tmp_path)).with_overrides({"stage1.lr": 0.01})
    shutil.copytree(Path(cfg.data.root), Path(other.data.root))
    shutil.copytree(Path(cfg.run.out_dir), Path(other.run.out_dir))
    from cidacap.pipeline import CheckpointError
    with pytest.raises(CheckpointError):
        run_stage1(other, resume=True)


def test_export_embeddings(finished, tmp_path):
    cfg, _ = finished
    out = runner.export_embeddings_file(cfg, tmp_path / "emb.tsv", domain=TARGET)
    rows = read_embeddings(out)
    assert len(rows) == 5 * cfg.data.target_test
    np.testing.assert_allclose([np.linalg.norm(v) for _, _, v in rows], 1.0, rtol=1e-5)


def test_matrix_table_and_checks(tmp_path):
    base = ExperimentConfig.load(write_tiny_ini(tmp_path))
    configs = [base.with_overrides({**p, "run.name": n, "run.out_dir": str(tmp_path / n)})
               for n, p in (("CI", {"stage2.cbs1d": False}), ("CI_cbs1d", {"stage2.cbs1d": True}))]
    table = runner.run_matrix(configs, tmp_path / "matrix.tsv")
    head, checks = table.split("# directional checks")
    rows = [r for r in head.strip().splitlines()[1:]]
    assert len(rows) == 2 * len(DOMAINS)
    assert len(rows[0].split("\t")) == 2 + len(REPORT_KEYS)
    check_rows = checks.strip().splitlines()[1:]
    assert len(check_rows) == 1 and check_rows[0].startswith("1D CBS")
    assert check_rows[0].split("\t")[-1] in ("PASS", "FAIL")
    assert (tmp_path / "matrix.tsv").read_text() == table
    with pytest.raises(ValueError):
        runner.run_matrix([configs[0], configs[0]])


def test_directional_checks_named_pairs():
    cfgs = [ExperimentConfig.preset(n) for n in ("CI", "CICL", "CISC")]
    res = {n: {"TD_few_shot": {"bleu4": v, "bleu1": v, "ece": v}, "SD": {"ece": v}}
           for n, v in (("CI", 0.1), ("CICL", 0.2), ("CISC", 0.3))}
    checks = runner.directional_checks(cfgs, res)
    named = {c["check"]: c["pass"] for c in checks}
    assert named == {"CISC vs CI": True, "CICL vs CI": True, "CISC vs CICL": True}


# ---------------------------------------------------------------------- cli

def test_cli_end_to_end(tmp_path, capsys):
    ini = str(write_tiny_ini(tmp_path))
    assert main(["gen-data", "--config", ini]) == 0
    assert main(["train-stage1", "--config", ini]) == 0
    assert "increment 1" in capsys.readouterr().out
    assert main(["train-stage2", "--config", ini]) == 0
    assert main(["eval", "--config", ini]) == 0
    out = capsys.readouterr().out
    assert all(d in out for d in DOMAINS)
    assert main(["export-embeddings", "--config", ini, "--out", str(tmp_path / "e.tsv")]) == 0
    assert (tmp_path / "e.tsv").exists()


def test_cli_overrides_and_presets(tmp_path):
    from cidacap.pipeline.cli import build_parser, config_from_args
    ini = str(write_tiny_ini(tmp_path))
    args = build_parser().parse_args(["train-stage1", "--config", ini, "--preset", "CISC", "--stage1.lr", "0.2"])
    cfg = config_from_args(args)
    assert cfg.stage1.mode == "supcon" and cfg.stage1.lr == 0.2 and cfg.data.image_size == 32


def test_cli_errors_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "error" in capsys.readouterr().err
    ini = str(write_tiny_ini(tmp_path))
    assert main(["eval", "--config", ini]) == 2
    assert main(["train-stage1", "--config", ini, "--stage1.mode", "mse"]) == 2
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_cli_matrix_three_presets_rerun_identical(tmp_path, capsys):
    ini = str(write_tiny_ini(tmp_path))
    assert main(["matrix", "--config", ini, "--out", str(tmp_path / "m1.tsv")]) == 0
    first = (tmp_path / "m1.tsv").read_text()
    head, checks = first.split("# directional checks")
    assert len(head.strip().splitlines()[1:]) == 3 * len(DOMAINS)
    assert {r.split("\t")[0] for r in head.strip().splitlines()[1:]} == {"CI", "CICL", "CISC"}
    assert all(r.split("\t")[-1] in ("PASS", "FAIL") for r in checks.strip().splitlines()[1:])
    assert main(["matrix", "--config", ini, "--out", str(tmp_path / "m2.tsv")]) == 0
    assert (tmp_path / "m2.tsv").read_text() == first
