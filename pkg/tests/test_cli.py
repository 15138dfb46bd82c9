import csv
from pathlib import Path

import pytest

from staincycle.cli import main


def write_cfg(path: Path, **kwargs) -> Path:
    path.write_text("\n".join(f"{k} = {v}" for k, v in kwargs.items()) + "\n")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full desk-scale pipeline: synth -> train-seg -> train-translate -> evaluate."""
    root = tmp_path_factory.mktemp("pipeline")
    synth_cfg = write_cfg(
        root / "synth.cfg",
        canvas_px=32, marker_density=0.2, n_train_p=8, n_train_a=6, n_eval_a=3,
        base_seed=0, border_width_px=1,
    )
    corpus = root / "corpus"
    assert main(["synth", "--config", str(synth_cfg), "--out", str(corpus)]) == 0

    seg_cfg = write_cfg(
        root / "seg.cfg",
        corpus_root=corpus, seed=0, iterations=200, accuracy_gate=0.7, depth=3, base_width=8,
    )
    seg_out = root / "seg"
    assert main(["train-seg", "--config", str(seg_cfg), "--out", str(seg_out)]) == 0

    train_cfg = write_cfg(
        root / "train.cfg",
        corpus_root=corpus, segnet="true", segmentor=seg_out / "segmentor.pt",
        total_iterations=6, decay_start=3, batch_size=2, image_px=32,
        gen_depth=3, gen_width=8, disc_depth=2, disc_width=8,
        checkpoint_every=0, seed=0, least_squares="true",
    )
    run = root / "run"
    assert main(["train-translate", "--config", str(train_cfg), "--out", str(run)]) == 0

    eval_out = root / "eval"
    code = main([
        "evaluate", "--ckpt", str(run / "ckpt_final.pt"),
        "--segmentor", str(seg_out / "segmentor.pt"),
        "--manifest", str(corpus / "a_eval.csv"),
        "--out", str(eval_out), "--model-id", "segnet",
    ])
    assert code == 0
    return {"root": root, "corpus": corpus, "seg": seg_out, "run": run, "eval": eval_out,
            "train_cfg": train_cfg}


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        assert (pipeline["corpus"] / "p_train.csv").exists()
        assert (pipeline["corpus"] / "resolved_synth.cfg").exists()
        assert (pipeline["seg"] / "segmentor.pt").exists()
        assert (pipeline["run"] / "ckpt_final.pt").exists()
        assert (pipeline["run"] / "resolved_train_translate.cfg").exists()
        assert (pipeline["eval"] / "dice_records.csv").exists()
        assert (pipeline["eval"] / "summary.csv").exists()
        assert (pipeline["eval"] / "table.md").exists()

    def test_translate_writes_pngs(self, pipeline):
        out = pipeline["root"] / "sim"
        code = main([
            "translate", "--ckpt", str(pipeline["run"] / "ckpt_final.pt"),
            "--manifest", str(pipeline["corpus"] / "a_eval.csv"), "--out", str(out),
        ])
        assert code == 0
        assert len(list(out.glob("sim_p_*.png"))) == 3
        assert (out / "translations.csv").exists()

    def test_compare_emits_starred_table(self, pipeline):
        out = pipeline["root"] / "cmp"
        code = main([
            "compare",
            str(pipeline["eval"] / "dice_records.csv"),
            str(pipeline["eval"] / "dice_records.csv"),
            "--out", str(out),
        ])
        assert code == 0
        assert "| model |" in (out / "comparison.md").read_text()

    def test_report_plots(self, pipeline):
        code = main(["report", str(pipeline["run"]), "--out", str(pipeline["root"] / "plots")])
        assert code == 0
        assert (pipeline["root"] / "plots" / "loss_curves.png").exists()

    def test_evaluate_rerun_byte_identical(self, pipeline):
        again = pipeline["root"] / "eval_again"
        code = main([
            "evaluate", "--ckpt", str(pipeline["run"] / "ckpt_final.pt"),
            "--segmentor", str(pipeline["seg"] / "segmentor.pt"),
            "--manifest", str(pipeline["corpus"] / "a_eval.csv"),
            "--out", str(again), "--model-id", "segnet",
        ])
        assert code == 0
        first = (pipeline["eval"] / "dice_records.csv").read_bytes()
        second = (again / "dice_records.csv").read_bytes()
        assert first == second


class TestConfigErrors:
    def test_unknown_key_nonzero_exit(self, tmp_path, capsys):
        bad = write_cfg(tmp_path / "bad.cfg", canvas_px=32, no_such_key=1)
        code = main(["synth", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "no_such_key" in capsys.readouterr().err

    def test_malformed_value(self, tmp_path, capsys):
        bad = write_cfg(tmp_path / "bad.cfg", canvas_px="thirty-two")
        code = main(["synth", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "canvas_px" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        code = main(["synth", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
        assert code == 3

    def test_segnet_without_segmentor_key(self, tmp_path, pipeline):
        cfg = write_cfg(
            tmp_path / "t.cfg",
            corpus_root=pipeline["corpus"], segnet="true",
            total_iterations=2, decay_start=1, image_px=32,
            gen_depth=3, gen_width=8, disc_depth=2, disc_width=8,
        )
        code = main(["train-translate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_synth_refuses_overwrite(self, tmp_path, pipeline):
        cfg = write_cfg(tmp_path / "s.cfg", canvas_px=32, n_train_p=1, n_train_a=1, n_eval_a=1)
        code = main(["synth", "--config", str(cfg), "--out", str(pipeline["corpus"])])
        assert code == 3


class TestOutRootEnv:
    def test_env_var_redirects_outputs(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STAINCYCLE_OUT_ROOT", str(tmp_path / "redirected"))
        cfg = write_cfg(tmp_path / "s.cfg", canvas_px=32, n_train_p=1, n_train_a=1, n_eval_a=1)
        code = main(["synth", "--config", str(cfg), "--out", "corpus"])
        assert code == 0
        assert (tmp_path / "redirected" / "corpus" / "p_train.csv").exists()
