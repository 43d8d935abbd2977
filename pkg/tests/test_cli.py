import csv
import os

import numpy as np
import pytest

from dfq.cli import (
    load_calibration_image,
    main,
    parse_config_file,
    read_raw_image,
    write_pnm,
    write_raw_image,
)

TINY = [
    "--image-size", "16", "--patch-size", "4", "--embed-dim", "16",
    "--num-layers", "2", "--num-heads", "2", "--num-classes", "3",
    "--train-images", "8", "--val-images", "2", "--epochs", "1",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    model = root / "model.dfqm"
    assert main(["train", "--out", str(model), "--seed", "42", *TINY]) == 0
    synth = root / "synth.pgm"
    rc = main([
        "synth", "--model", str(model), "--out", str(synth),
        "--iters", "6", "--evolve-iters", "3", "--kde-eval-points", "64",
    ])
    assert rc == 0
    return root


class TestTrain:
    def test_outputs_exist(self, workspace):
        assert (workspace / "model.dfqm").exists()
        assert (workspace / "model.cfg").exists()

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_deterministic(self, workspace, tmp_path):
        a, b = tmp_path / "a.dfqm", tmp_path / "b.dfqm"
        main(["train", "--out", str(a), "--seed", "7", *TINY])
        main(["train", "--out", str(b), "--seed", "7", *TINY])
        assert a.read_bytes() == b.read_bytes()

    def test_env_seed_overrides_flag(self, tmp_path):
        a, b = tmp_path / "a.dfqm", tmp_path / "b.dfqm"
        os.environ["DFQ_SEED"] = "7"
        try:
            main(["train", "--out", str(a), "--seed", "999", *TINY])
        finally:
            del os.environ["DFQ_SEED"]
        main(["train", "--out", str(b), "--seed", "7", *TINY])
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_flags_override(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("# comment line\nseed=3\nepochs=1\n")
        a = tmp_path / "a.dfqm"
        b = tmp_path / "b.dfqm"
        main(["train", "--config", str(cfgfile), "--seed", "5", "--out", str(a), *TINY])
        main(["train", "--seed", "5", "--out", str(b), *TINY])
        assert a.read_bytes() == b.read_bytes()


class TestSynth:
    def test_artifacts(self, workspace):
        assert (workspace / "synth.pgm").exists()
        assert (workspace / "synth.raw").exists()
        assert (workspace / "synth.labels.pgm").exists()
        assert (workspace / "synth.trace.csv").exists()

    def test_pgm_header(self, workspace):
        raw = (workspace / "synth.pgm").read_bytes()
        assert raw.startswith(b"P5\n16 16\n255\n")
        assert len(raw) == len(b"P5\n16 16\n255\n") + 16 * 16

    def test_config_echo_defaults(self, workspace, tmp_path):
        model = workspace / "model.dfqm"
        out = tmp_path / "s.pgm"
        main(["synth", "--model", str(model), "--out", str(out), "--iters", "0", "--evolve-iters", "0"])
        echoed = parse_config_file(tmp_path / "s.cfg")
        assert echoed["alpha"] == "0.5" and echoed["beta"] == "0.05"
        assert echoed["eps1"] == "0.8"

    def test_zero_iters_writes_gaussian(self, workspace, tmp_path):
        model = workspace / "model.dfqm"
        out = tmp_path / "g.pgm"
        main(["synth", "--model", str(model), "--out", str(out), "--iters", "0", "--evolve-iters", "0", "--seed", "5"])
        img = read_raw_image(tmp_path / "g.raw")
        assert np.array_equal(img, np.random.default_rng(5).standard_normal((16, 16, 1)))

    def test_echo_round_trip(self, workspace, tmp_path):
        model = workspace / "model.dfqm"
        again = tmp_path / "again.pgm"
        rc = main(["synth", "--model", str(model), "--config", str(workspace / "synth.cfg"), "--out", str(again)])
        assert rc == 0
        assert again.read_bytes() == (workspace / "synth.pgm").read_bytes()
        assert (tmp_path / "again.raw").read_bytes() == (workspace / "synth.raw").read_bytes()

    def test_missing_model(self, tmp_path):
        assert main(["synth", "--model", str(tmp_path / "no.dfqm"), "--out", str(tmp_path / "x.pgm")]) == 1


class TestQuantizeEval:
    def test_quantize_and_eval(self, workspace, capsys):
        q = workspace / "q.dfqm"
        rc = main(["quantize", "--model", str(workspace / "model.dfqm"), "--calib", str(workspace / "synth.pgm"), "--bits", "4", "--out", str(q)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "W4/A4, weights per-channel, activations per-layer" in out
        rc = main(["eval", "--model", str(q), "--out", str(workspace / "q.csv"), "--images", "2"])
        assert rc == 0
        assert "precision 4/4" in capsys.readouterr().out
        with open(workspace / "q.csv") as f:
            (row,) = list(csv.DictReader(f))
        assert row["w_bits"] == "4" and row["method"] == "ptq"

    def test_eval_fp_precision(self, workspace, capsys):
        rc = main(["eval", "--model", str(workspace / "model.dfqm"), "--out", str(workspace / "fp.csv"), "--images", "2"])
        assert rc == 0
        assert "precision 32/32" in capsys.readouterr().out

    def test_calibration_rejects_view_only_export(self, workspace, tmp_path):
        # a .pgm with no sibling raw file must fail with a named file
        lonely = tmp_path / "lonely.pgm"
        write_pnm(lonely, np.zeros((16, 16, 1)))
        rc = main(["quantize", "--model", str(workspace / "model.dfqm"), "--calib", str(lonely), "--out", str(tmp_path / "q.dfqm")])
        assert rc == 1

    def test_raw_round_trip(self, tmp_path):
        img = np.random.default_rng(0).normal(size=(8, 8, 3))
        write_raw_image(tmp_path / "i.raw", img)
        assert np.array_equal(read_raw_image(tmp_path / "i.raw"), img)
        write_pnm(tmp_path / "i.ppm", img)
        assert (tmp_path / "i.ppm").read_bytes().startswith(b"P6\n8 8\n255\n")
        assert np.array_equal(load_calibration_image(tmp_path / "i.ppm"), img)


class TestCompare:
    def test_row_count_and_determinism(self, workspace, tmp_path):
        args = [
            "compare", "--model", str(workspace / "model.dfqm"),
            "--synth", str(workspace / "synth.pgm"),
            "--bits", "4,8", "--images", "2", "--seed", "1",
        ]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main([*args, "--out", str(a)]) == 0
        assert main([*args, "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        with open(a) as f:
            rows = list(csv.DictReader(f))
        # 3 sources x 2 bit settings + 1 shared baseline
        assert len(rows) == 7
        assert rows[0]["method"] == "fp"

    def test_synthesized_requires_path(self, workspace, tmp_path):
        rc = main(["compare", "--model", str(workspace / "model.dfqm"), "--out", str(tmp_path / "c.csv"), "--images", "2"])
        assert rc == 1

    def test_unknown_source(self, workspace, tmp_path):
        rc = main([
            "compare", "--model", str(workspace / "model.dfqm"), "--out", str(tmp_path / "c.csv"),
            "--sources", "voodoo", "--images", "2",
        ])
        assert rc == 1
