import csv
import json

import numpy as np
import pytest

from bayeseg import cli, io
from bayeseg.data import Boundaries, masks_from_boundaries, write_boundaries_csv
from bayeseg.config import DEFAULTS, ConfigError, parse_override, resolve
from bayeseg.uncertainty import SampleStack, total

TINY = {
    "data": {"n_samples": 20},
    "synth": {"height": 16, "width": 16, "layer_thickness": [3, 4, 3], "top_row": 3, "amplitude": [0.5, 1.0]},
    "model": {"depth": 2, "base_channels": 2, "image_size": [16, 16]},
    "train": {"epochs": 2, "val_samples": 2, "batch_size": 5},
    "inference": {"T": 3},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "run_dir": str(tmp_path / "run")}))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_defaults_valid(self):
        cfg = resolve()
        assert cfg["train"]["epochs"] == 15 and cfg["model"]["depth"] == 3

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="epochz"):
            resolve(overrides=["train.epochz=3"])

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match="train.batch_size"):
            resolve(overrides=['train.batch_size="four"'])

    def test_override_parsing(self):
        assert parse_override("a.b=3") == {"a": {"b": 3}}
        assert parse_override("run_dir=x/y") == {"run_dir": "x/y"}
        with pytest.raises(ConfigError):
            parse_override("novalue")

    def test_file_then_overrides(self, tiny):
        cfg = resolve(tiny, ["train.epochs=7"])
        assert cfg["train"]["epochs"] == 7 and cfg["model"]["base_channels"] == 2

    def test_cross_check_classes(self):
        with pytest.raises(ConfigError, match="classes"):
            resolve(overrides=["model.num_classes=5"])

    def test_defaults_untouched(self, tiny):
        before = json.dumps(DEFAULTS, sort_keys=True)
        resolve(tiny, ["seed=4"])
        assert json.dumps(DEFAULTS, sort_keys=True) == before


class TestSynth:
    def test_default_desk_counts(self, tmp_path):
        assert run("synth", "--run-dir", tmp_path, "--out", tmp_path / "d") == 0
        manifest = io.read_json(tmp_path / "d" / "manifest.json")
        assert len(manifest["samples"]) == 150
        assert manifest["split_counts"] == {"train": 120, "val": 30}

    def test_empty(self, tmp_path):
        assert run("synth", "--run-dir", tmp_path, "--set", "data.n_samples=0") == 0
        assert io.read_json(tmp_path / "data" / "manifest.json")["samples"] == []

    def test_byte_identical_rerun(self, tiny, tmp_path):
        run("synth", "--config", tiny, "--out", tmp_path / "a")
        run("synth", "--config", tiny, "--out", tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 41
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("synth", "--run-dir", tmp_path, "--out", blocker / "sub") == cli.EXIT_DATA


class TestPipeline:
    def test_end_to_end(self, tiny, tmp_path, capsys):
        rd = tmp_path / "run"
        assert run("synth", "--config", tiny) == 0
        assert run("train", "--config", tiny, "--data", rd / "data") == 0
        out = capsys.readouterr().out
        assert "epoch   2" in out and "final val_dice" in out
        hist = list(csv.DictReader(open(rd / "history.csv")))
        assert [h["epoch"] for h in hist] == ["1", "2"]
        assert (rd / "config.train.json").exists()

        assert run("infer", "--config", tiny, "--data", rd / "data") == 0
        scores = cli.read_scores(rd / "infer" / "scores.csv")
        assert len(scores) == 5
        # exported maps agree with the exported stack
        sid = scores[0][0]
        stack = SampleStack(io.load_tnsr(rd / "infer" / "stacks" / f"{sid}.tnsr"))
        assert stack.T == 3
        maps = total(stack)
        exported = io.load_tnsr(rd / "infer" / "maps" / f"{sid}_total.tnsr")
        np.testing.assert_array_equal(exported, maps.total)
        ale = io.load_tnsr(rd / "infer" / "maps" / f"{sid}_aleatoric.tnsr")
        epi = io.load_tnsr(rd / "infer" / "maps" / f"{sid}_epistemic.tnsr")
        np.testing.assert_allclose(ale + epi, exported, atol=1e-15)
        sidecar = io.read_json(rd / "infer" / "labels" / f"{sid}.json")
        assert [c["index"] for c in sidecar["classes"]] == [0, 1, 2, 3]

        assert run("evaluate", "--config", tiny, "--pred", rd / "infer" / "labels", "--truth", rd / "data") == 0
        assert (rd / "evaluation" / "report.csv").exists()

        assert run("flag", "--config", tiny, "--scores", rd / "infer" / "scores.csv", "--threshold", "inf") == 0
        assert len(list(csv.reader(open(rd / "flagged.csv")))) == 1
        assert run("flag", "--config", tiny, "--maps", rd / "infer" / "maps", "--threshold", 0) == 0
        assert len(list(csv.reader(open(rd / "flagged.csv")))) == 6

        assert run("biomarkers", "--config", tiny, "--stacks", rd / "infer" / "stacks",
                   "--manifest", rd / "data" / "manifest.json") == 0
        rows = list(csv.DictReader(open(rd / "biomarkers" / "slices.csv")))
        assert len(rows) == 5 * 3

    def test_hcms_tree_resized_and_restored(self, tiny, tmp_path):
        # 12x20 scans in the HCMS layout; the model runs at 16x16
        rng = np.random.default_rng(0)
        root = tmp_path / "hcms"
        for pid in ("HC001", "HC002", "MS001", "MS002"):
            (root / pid).mkdir(parents=True)
            for k in range(2):
                rows = np.sort(rng.uniform(1, 11, size=(3, 1)), axis=0) + np.zeros((1, 20))
                mask = masks_from_boundaries(Boundaries(rows, ["a", "b", "c"]), (12, 20))
                io.write_pgm(root / pid / f"b{k}.pgm", (mask * 60).astype(int))
                write_boundaries_csv(root / pid / f"b{k}_boundaries.csv", Boundaries(rows, ["a", "b", "c"]))
        rd = tmp_path / "run"
        assert run("train", "--config", tiny, "--data", root, "--set", "data.split_ratio=0.5") == 0
        assert run("infer", "--config", tiny, "--data", root, "--set", 'inference.split="all"',
                   "--set", "data.split_ratio=0.5") == 0
        labels = sorted((rd / "infer" / "labels").glob("*.pgm"))
        assert len(labels) == 8
        assert all(io.read_pgm(f)[0].shape == (12, 20) for f in labels)
        assert io.load_tnsr(rd / "infer" / "stacks" / "HC001_b0.tnsr").shape == (3, 4, 16, 16)
        assert run("evaluate", "--config", tiny, "--pred", rd / "infer" / "labels", "--truth", root) == 0
        assert len(list(csv.DictReader(open(rd / "evaluation" / "report.csv")))) > 0

    def test_infer_t1_and_deterministic(self, tiny, tmp_path):
        rd = tmp_path / "run"
        run("train", "--config", tiny, "--epochs", 1)
        run("infer", "--config", tiny, "--T", 1, "--out", tmp_path / "a")
        run("infer", "--config", tiny, "--T", 1, "--out", tmp_path / "b", "--threads", 2)
        for f in sorted((tmp_path / "a" / "stacks").iterdir()):
            assert io.load_tnsr(f).shape[0] == 1
            assert f.read_bytes() == (tmp_path / "b" / "stacks" / f.name).read_bytes()
        assert (tmp_path / "a" / "scores.csv").read_bytes() == (tmp_path / "b" / "scores.csv").read_bytes()
        assert rd.exists()

    def test_infer_architecture_mismatch(self, tiny):
        run("train", "--config", tiny, "--epochs", 1)
        assert run("infer", "--config", tiny, "--set", "model.base_channels=3") == cli.EXIT_DATA

    def test_seeded_train_identical_history(self, tiny, tmp_path):
        run("train", "--config", tiny, "--run-dir", tmp_path / "a")
        run("train", "--config", tiny, "--run-dir", tmp_path / "b")
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    def test_lambda_zero_loss_equals_nll(self, tiny):
        run("train", "--config", tiny, "--lambda-kl", 0)
        for row in csv.DictReader(open(resolve(tiny)["run_dir"] + "/history.csv")):
            assert row["train_loss"] == row["nll"]


class TestEvaluate:
    def fixture(self, root):
        pred, truth = root / "pred", root / "truth"
        pred.mkdir()
        truth.mkdir()
        p = np.zeros((8, 8), int)
        t = np.zeros((8, 8), int)
        p[:, :4] = 1
        t[:4, :] = 1
        io.write_pgm(pred / "img.pgm", p, maxval=255)
        io.write_pgm(truth / "img.pgm", t, maxval=255)
        return pred, truth

    def test_hand_computed(self, tmp_path):
        pred, truth = self.fixture(tmp_path)
        assert run("evaluate", "--run-dir", tmp_path, "--pred", pred, "--truth", truth,
                   "--set", 'evaluation.class_names=["Background","Layer"]') == 0
        rows = list(csv.reader(open(tmp_path / "evaluation" / "report.csv")))
        assert rows[1][:3] == ["1", "Layer", "0.5"]

    def test_identical_dirs(self, tmp_path):
        pred, _ = self.fixture(tmp_path)
        run("evaluate", "--run-dir", tmp_path, "--pred", pred, "--truth", pred)
        rows = list(csv.reader(open(tmp_path / "evaluation" / "report.csv")))
        assert all(float(r[2]) == 1.0 for r in rows[1:] if r[2] != "nan")

    def test_aggregation_fewer_columns(self, tmp_path):
        d = tmp_path / "maps"
        d.mkdir()
        io.write_pgm(d / "a.pgm", np.arange(10).reshape(2, 5), maxval=255)
        names = json.dumps(["Background", "RNFL", "GCP", "IPL", "INL", "OPL", "ONL", "IS", "OS", "RPE"])
        run("evaluate", "--run-dir", tmp_path, "--pred", d, "--truth", d, "--set", f"evaluation.class_names={names}")
        full = (tmp_path / "evaluation" / "report.txt").read_text().split("\n")[0].split()
        run("evaluate", "--run-dir", tmp_path, "--pred", d, "--truth", d, "--set", f"evaluation.class_names={names}",
            "--set", 'evaluation.aggregation="five_layer"')
        agg = (tmp_path / "evaluation" / "report.txt").read_text().split("\n")[0].split()
        assert len(full) == 11 and agg == ["Layer", "RNFL", "GCP", "INL", "ONL", "RPE", "Average"]


class TestExitCodes:
    def test_config_error(self, tmp_path):
        assert run("train", "--run-dir", tmp_path, "--set", "train.nope=1") == cli.EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert run("synth", "--config", tmp_path / "c.json") == cli.EXIT_CONFIG

    def test_data_error(self, tmp_path):
        assert run("train", "--run-dir", tmp_path, "--data", tmp_path / "missing") == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_error(self, tiny):
        assert run("train", "--config", tiny, "--set", "train.learning_rate=1e300") == cli.EXIT_NUMERIC

    def test_flag_needs_input(self, tmp_path):
        assert run("flag", "--run-dir", tmp_path) == cli.EXIT_CONFIG

    def test_bad_threads(self, tmp_path):
        assert run("synth", "--run-dir", tmp_path, "--threads", 0) == cli.EXIT_CONFIG


def test_lambda_sweep_single_zero(tiny, tmp_path):
    assert run("lambda-sweep", "--config", tiny, "--lambdas", "0") == 0
    rd = tmp_path / "run"
    rows = list(csv.reader(open(rd / "lambda_summary.csv")))
    assert len(rows) == 2 and rows[1][0] == "0.0"
    for row in csv.DictReader(open(rd / "lambda_0" / "history.csv")):
        assert row["train_loss"] == row["nll"]
