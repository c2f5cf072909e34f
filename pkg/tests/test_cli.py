import os

import numpy as np
import pytest

from nicap.cli import main
from nicap.data import generate_fixture, load_manifest, write_feature, write_manifest
from nicap.model import load_checkpoint, save_checkpoint
from nicap.text import Vocabulary

from helpers import tiny_config, zero_params


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Fixture dataset + vocabulary shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    manifest = generate_fixture(root / "data", n_records=8, seed=7, feature_dim=32)
    vocab_path = str(root / "vocab.txt")
    code = main(
        ["preprocess", "--manifest", manifest, "--min-freq", "1",
         "--max-len", "14", "--vocab-out", vocab_path]
    )
    assert code == 0
    return {"root": root, "manifest": manifest, "vocab": vocab_path}


TRAIN_FLAGS = [
    "--feature-dim", "32", "--embed-dim", "12", "--hidden-dim", "12",
    "--classifier-h1", "8", "--classifier-h2", "4", "--dropout", "0",
    "--max-len", "14", "--split-fraction", "0.9", "--seed", "3",
]


def train_args(workdir, checkpoint, epochs, extra=()):
    return [
        "train", "--manifest", workdir["manifest"], "--vocab", workdir["vocab"],
        "--checkpoint", checkpoint, "--epochs", str(epochs), "--lr", "0.2",
        *TRAIN_FLAGS, *extra,
    ]


class TestPreprocess:
    def test_stats_output(self, workdir, capsys):
        out = str(workdir["root"] / "v2.txt")
        code = main(
            ["preprocess", "--manifest", workdir["manifest"], "--min-freq", "1",
             "--max-len", "14", "--vocab-out", out]
        )
        captured = capsys.readouterr().out
        assert code == 0
        stats = dict(line.split("\t") for line in captured.strip().split("\n"))
        assert stats["captions_total"] == "8"
        assert stats["captions_discarded"] == "0"
        assert int(stats["vocab_size"]) > 4

    def test_min_freq_one_keeps_every_token(self, workdir):
        vocab = Vocabulary.load(workdir["vocab"])
        records = load_manifest(workdir["manifest"])
        corpus_tokens = {w for r in records for c in r.captions for w in c.split()}
        assert corpus_tokens <= set(vocab.index_to_token[4:])

    def test_rerun_bit_identical(self, workdir):
        a, b = str(workdir["root"] / "va.txt"), str(workdir["root"] / "vb.txt")
        for out in (a, b):
            assert main(
                ["preprocess", "--manifest", workdir["manifest"], "--min-freq", "1",
                 "--max-len", "14", "--vocab-out", out]
            ) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_invalid_flag_fails_before_writing(self, workdir):
        out = workdir["root"] / "never.txt"
        code = main(
            ["preprocess", "--manifest", workdir["manifest"], "--min-freq", "0",
             "--max-len", "14", "--vocab-out", str(out)]
        )
        assert code == 1
        assert not out.exists()

    def test_missing_manifest_is_io_error(self, workdir, tmp_path):
        code = main(
            ["preprocess", "--manifest", str(tmp_path / "nope.jsonl"), "--min-freq", "1",
             "--max-len", "14", "--vocab-out", str(tmp_path / "v.txt")]
        )
        assert code == 2


class TestTrain:
    def test_epochs_zero_is_initialization(self, workdir):
        c1 = str(workdir["root"] / "init1.nicm")
        c2 = str(workdir["root"] / "init2.nicm")
        assert main(train_args(workdir, c1, 0)) == 0
        assert main(train_args(workdir, c2, 0)) == 0
        assert open(c1, "rb").read() == open(c2, "rb").read()
        _, epochs = load_checkpoint(c1)
        assert epochs == 0

    def test_train_writes_checkpoint_log_and_curve(self, workdir):
        ckpt = str(workdir["root"] / "m.nicm")
        assert main(train_args(workdir, ckpt, 2)) == 0
        assert os.path.exists(ckpt)
        log = str(workdir["root"] / "m_loss.tsv")
        assert open(log).readline().startswith("epoch")
        assert sum(1 for _ in open(log)) == 3
        assert os.path.exists(str(workdir["root"] / "m_loss.png"))
        _, epochs = load_checkpoint(ckpt)
        assert epochs == 2

    def test_resume_equals_straight_run(self, workdir):
        split = str(workdir["root"] / "split.nicm")
        straight = str(workdir["root"] / "straight.nicm")
        assert main(train_args(workdir, split, 2)) == 0
        assert main(train_args(workdir, split, 2, extra=["--resume", split])) == 0
        assert main(train_args(workdir, straight, 4)) == 0
        assert open(split, "rb").read() == open(straight, "rb").read()


@pytest.fixture(scope="module")
def trained(workdir):
    ckpt = str(workdir["root"] / "trained.nicm")
    assert main(train_args(workdir, ckpt, 3)) == 0
    records = load_manifest(workdir["manifest"])
    feature = str(workdir["root"] / "data" / records[0].feature_path)
    return {"checkpoint": ckpt, "feature": feature, **workdir}


class TestCaption:
    def test_beam_one_equals_greedy(self, trained, capsys):
        base = ["caption", "--checkpoint", trained["checkpoint"],
                "--vocab", trained["vocab"], "--feature", trained["feature"]]
        assert main(base) == 0
        greedy = capsys.readouterr().out
        assert main(base + ["--beam", "1"]) == 0
        assert capsys.readouterr().out == greedy

    def test_rigged_eos_checkpoint_gives_empty_caption(self, trained, capsys):
        cfg = tiny_config(feature_dim=32, vocab_size=len(Vocabulary.load(trained["vocab"])))
        params = zero_params(cfg)
        params.b_out.data[2] = 50.0
        path = str(trained["root"] / "eos.nicm")
        save_checkpoint(path, params)
        code = main(["caption", "--checkpoint", path, "--vocab", trained["vocab"],
                     "--feature", trained["feature"]])
        assert code == 0
        assert capsys.readouterr().out == "\n"

    def test_vocab_size_mismatch(self, trained, tmp_path):
        bad_vocab = tmp_path / "bad.txt"
        bad_vocab.write_text("<pad>\n<bos>\n<eos>\n<unk>\nonlyword\n")
        code = main(["caption", "--checkpoint", trained["checkpoint"],
                     "--vocab", str(bad_vocab), "--feature", trained["feature"]])
        assert code == 1


class TestClassify:
    def test_zero_weight_checkpoint_is_half_anomaly(self, trained, capsys):
        cfg = tiny_config(feature_dim=32, vocab_size=len(Vocabulary.load(trained["vocab"])))
        path = str(trained["root"] / "zero.nicm")
        save_checkpoint(path, zero_params(cfg))
        assert main(["classify", "--checkpoint", path, "--feature", trained["feature"]]) == 0
        label, prob = capsys.readouterr().out.strip().split("\t")
        assert label == "anomaly" and float(prob) == 0.5

    def test_missing_feature_file(self, trained):
        code = main(["classify", "--checkpoint", trained["checkpoint"],
                     "--feature", "does-not-exist.nicf"])
        assert code == 2


class TestEvaluate:
    def test_report_and_figures(self, trained, capsys):
        report = str(trained["root"] / "eval.tsv")
        code = main(
            ["evaluate", "--checkpoint", trained["checkpoint"], "--manifest",
             trained["manifest"], "--vocab", trained["vocab"], "--report", report,
             "--split", "all", "--seed", "3"]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "POOLED_METEOR_X100" in out and "ACCURACY" in out
        lines = open(report).read().strip().split("\n")
        assert sum(1 for ln in lines if ln.startswith("rec")) == 8
        assert any(ln.startswith("POOLED") for ln in lines)
        assert any(ln.startswith("CLASSIFICATION") for ln in lines)
        assert os.path.exists(str(trained["root"] / "eval_scores.png"))
        assert os.path.exists(str(trained["root"] / "eval_confusion.png"))

    def test_jobs_flag_keeps_report_identical(self, trained):
        r1 = str(trained["root"] / "e1.tsv")
        r2 = str(trained["root"] / "e2.tsv")
        for report, jobs in ((r1, "1"), (r2, "3")):
            assert main(
                ["evaluate", "--checkpoint", trained["checkpoint"], "--manifest",
                 trained["manifest"], "--vocab", trained["vocab"], "--report", report,
                 "--split", "all", "--jobs", jobs]
            ) == 0
        assert open(r1).read() == open(r2).read()


class TestScoreMeteor:
    def test_identical_files_identity_scores(self, tmp_path, capsys):
        lines = "a man is holding a gun\ntwo men kicking violently\n"
        hyp = tmp_path / "h.txt"
        ref = tmp_path / "r.txt"
        hyp.write_text(lines)
        ref.write_text(lines)
        assert main(["score-meteor", "--hyp", str(hyp), "--ref", str(ref)]) == 0
        out = capsys.readouterr().out.strip().split("\n")
        first = out[0].split("\t")
        # report values carry six decimals
        assert first[0] == "1" and float(first[-1]) == pytest.approx(1 - 0.5 / 6**3, abs=5e-7)
        assert out[-1].startswith("MEAN\t")

    def test_mismatched_line_counts(self, tmp_path):
        hyp = tmp_path / "h.txt"
        ref = tmp_path / "r.txt"
        hyp.write_text("a\nb\n")
        ref.write_text("a\n")
        assert main(["score-meteor", "--hyp", str(hyp), "--ref", str(ref)]) == 2

    def test_report_file_output(self, tmp_path):
        hyp = tmp_path / "h.txt"
        ref = tmp_path / "r.txt"
        hyp.write_text("a man is running\n")
        ref.write_text("a woman is running\n")
        out = tmp_path / "report.tsv"
        assert main(["score-meteor", "--hyp", str(hyp), "--ref", str(ref),
                     "--out", str(out)]) == 0
        assert out.read_text().count("\n") == 3


class TestGradcheck:
    def test_default_dims_pass(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        err = float(out.split("\t")[1].split("\n")[0])
        assert err <= 1e-4

    def test_unreachable_threshold_fails_with_numeric_exit(self, capsys):
        assert main(["gradcheck", "--threshold", "1e-18"]) == 3
        assert "FAIL" in capsys.readouterr().out


class TestLint:
    def test_clean_fixture_passes(self, workdir, capsys):
        assert main(["lint", "--manifest", workdir["manifest"]]) == 0
        assert capsys.readouterr().out == ""

    def test_digit_caption_fails(self, tmp_path, capsys):
        from nicap.data import DatasetRecord

        manifest = tmp_path / "m.jsonl"
        write_manifest(
            [DatasetRecord("bad", ["2 men fighting"], "anomaly",
                           feature_inline=np.zeros(4))],
            manifest,
        )
        assert main(["lint", "--manifest", str(manifest)]) == 1
        assert "CONTAINS_DIGIT" in capsys.readouterr().out

    def test_advisory_only_is_zero_exit(self, tmp_path, capsys):
        from nicap.data import DatasetRecord

        manifest = tmp_path / "m.jsonl"
        write_manifest(
            [DatasetRecord("short", ["fire"], "anomaly", feature_inline=np.zeros(4))],
            manifest,
        )
        assert main(["lint", "--manifest", str(manifest)]) == 0
        assert "LENGTH_ADVISORY" in capsys.readouterr().out


class TestFixtureCommand:
    def test_generates_loadable_dataset(self, tmp_path, capsys):
        code = main(["fixture", "--out-dir", str(tmp_path / "fx"), "--records", "4",
                     "--feature-dim", "16", "--seed", "1"])
        assert code == 0
        manifest = capsys.readouterr().out.strip().split("\t")[1]
        assert len(load_manifest(manifest)) == 4
