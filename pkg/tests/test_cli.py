import json

import numpy as np
import pytest

from d2net import cli
from d2net.data import load_wav, save_wav, synth_corpus
from d2net.model import load_checkpoint

SMALL = """\
# tiny settings so every command runs in seconds
channels = 16
synth_tracks = 3
synth_seconds = 1.5
clip_seconds = 0.5
batch_size = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    return root


@pytest.fixture(scope="module")
def checkpoint(workdir):
    out = workdir / "run"
    rc = cli.main(["train", "--config", str(workdir / "small.cfg"), "--synth", "--epochs", "2",
                   "--out", str(out)])
    assert rc == 0
    return out / "model.ckpt"


def parse(argv):
    return cli.resolve_config(cli.build_parser().parse_args(argv))


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("d2net: error=")
    return err[0]


# ---------------------------------------------------------------------------
# configuration layering
# ---------------------------------------------------------------------------

class TestConfig:

    def test_defaults_are_desk(self):
        cfg = parse(["train"])
        assert cfg.preset == "desk" and cfg.model.channels == 64 and cfg.model.freq_bins == 65
        assert cfg.train.epochs == 50 and cfg.train.learning_rate == 1e-3
        assert cfg.stft.window_size == 128 and cfg.synth_tracks == 20

    def test_paper_profile(self):
        cfg = parse(["train", "--preset", "paper"])
        assert cfg.model.channels == 2048 and cfg.stft.sample_rate == 44100
        assert cfg.train.learning_rate == 1e-4 and cfg.train.epochs == 500

    def test_file_then_flags(self, workdir):
        cfg = parse(["train", "--config", str(workdir / "small.cfg"), "--seed", "9", "--clip-seconds", "20"])
        assert cfg.model.channels == 16 and cfg.synth_tracks == 3
        assert cfg.train.seed == 9 and cfg.train.clip_seconds == 20 and cfg.train.batch_size == 5

    def test_block_count_extends_dilations(self):
        cfg = parse(["train", "--blocks", "3"])
        assert cfg.model.num_blocks == 3 and cfg.model.conv_dilations == [2, 4, 8]
        assert cfg.model.gru_dilations == [2, 2, 2]

    def test_increasing_gru_dilations(self):
        cfg = parse(["train", "--blocks", "3", "--gru-dilations", "2,4,8"])
        assert cfg.model.gru_dilations == [2, 4, 8]

    def test_single_gru_dilation(self):
        assert parse(["train", "--gru-dilation", "4"]).model.gru_dilations == [4, 4]

    @pytest.mark.parametrize("variant", ["dense", "conv_dgconv"])
    def test_block_variant(self, variant):
        assert parse(["train", "--block-variant", variant]).model.block_variant == variant

    def test_grad_clip_off(self):
        assert parse(["train", "--grad-clip", "off"]).train.grad_clip is None

    def test_unknown_key(self, workdir, capsys):
        bad = workdir / "bad.cfg"
        bad.write_text("nonsense = 1\n")
        assert cli.main(["train", "--config", str(bad), "--synth"]) == 1
        assert "nonsense" in error_line(capsys)

    def test_missing_equals(self, workdir, capsys):
        bad = workdir / "bad2.cfg"
        bad.write_text("channels 16\n")
        assert cli.main(["train", "--config", str(bad)]) == 1
        assert "key=value" in error_line(capsys)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class TestTrain:

    def test_writes_checkpoint_and_log(self, checkpoint):
        log = (checkpoint.parent / "train_log.tsv").read_text().splitlines()
        assert log[0].startswith("epoch\ttrain_loss\tval_loss") and len(log) == 3
        ckpt = load_checkpoint(checkpoint)
        assert ckpt.config.channels == 16 and ckpt.stft.sample_rate == 8000

    def test_zero_epochs_saves_initialized_model(self, workdir, capsys):
        out = workdir / "zero"
        assert cli.main(["train", "--config", str(workdir / "small.cfg"), "--synth",
                         "--epochs", "0", "--seed", "4", "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["best_epoch"] == 0 and summary["initial_loss"] == summary["final_loss"]
        assert load_checkpoint(out / "model.ckpt").epoch == 0

    def test_construct_only_prints_size(self, capsys):
        assert cli.main(["train", "--construct-only", "--blocks", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split("\t")[2:] == ["65", "64"]
        assert lines[-1].startswith("parameters\t")

    def test_requires_corpus(self, capsys, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path / "never")]) == 1
        assert "error=ValueError" in error_line(capsys)
        assert not (tmp_path / "never").exists()


class TestSeparate:

    def test_one_file_per_source(self, checkpoint, workdir):
        mix = synth_corpus(21, 2, 1.2)[0].mixture
        save_wav(workdir / "mix.wav", mix, 8000)
        out = workdir / "sep"
        assert cli.main(["separate", str(checkpoint), str(workdir / "mix.wav"), "--out", str(out)]) == 0
        waves = {s: load_wav(out / f"{s}.wav") for s in ("vocals", "drums", "bass", "other")}
        assert all(sr == 8000 and len(w) == len(mix) for w, sr in waves.values())
        total = sum(w for w, _ in waves.values())
        assert np.corrcoef(total, mix)[0, 1] > 0.99

    def test_rate_mismatch(self, checkpoint, workdir, capsys):
        save_wav(workdir / "fast.wav", np.zeros(4000), 16000)
        rc = cli.main(["separate", str(checkpoint), str(workdir / "fast.wav"), "--out", str(workdir / "x")])
        assert rc == 1
        line = error_line(capsys)
        assert "error=RateMismatchError" in line and "resample" in line

    def test_missing_checkpoint(self, workdir, capsys):
        assert cli.main(["separate", str(workdir / "none.ckpt"), "x.wav", "--out", str(workdir)]) == 1
        assert "error=FileNotFoundError" in error_line(capsys)


class TestEvaluate:

    def test_report(self, checkpoint, workdir, capsys):
        out = workdir / "eval"
        rc = cli.main(["evaluate", str(checkpoint), "--config", str(workdir / "small.cfg"),
                       "--synth", "--out", str(out)])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["median"]) == {"vocals", "drums", "bass", "other"}
        assert "mixture_baseline" in summary
        assert (out / "scores.tsv").exists() and (out / "heatmap_sdr.tsv").exists()

    def test_corpus_directory(self, checkpoint, workdir):
        from d2net.data import save_corpus
        save_corpus(workdir / "corpus", synth_corpus(5, 2, 1.2))
        rc = cli.main(["evaluate", str(checkpoint), "--corpus", str(workdir / "corpus"),
                       "--out", str(workdir / "eval2")])
        assert rc == 0
        assert json.loads((workdir / "eval2" / "summary.json").read_text())["num_tracks"] == 2


class TestBench:

    def test_table(self, workdir, capsys):
        rc = cli.main(["bench", "--config", str(workdir / "small.cfg"), "--dilations", "1,2",
                       "--worker-counts", "1,2", "--lengths", "64", "--runs", "3",
                       "--out", str(workdir / "bench")])
        assert rc == 0
        rows = (workdir / "bench" / "bench.tsv").read_text().splitlines()
        assert rows[0].split("\t") == ["dilation", "workers", "T", "median_ms", "stdev_ms", "runs"]
        assert len(rows) == 1 + 4

    def test_run_bench_cells(self):
        from d2net.model import ModelConfig
        rows = cli.run_bench(ModelConfig.desk(channels=8, groups=4), [1, 2], [1, 2], [32], runs=10)
        assert {(r["dilation"], r["workers"]) for r in rows} == {(1, 1), (1, 2), (2, 1), (2, 2)}
        assert all(r["runs"] == 10 and r["median_ms"] > 0 for r in rows)


class TestAblate:

    def test_rows_per_keep_and_source(self, checkpoint, workdir, capsys):
        out = workdir / "ablate"
        rc = cli.main(["ablate", str(checkpoint), "--config", str(workdir / "small.cfg"),
                       "--synth", "--out", str(out)])
        assert rc == 0
        rows = (out / "ablation.tsv").read_text().splitlines()
        assert rows[0].split("\t") == ["keep", "source", "SDR", "rms"]
        assert len(rows) == 1 + 3 * 4
        assert all(np.isfinite(float(r.split("\t")[3])) for r in rows[1:])

    def test_keep_max_matches_separate(self, checkpoint):
        from d2net.model import D2Net
        from d2net.pipeline import separate
        ckpt = load_checkpoint(checkpoint)
        model = D2Net.from_checkpoint(ckpt)
        mix = synth_corpus(8, 2, 1.0)[0].mixture
        full = separate(model, mix, ckpt.stft)
        kept = separate(model, mix, ckpt.stft, keep_blocks=model.config.num_blocks)
        assert all(full[s].tobytes() == kept[s].tobytes() for s in full)

    def test_keep_out_of_range(self, checkpoint, workdir, capsys):
        rc = cli.main(["ablate", str(checkpoint), "--config", str(workdir / "small.cfg"),
                       "--synth", "--keep", "5", "--out", str(workdir / "ab2")])
        assert rc == 1
        assert "keep" in error_line(capsys)
