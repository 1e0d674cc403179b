import numpy as np
import pytest

from d2net import numerics as nm
from d2net.data import TrainConfig, synth_corpus
from d2net.dsp import StftConfig
from d2net.model import D2Net, ModelConfig, load_checkpoint
from d2net.pipeline import (RateMismatchError, check_rate, evaluate_tracks, mixture_baseline,
                            predict_magnitudes, separate)
from d2net.dsp import stft
from d2net.train import TrainingError, clip_grad_norm, train

DESK = StftConfig.desk()


@pytest.fixture(scope="module")
def small_model():
    return D2Net(ModelConfig.desk(channels=16), rng=0)


@pytest.fixture(scope="module")
def tiny_corpus():
    return synth_corpus(seed=11, n_tracks=4, seconds=1.5)


# ---------------------------------------------------------------------------
# separation
# ---------------------------------------------------------------------------

class TestSeparate:

    def test_sum_of_estimates_tracks_input(self, small_model, tiny_corpus):
        mix = tiny_corpus[0].mixture
        est = separate(small_model, mix, DESK)
        assert set(est) == {"vocals", "drums", "bass", "other"}
        total = sum(est.values())
        assert np.corrcoef(total, mix)[0, 1] > 0.99

    def test_zero_input_gives_zero_output(self, small_model):
        est = separate(small_model, np.zeros(3000), DESK)
        assert all(np.max(np.abs(v)) < 1e-9 for v in est.values())

    @pytest.mark.parametrize("n", [999, 1000, 1031])
    def test_duration_preserved(self, small_model, rng, n):
        est = separate(small_model, rng.standard_normal(n) * 0.1, DESK)
        assert all(v.shape == (n,) for v in est.values())

    def test_stereo_channels_independent(self, small_model, rng):
        x = rng.standard_normal((1200, 2)) * 0.1
        est = separate(small_model, x, DESK)
        left = separate(small_model, x[:, 0], DESK)
        assert est["bass"].shape == (1200, 2)
        np.testing.assert_allclose(est["bass"][:, 0], left["bass"], atol=1e-6)

    def test_without_wiener_uses_mixture_phase(self, small_model, rng):
        x = rng.standard_normal(1200) * 0.1
        est = separate(small_model, x, DESK, wiener=False)
        assert all(np.all(np.isfinite(v)) for v in est.values())

    def test_magnitudes_non_negative(self, small_model, rng):
        mags = predict_magnitudes(small_model, stft(rng.standard_normal(900), DESK))
        assert all(np.all(m >= 0) and m.shape == (65, 29, 1) for m in mags.values())

    def test_rate_mismatch(self):
        check_rate(8000, DESK)
        with pytest.raises(RateMismatchError, match="resample"):
            check_rate(16000, DESK)

    def test_evaluate_and_baseline(self, small_model, tiny_corpus):
        scores = evaluate_tracks(small_model, tiny_corpus[:2], DESK)
        base = mixture_baseline(tiny_corpus[:2])
        assert len(scores) == len(base) == 2
        assert all(np.isfinite(v["SDR"]) for s in scores for v in s.scores.values())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_small(tracks, epochs=2, seed=0, **kw):
    model = D2Net(ModelConfig.desk(channels=16), rng=seed)
    cfg = TrainConfig(clip_seconds=0.5, batch_size=4, epochs=epochs, seed=seed, **kw)
    return train(model, tracks, cfg, DESK)


class TestTrain:

    def test_loss_decreases(self, tiny_corpus):
        res = train_small(tiny_corpus, epochs=4)
        assert res.final_loss < res.initial_loss
        assert len(res.history) == 4

    def test_same_seed_same_curve(self, tiny_corpus):
        a = train_small(tiny_corpus, epochs=2, seed=3).history
        b = train_small(tiny_corpus, epochs=2, seed=3).history
        assert [(r["train_loss"], r["val_loss"]) for r in a] == [(r["train_loss"], r["val_loss"]) for r in b]

    def test_zero_epochs_keeps_initial_weights(self, tiny_corpus, tmp_path):
        model = D2Net(ModelConfig.desk(channels=16), rng=1)
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        cfg = TrainConfig(clip_seconds=0.5, epochs=0)
        train(model, tiny_corpus, cfg, DESK, checkpoint_path=tmp_path / "m.ckpt")
        ckpt = load_checkpoint(tmp_path / "m.ckpt")
        for k, v in before.items():
            assert ckpt.params[k].tobytes() == v.astype("<f4").tobytes()

    def test_log_and_checkpoint(self, tiny_corpus, tmp_path):
        model = D2Net(ModelConfig.desk(channels=16), rng=1)
        cfg = TrainConfig(clip_seconds=0.5, batch_size=4, epochs=2)
        res = train(model, tiny_corpus, cfg, DESK, log_path=tmp_path / "log.tsv",
                    checkpoint_path=tmp_path / "m.ckpt")
        lines = (tmp_path / "log.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["epoch", "train_loss", "val_loss", "grad_norm", "seconds"]
        assert len(lines) == 3
        ckpt = load_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.epoch == res.best_epoch and ckpt.stft == DESK
        assert ckpt.val_loss == pytest.approx(res.best_val_loss, rel=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self, tiny_corpus):
        model = D2Net(ModelConfig.desk(channels=16), rng=1)
        cfg = TrainConfig(clip_seconds=0.5, batch_size=1, epochs=1, learning_rate=1e30,
                          grad_clip=None, validation_fraction=0)
        with pytest.raises(TrainingError, match=r"epoch 1 batch [1-9]\d*: .*max\|output\|="):
            train(model, tiny_corpus, cfg, DESK)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_initial_loss(self, tiny_corpus):
        model = D2Net(ModelConfig.desk(channels=16), rng=1)
        model.output_conv.bias.data[:] = 1e30
        with pytest.raises(TrainingError, match="epoch 0"):
            train(model, tiny_corpus, TrainConfig(clip_seconds=0.5, epochs=1), DESK)

    def test_clip_grad_norm(self):
        p = nm.Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8], rtol=1e-6)
