import numpy as np
import pytest

from tempoquery import nnet, synthdata as sd
from tempoquery import train as T
from tempoquery.embed import RankingLossConfig
from tempoquery.errors import (ConfigError, FormatError, TrainingDiverged, TruncatedFileError,
                               VariantError)


@pytest.fixture(scope="module")
def tiny_ds():
    return sd.make_pair_dataset(8, 4, (60, 180), 84, seed=2, split_fractions=(5, 2, 1))


class TestVariants:
    @pytest.mark.parametrize("tag,frames,att", [("BL", 84, False), ("BL+AT", 84, True),
                                                ("BL_AT_LC", 168, True)])
    def test_lookup(self, tag, frames, att):
        v = T.variant(tag)
        assert (v.t_frames, v.attention_enabled) == (frames, att)

    def test_inconsistent_variant(self):
        with pytest.raises(VariantError):
            T.ModelVariant("BL", 168, False)
        with pytest.raises(VariantError):
            T.variant("BL_LC")


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = T.TrainConfig(variant="BL_AT_LC", t_frames=168, lr=0.01, epochs=7, seed=5)
        T.write_config(cfg, tmp_path / "c.cfg")
        assert T.read_config(tmp_path / "c.cfg") == cfg

    def test_comments_and_whitespace(self):
        text = T.format_config(T.TrainConfig()).replace("lr=0.05", "  lr = 0.05   # step")
        assert T.parse_config("# header\n" + text) == T.TrainConfig()

    @pytest.mark.parametrize("edit", [
        lambda t: t.replace("t_frames=84", "t_frames=168"),
        lambda t: t.replace("lr=0.05\n", ""),
        lambda t: t + "momentum=0.9\n",
        lambda t: t.replace("epochs=150", "epochs=many"),
        lambda t: t.replace("variant=BL", "variant=XL"),
        lambda t: t.replace("batch_size=32", "batch_size=1"),
    ])
    def test_invalid(self, edit):
        with pytest.raises(ConfigError):
            T.parse_config(edit(T.format_config(T.TrainConfig())))


class TestModel:
    def test_uniform_attention_equals_plain_input(self, tiny_ds):
        m = T.TrainedModel.initialize(T.variant("BL_AT"), seed=1)
        A = m.normalize(tiny_ds.spectrograms[:3])
        np.testing.assert_allclose(m.attend(tiny_ds.spectrograms[:3]), 1 / 84, rtol=1e-6)
        np.testing.assert_allclose(m.encode_audio(tiny_ds.spectrograms[:3]),
                                   m.audio(A[..., None]), rtol=1e-5, atol=1e-6)

    def test_baseline_has_no_attention(self, tiny_ds):
        m = T.TrainedModel.initialize(T.variant("BL"))
        with pytest.raises(VariantError):
            m.attend(tiny_ds.spectrograms[:1])

    def test_wrong_context_length(self, tiny_ds):
        m = T.TrainedModel.initialize(T.variant("BL_AT_LC"))
        with pytest.raises(VariantError):
            m.embed_audio(tiny_ds.spectrograms[:1])

    @pytest.mark.parametrize("tag", ["BL", "BL_AT"])
    def test_full_graph_gradient(self, tag, tiny_ds):
        m = T.TrainedModel.initialize(T.variant(tag), seed=4)
        if m.attention is not None:
            W = m.attention.params["7.dense/W"]
            W[...] = 0.05 * np.random.default_rng(0).standard_normal(W.shape)
        scores, specs = tiny_ds.scores[:6], tiny_ds.spectrograms[:6]
        cfg = RankingLossConfig()
        T.train_step(m, scores, specs, cfg, dtype=np.float64)  # fixes the CCA statistics
        _, grads = T.train_step(m, scores, specs, cfg, dtype=np.float64, cca_mode="infer")

        def loss():
            for net in m.networks().values():
                net.touch()
            return T.train_step(m, scores, specs, cfg, dtype=np.float64, cca_mode="infer")[0]

        rng = np.random.default_rng(1)
        errs = []
        with nnet.frozen_routing(*m.networks().values()):
            loss()
            for name, net in m.networks().items():
                for k in ("0.conv2d/W", "3.conv2d/b"):
                    arr = net.params[k]
                    for idx in nnet.sample_indices(rng, arr.shape, 3):
                        errs.append(nnet.probe_error(loss, arr, idx, grads[name][k][idx]))
        assert max(errs) < 1e-4


class TestTraining:
    def test_zero_epochs(self, tiny_ds):
        m = T.train(T.TrainConfig(epochs=0), "BL", tiny_ds)
        assert m.history == []
        assert m.cca.n_updates == 0

    def test_frame_mismatch(self, tiny_ds):
        with pytest.raises(ConfigError):
            T.train(T.TrainConfig(variant="BL_AT_LC", t_frames=168, epochs=1), "BL_AT_LC", tiny_ds)

    def test_loss_drops_on_tiny_set(self):
        # 20 training pairs, 200 epochs: the model overfits
        ds = sd.make_pair_dataset(6, 4, (60, 180), 84, seed=3, split_fractions=(5, 1, 0))
        assert ds.split_mask("train").sum() == 20
        cfg = T.TrainConfig(epochs=200, batch_size=16, patience=100, lr=0.05)
        m = T.train(cfg, "BL", ds)
        assert len(m.history) == 201
        losses = [h["train_loss"] for h in m.history[1:]]
        assert losses[-1] < losses[0]
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:3])

    def test_seed_determinism(self, tiny_ds, tmp_path):
        cfg = T.TrainConfig(variant="BL_AT", epochs=2, batch_size=8, seed=9)
        for name in ("a", "b"):
            T.save_model(T.train(cfg, "BL_AT", tiny_ds), tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_divergence(self, tiny_ds):
        with pytest.raises(TrainingDiverged) as e:
            T.train(T.TrainConfig(lr=1e4, epochs=3, batch_size=8), "BL", tiny_ds)
        assert e.value.last_good is not None
        assert all(np.all(np.isfinite(p)) for p in e.value.last_good.sheet.params.values())

    def test_history_and_best_snapshot(self, tiny_ds):
        m = T.train(T.TrainConfig(epochs=3, batch_size=8), "BL", tiny_ds)
        assert [h["epoch"] for h in m.history] == [0, 1, 2, 3]
        va = np.sort(np.flatnonzero(tiny_ds.split_mask("valid")))
        got = T.validation_mrr(m, tiny_ds.scores[va], tiny_ds.spectrograms[va])
        assert got == pytest.approx(max(h["valid_mrr"] for h in m.history))


@pytest.fixture(scope="module")
def trained():
    ds = sd.make_pair_dataset(8, 4, (60, 180), 84, seed=2, split_fractions=(5, 2, 1))
    return T.train(T.TrainConfig(variant="BL_AT", epochs=1, batch_size=8), "BL_AT", ds), ds


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path):
        m, ds = trained
        T.save_model(m, tmp_path / "m.cmp")
        back = T.load_model(tmp_path / "m.cmp")
        assert back.variant == m.variant and back.config == m.config
        assert back.norm == m.norm and len(back.history) == len(m.history)
        for h1, h2 in zip(back.history, m.history):
            assert h1.keys() == h2.keys()
            np.testing.assert_array_equal([h1[k] for k in h2], list(h2.values()))
        np.testing.assert_array_equal(back.embed_audio(ds.spectrograms[:4]),
                                      m.embed_audio(ds.spectrograms[:4]))
        np.testing.assert_array_equal(back.embed_sheet(ds.scores[:4]), m.embed_sheet(ds.scores[:4]))
        T.save_model(back, tmp_path / "m2.cmp")
        assert (tmp_path / "m.cmp").read_bytes() == (tmp_path / "m2.cmp").read_bytes()

    def test_truncated(self, trained, tmp_path):
        T.save_model(trained[0], tmp_path / "m.cmp")
        raw = (tmp_path / "m.cmp").read_bytes()
        (tmp_path / "m.cmp").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            T.load_model(tmp_path / "m.cmp")

    def test_missing_entry(self, trained, tmp_path):
        e = trained[0].to_entries()
        del e["cca/U_x"]
        nnet.save_params(tmp_path / "m.cmp", e)
        with pytest.raises(FormatError):
            T.load_model(tmp_path / "m.cmp")
