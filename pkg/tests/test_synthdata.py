from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempoquery import synthdata as sd
from tempoquery.errors import (BadMagicError, EmptyWindowError, InvalidArgument,
                               ShapeInconsistencyError, TruncatedFileError, VersionError)


def seq(*events):
    return sd.NoteSequence(tuple((Fraction(o), p) for o, p in events))


class TestGeneratePiece:
    def test_deterministic(self):
        assert sd.generate_piece(7, 20) == sd.generate_piece(7, 20)

    def test_seed_matters(self):
        assert sd.generate_piece(7, 20) != sd.generate_piece(8, 20)

    def test_single_event_at_zero(self):
        p = sd.generate_piece(0, 1)
        assert len(p) == 1 and p.onsets[0] == 0

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgument):
            sd.generate_piece(0, 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 200))
    def test_invariants(self, seed, n):
        p = sd.generate_piece(seed, n)
        assert len(p) == n
        assert p.onsets == sorted(p.onsets)
        assert p.onsets[0] == 0
        assert all(21 <= q <= 108 for q in p.pitches)


class TestNoteSequence:
    def test_unsorted_rejected(self):
        with pytest.raises(InvalidArgument):
            seq((1, 60), (0, 60))

    def test_range_checked(self):
        with pytest.raises(InvalidArgument):
            seq((0, 20))

    def test_chord_limit(self):
        with pytest.raises(InvalidArgument):
            seq(*[(0, 40 + i) for i in range(9)])

    def test_window_shifts_and_clips(self):
        s = seq((0, 60), (1, 62), (Fraction(5, 2), 64), (4, 65))
        assert s.window(1, 4) == seq((0, 62), (Fraction(3, 2), 64))

    def test_empty_window(self):
        with pytest.raises(EmptyWindowError):
            seq((0, 60), (4, 62)).window(1, 4)


class TestScore:
    def test_single_note_at_pitch_60(self):
        img = sd.render_score_snippet(seq((0, 60)), (0, 8)).pixels
        assert img.shape == (80, 100)
        rows, cols = np.nonzero(img)
        assert rows.min() == 41 and rows.max() == 45
        assert cols.min() == 48 and cols.max() == 52
        # affine map: 108 -> 2, 21 -> 77, so 60 lands at 2 + 48 * 75 / 87
        assert int(round(2 + 48 * 75 / 87)) == 43
        assert 30 < 43 < 50

    def test_extreme_pitches_hit_top_and_bottom(self):
        img = sd.render_score_snippet(seq((0, 21), (1, 108)), (0, 8)).pixels
        rows = np.nonzero(img)[0]
        assert rows.min() == 0 and rows.max() == 79

    def test_values_and_background(self):
        img = sd.render_score_snippet(sd.generate_piece(3, 30), (0, 8)).pixels
        assert set(np.unique(img)) <= {0.0, 1.0}
        assert img.any() and (img == 0).any()

    def test_empty_window(self):
        with pytest.raises(EmptyWindowError):
            sd.render_score_snippet(seq((0, 60)), (1, 9))

    def test_ordinal_spacing(self):
        a = sd.render_score_snippet(seq((0, 60), (1, 60)), (0, 8)).pixels
        b = sd.render_score_snippet(seq((0, 60), (Fraction(1, 2), 60)), (0, 8)).pixels
        np.testing.assert_array_equal(a, b)


class TestAudio:
    def test_pitch_69_harmonics(self):
        spec = sd.render_audio_excerpt(seq((0, 69)), 120, 84).spectrogram
        assert spec.shape == (92, 84)
        # oracle: (p - 21) * 88 / 87 for p = 69, 81, 69 + 12 log2 3, 93
        expected = [round((p - 21) * 88 / 87) for p in (69, 81, 69 + 12 * np.log2(3), 93)]
        assert expected == [49, 61, 68, 73]
        np.testing.assert_array_equal(np.flatnonzero(spec[:, 0]), expected)
        np.testing.assert_allclose(spec[expected, 0], [1, 1 / 2, 1 / 3, 1 / 4], rtol=1e-6)
        np.testing.assert_allclose(spec[49, 6], 0.5, rtol=1e-6)
        assert not spec[:, 24:].any()

    def test_empty_tail(self):
        notes = seq((0, 60), (1, 64))
        # at 120 bpm beat 1 starts at frame 10.5 -> 10 (banker's) or 11; envelope lasts 24 frames
        spec = sd.render_audio_excerpt(notes, 120, 84).spectrogram
        assert not spec[:, 40:].any()
        assert spec[:, :40].any()

    def test_nonnegative_finite(self):
        spec = sd.render_audio_excerpt(sd.generate_piece(1, 200), 150, 168).spectrogram
        assert np.all(np.isfinite(spec)) and spec.min() >= 0

    def test_faster_tempo_has_more_onsets(self):
        p = sd.generate_piece(5, 120)
        assert sd.count_onsets(p, 120, 84) >= sd.count_onsets(p, 60, 84)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1000), st.floats(30, 200), st.floats(1.0, 2.0))
    def test_onset_count_monotone_in_tempo(self, seed, tempo, factor):
        p = sd.generate_piece(seed, 60)
        for t in (84, 168):
            assert sd.count_onsets(p, tempo * factor, t) >= sd.count_onsets(p, tempo, t)

    def test_doubling_tempo_halves_spacing(self):
        assert sd.onset_frame(4, 60) == 84
        assert sd.onset_frame(4, 120) == 42

    @pytest.mark.parametrize("tempo", [0, -10])
    def test_bad_tempo(self, tempo):
        with pytest.raises(InvalidArgument):
            sd.render_audio_excerpt(seq((0, 60)), tempo, 84)

    def test_bad_frames(self):
        with pytest.raises(InvalidArgument):
            sd.render_audio_excerpt(seq((0, 60)), 100, 100)


class TestDataset:
    def test_count(self):
        ds = sd.make_pair_dataset(10, 5, (60, 180), 84, seed=1)
        assert len(ds) == 50

    def test_degenerate_range(self):
        ds = sd.make_pair_dataset(3, 2, (100, 100), 84, seed=1)
        assert np.all(ds.tempos == 100)

    @pytest.mark.parametrize("rng_", [(0, 100), (120, 100), (-5, 10)])
    def test_invalid_range(self, rng_):
        with pytest.raises(InvalidArgument):
            sd.make_pair_dataset(2, 2, rng_, 84)

    def test_splits_by_piece(self, small_ds84):
        ds = small_ds84
        for s in sd.SPLITS:
            assert ds.split_mask(s).any()
        for p in np.unique(ds.piece_ids):
            assert len({ds.split_of(i) for i in np.flatnonzero(ds.piece_ids == p)}) == 1

    def test_pairs_render_from_same_window(self, small_ds84):
        ds = small_ds84
        assert np.all(ds.tempos >= 60) and np.all(ds.tempos <= 180)
        # every excerpt starts with content at frame 0
        assert np.all(ds.spectrograms[:, :, 0].max(axis=1) > 0)

    def test_audio_stops_with_the_window(self):
        # the last onset lies before the window end; its envelope lasts 24 frames
        ds = sd.make_pair_dataset(6, 4, (60, 180), 168, seed=4)
        wb = sd.DEFAULT_PARAMS.window_beats
        for spec, tempo in zip(ds.spectrograms, ds.tempos):
            last = int(np.ceil(wb * 60 / float(tempo) * sd.FRAME_RATE)) + sd.ENVELOPE_FRAMES
            assert not spec[:, last:].any()
            assert spec[:, :last].any()

    def test_context_length_shares_stream(self):
        a = sd.make_pair_dataset(4, 3, (60, 180), 84, seed=9)
        b = sd.make_pair_dataset(4, 3, (60, 180), 168, seed=9)
        np.testing.assert_array_equal(a.scores, b.scores)
        np.testing.assert_array_equal(a.tempos, b.tempos)
        np.testing.assert_array_equal(a.spectrograms, b.spectrograms[:, :, :84])

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            sd.save_dataset(sd.make_pair_dataset(4, 3, seed=3), tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert sd.manifest_path(tmp_path / "a").read_text() == \
            sd.manifest_path(tmp_path / "b").read_text()

    def test_round_trip(self, tmp_path, small_ds84):
        path = tmp_path / "d.cma"
        sd.save_dataset(small_ds84, path)
        assert sd.load_dataset(path).equals(small_ds84)


class TestFormatErrors:
    @pytest.fixture
    def saved(self, tmp_path):
        path = tmp_path / "d.cma"
        sd.save_dataset(sd.make_pair_dataset(2, 5, seed=0), path)
        return path

    def test_bad_magic(self, saved):
        raw = bytearray(saved.read_bytes())
        raw[:8] = bytes(8)
        saved.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            sd.load_dataset(saved)

    def test_missing_pair(self, saved):
        raw = saved.read_bytes()
        rec = 12 + 4 * (8000 + 92 * 84)
        assert len(raw) == 20 + 10 * rec
        saved.write_bytes(raw[:-rec])
        with pytest.raises(TruncatedFileError):
            sd.load_dataset(saved)

    def test_trailing_bytes(self, saved):
        saved.write_bytes(saved.read_bytes() + b"\0\0\0\0")
        with pytest.raises(ShapeInconsistencyError):
            sd.load_dataset(saved)

    def test_version(self, saved):
        raw = bytearray(saved.read_bytes())
        raw[4] = 9
        saved.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            sd.load_dataset(saved)

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, TruncatedFileError, ShapeInconsistencyError}
        assert len(kinds) == 3
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
