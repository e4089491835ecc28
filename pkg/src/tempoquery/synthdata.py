"""Synthetic paired score/audio data.

A piece is a list of ``(onset_beat, pitch)`` events. Both modalities render
from the same events:

* the score snippet lays noteheads out by onset ordinal, so it never sees
  tempo;
* the audio excerpt places a decaying harmonic stack at each onset's frame
  position for a given tempo, so onset density grows with tempo.

Score windows span a fixed number of beats and both renderings use exactly
the window's events, shifted so its first onset is beat 0. At slow tempi the
window outlasts ``t_frames`` and the excerpt is cut short; at fast tempi it
ends early and the remaining frames are silent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    EmptyWindowError,
    FormatError,
    InvalidArgument,
    ShapeInconsistencyError,
    TruncatedFileError,
    VersionError,
)

SNIPPET_SHAPE = (80, 100)
N_BINS = 92
FRAME_RATE = 21
VALID_FRAMES = (84, 168)
PITCH_LO, PITCH_HI = 21, 108
BIN_AT_PITCH_HI = 88
MAX_CHORD = 8

NOTEHEAD_RADIUS = 2
N_OVERTONES = 3
HALF_LIFE_FRAMES = 6
# envelope is cut after four half-lives (amplitude 1/16)
ENVELOPE_FRAMES = 4 * HALF_LIFE_FRAMES

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class GenerationParams:
    """Ranges used by :func:`generate_piece`."""

    pitch_lo: int = 48
    pitch_hi: int = 84
    max_step: int = 5
    # onset gaps in beats and their probabilities
    gaps: tuple = (Fraction(1, 2), Fraction(1), Fraction(3, 2))
    gap_probs: tuple = (0.45, 0.45, 0.10)
    chord_prob: float = 0.15
    max_chord: int = 3
    window_beats: int = 12


DEFAULT_PARAMS = GenerationParams()


@dataclass(frozen=True)
class NoteSequence:
    events: tuple  # ((Fraction onset_beat, int pitch), ...)

    def __post_init__(self):
        if not self.events:
            raise InvalidArgument("a note sequence needs at least one event")
        onsets = [e[0] for e in self.events]
        if any(b < a for a, b in zip(onsets, onsets[1:])):
            raise InvalidArgument("events must be sorted by onset")
        if onsets[0] < 0:
            raise InvalidArgument("onsets must be nonnegative")
        for _, p in self.events:
            if not PITCH_LO <= p <= PITCH_HI:
                raise InvalidArgument(f"pitch {p} outside piano range")
        counts = {}
        for o in onsets:
            counts[o] = counts.get(o, 0) + 1
        if max(counts.values()) > MAX_CHORD:
            raise InvalidArgument(f"more than {MAX_CHORD} simultaneous pitches")

    def __len__(self):
        return len(self.events)

    @property
    def onsets(self):
        return [e[0] for e in self.events]

    @property
    def pitches(self):
        return [e[1] for e in self.events]

    def window(self, start, stop):
        """Events with ``start <= onset < stop``, shifted so ``start`` is beat 0."""
        ev = tuple((o - start, p) for o, p in self.events if start <= o < stop)
        if not ev:
            raise EmptyWindowError(f"no events in beat window [{start}, {stop})")
        return NoteSequence(ev)

    @property
    def duration_beats(self):
        return self.events[-1][0]


@dataclass(frozen=True)
class ScoreSnippet:
    pixels: np.ndarray


@dataclass(frozen=True)
class AudioExcerpt:
    spectrogram: np.ndarray
    frame_rate: int = FRAME_RATE

    @property
    def n_frames(self):
        return self.spectrogram.shape[1]


def generate_piece(seed, n_events, params=DEFAULT_PARAMS):
    """Random-walk melody with occasional chords; first onset at beat 0.

    ``n_events`` counts (onset, pitch) events, so chord tones use up the
    budget too.
    """
    if n_events < 1:
        raise InvalidArgument(f"n_events must be >= 1, got {n_events}")
    rng = np.random.default_rng(seed)
    lo, hi = params.pitch_lo, params.pitch_hi
    pitch = int(rng.integers(lo, hi + 1))
    beat = Fraction(0)
    events = []
    probs = np.asarray(params.gap_probs, dtype=float)
    probs = probs / probs.sum()
    while len(events) < n_events:
        if events:
            beat += params.gaps[int(rng.choice(len(params.gaps), p=probs))]
            pitch += int(rng.integers(-params.max_step, params.max_step + 1))
            if pitch < lo or pitch > hi:
                pitch = int(np.clip(2 * np.clip(pitch, lo, hi) - pitch, lo, hi))
        chord = {pitch}
        if params.max_chord > 1 and rng.random() < params.chord_prob:
            extra = int(rng.integers(1, params.max_chord))
            for iv in sorted(rng.choice([3, 4, 5, 7, 8, 9, 12], size=extra, replace=False)):
                if pitch - iv >= PITCH_LO:
                    chord.add(pitch - int(iv))
        events.extend((beat, p) for p in sorted(chord))
    return NoteSequence(tuple(events[:n_events]))


# --------------------------------------------------------------------------
# score rendering


def pitch_to_row(pitch):
    """Affine pitch -> image row: 108 at the top band, 21 at the bottom."""
    r = NOTEHEAD_RADIUS
    span = SNIPPET_SHAPE[0] - 1 - 2 * r
    return r + (PITCH_HI - np.asarray(pitch, dtype=float)) * span / (PITCH_HI - PITCH_LO)


def _disc(r):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2 <= r * r + r).astype(np.float32)


_DISC = _disc(NOTEHEAD_RADIUS)


def render_score_snippet(notes, window):
    """Draw the events with ``window[0] <= onset < window[1]`` as filled discs.

    Columns are evenly spaced by onset ordinal (chord tones share a column);
    rows are affine in pitch. Tempo is not an input.
    """
    start, stop = window
    ev = [(o, p) for o, p in notes.events if start <= o < stop]
    if not ev:
        raise EmptyWindowError(f"no events in beat window [{start}, {stop})")
    h, w = SNIPPET_SHAPE
    img = np.zeros(SNIPPET_SHAPE, dtype=np.float32)
    distinct = sorted({o for o, _ in ev})
    ordinal = {o: i for i, o in enumerate(distinct)}
    r = NOTEHEAD_RADIUS
    for o, p in ev:
        cx = int(round((ordinal[o] + 0.5) * w / len(distinct)))
        cy = int(round(float(pitch_to_row(p))))
        cx = min(max(cx, r), w - 1 - r)
        np.maximum(img[cy - r:cy + r + 1, cx - r:cx + r + 1], _DISC,
                   out=img[cy - r:cy + r + 1, cx - r:cx + r + 1])
    return ScoreSnippet(img)


# --------------------------------------------------------------------------
# audio rendering


def pitch_to_bin(pitch):
    """Affine log-frequency map: pitch 21 -> bin 0, pitch 108 -> bin 88.

    Fractional pitches are allowed so overtones can be mapped too.
    """
    return (np.asarray(pitch, dtype=float) - PITCH_LO) * BIN_AT_PITCH_HI / (PITCH_HI - PITCH_LO)


def harmonic_bins(pitch, n_bins=N_BINS):
    """Bins of the fundamental and first three overtones, clipped to range."""
    k = np.arange(1, N_OVERTONES + 2)
    bins = np.rint(pitch_to_bin(pitch + 12 * np.log2(k))).astype(int)
    return np.clip(bins, 0, n_bins - 1)


def harmonic_amplitudes():
    return 1.0 / np.arange(1, N_OVERTONES + 2)


def envelope():
    return 0.5 ** (np.arange(ENVELOPE_FRAMES) / HALF_LIFE_FRAMES)


def onset_frame(onset_beat, tempo, frame_rate=FRAME_RATE):
    return int(round(float(onset_beat) * 60.0 / tempo * frame_rate))


def render_audio_excerpt(notes, tempo, t_frames, n_bins=N_BINS, frame_rate=FRAME_RATE):
    """Spectrogram (n_bins x t_frames) of ``notes`` played at ``tempo`` bpm."""
    if not tempo > 0:
        raise InvalidArgument(f"tempo must be positive, got {tempo}")
    if t_frames not in VALID_FRAMES:
        raise InvalidArgument(f"t_frames must be one of {VALID_FRAMES}, got {t_frames}")
    spec = np.zeros((n_bins, t_frames), dtype=np.float64)
    env = envelope()
    amps = harmonic_amplitudes()
    for o, p in notes.events:
        f0 = onset_frame(o, tempo, frame_rate)
        if f0 >= t_frames:
            break
        seg = env[:t_frames - f0]
        for b, a in zip(harmonic_bins(p, n_bins), amps):
            spec[b, f0:f0 + len(seg)] += a * seg
    return AudioExcerpt(spec.astype(np.float32), frame_rate)


def count_onsets(notes, tempo, t_frames, frame_rate=FRAME_RATE):
    """Number of distinct onset frames that land inside the excerpt."""
    frames = {onset_frame(o, tempo, frame_rate) for o in notes.onsets}
    return sum(1 for f in frames if f < t_frames)


# --------------------------------------------------------------------------
# datasets


@dataclass
class PairedDataset:
    """Aligned (score snippet, audio excerpt) pairs held as stacked arrays."""

    scores: np.ndarray        # (n, 80, 100) float32
    spectrograms: np.ndarray  # (n, F, T) float32
    tempos: np.ndarray        # (n,) float32
    piece_ids: np.ndarray     # (n,) uint32
    window_index: np.ndarray  # (n,) uint32
    splits: dict = field(default_factory=dict)  # piece_id -> split name
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        n = len(self.tempos)
        if not (len(self.scores) == len(self.spectrograms) == len(self.piece_ids)
                == len(self.window_index) == n):
            raise ShapeInconsistencyError("pair arrays have different lengths")
        if self.scores.shape[1:] != SNIPPET_SHAPE:
            raise ShapeInconsistencyError(f"score snippets must be {SNIPPET_SHAPE}")

    def __len__(self):
        return len(self.tempos)

    @property
    def n_bins(self):
        return self.spectrograms.shape[1]

    @property
    def n_frames(self):
        return self.spectrograms.shape[2]

    def split_of(self, i):
        return self.splits.get(int(self.piece_ids[i]), "train")

    def split_mask(self, split):
        return np.array([self.splits.get(int(p), "train") == split for p in self.piece_ids],
                        dtype=bool)

    def subset(self, which):
        """Pairs of one split (by name) or selected by an index array/mask."""
        idx = self.split_mask(which) if isinstance(which, str) else np.asarray(which)
        pieces = {int(p) for p in self.piece_ids[idx]}
        return PairedDataset(
            self.scores[idx], self.spectrograms[idx], self.tempos[idx],
            self.piece_ids[idx], self.window_index[idx],
            {p: s for p, s in self.splits.items() if p in pieces}, self.frame_rate)

    def pair(self, i):
        return (ScoreSnippet(self.scores[i]), AudioExcerpt(self.spectrograms[i], self.frame_rate),
                float(self.tempos[i]), int(self.piece_ids[i]), int(self.window_index[i]))

    def equals(self, other):
        return (self.frame_rate == other.frame_rate and self.splits == other.splits
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("scores", "spectrograms", "tempos", "piece_ids", "window_index")))


def _split_counts(n_pieces, fractions):
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    counts = np.floor(fr * n_pieces + 1e-9).astype(int)
    # leftovers go to the splits with the largest remainders, train first
    rem = fr * n_pieces - counts
    for i in np.argsort(-rem, kind="stable")[:n_pieces - counts.sum()]:
        counts[i] += 1
    return counts


def make_pair_dataset(n_pieces, windows_per_piece, tempo_range=(60.0, 180.0), t_frames=84,
                      seed=0, split_fractions=(0.6, 0.2, 0.2), params=DEFAULT_PARAMS):
    """Render ``n_pieces * windows_per_piece`` aligned pairs.

    Windows are consecutive, non-overlapping spans of ``params.window_beats``
    beats; each pair draws its own tempo uniformly from ``tempo_range``.
    Pieces (never individual pairs) are assigned to train/valid/test.
    The random stream does not depend on ``t_frames``, so the same seed
    yields the same pieces, windows and tempi at either context length.
    """
    lo, hi = (float(v) for v in tempo_range)
    if not (lo > 0 and lo <= hi):
        raise InvalidArgument(f"invalid tempo range {tempo_range}")
    if n_pieces < 1 or windows_per_piece < 1:
        raise InvalidArgument("need at least one piece and one window per piece")
    if t_frames not in VALID_FRAMES:
        raise InvalidArgument(f"t_frames must be one of {VALID_FRAMES}, got {t_frames}")
    rng = np.random.default_rng(seed)
    wb = params.window_beats
    # enough events to fill every window (plus one spare window for the last start)
    min_gap = float(min(params.gaps))
    n_events = params.max_chord * (int(np.ceil((windows_per_piece + 1) * wb / min_gap)) + 1)

    order = rng.permutation(n_pieces)
    counts = _split_counts(n_pieces, split_fractions)
    splits = {}
    for name, chunk in zip(SPLITS, np.split(order, np.cumsum(counts)[:-1])):
        for p in chunk:
            splits[int(p)] = name

    n = n_pieces * windows_per_piece
    scores = np.zeros((n, *SNIPPET_SHAPE), dtype=np.float32)
    specs = np.zeros((n, N_BINS, t_frames), dtype=np.float32)
    tempos = np.zeros(n, dtype=np.float32)
    pids = np.zeros(n, dtype=np.uint32)
    widx = np.zeros(n, dtype=np.uint32)
    k = 0
    for p in range(n_pieces):
        piece_seed = int(rng.integers(2 ** 31))
        piece = generate_piece(piece_seed, n_events, params)
        starts = _window_starts(piece, windows_per_piece, wb)
        for w, start in enumerate(starts):
            tempo = np.float32(rng.uniform(lo, hi)) if hi > lo else np.float32(lo)
            scores[k] = render_score_snippet(piece, (start, start + wb)).pixels
            specs[k] = render_audio_excerpt(piece.window(start, start + wb), float(tempo),
                                            t_frames).spectrogram
            tempos[k] = tempo
            pids[k] = p
            widx[k] = w
            k += 1
    return PairedDataset(scores, specs, tempos, pids, widx, splits)


def _window_starts(piece, n_windows, window_beats):
    """Start beat of each window: the first onset at or after ``i * window_beats``."""
    onsets = piece.onsets
    starts = []
    for i in range(n_windows):
        b = i * window_beats
        first = next((o for o in onsets if o >= b), None)
        if first is None or first >= b + window_beats:
            raise InvalidArgument(f"piece too short or has an empty window at beat {b}")
        starts.append(first)
    return starts


# --------------------------------------------------------------------------
# CMA1 files

DATASET_MAGIC = b"CMA1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4I")
_PAIR_HEAD = struct.Struct("<IIf")


def manifest_path(path):
    return Path(str(path) + ".manifest")


def save_dataset(ds, path):
    """Write the CMA1 dataset file plus its ``piece_id,split`` manifest."""
    path = Path(path)
    f_bins, t = ds.n_bins, ds.n_frames
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(DATASET_VERSION, f_bins, t, len(ds)))
        for i in range(len(ds)):
            fh.write(_PAIR_HEAD.pack(int(ds.piece_ids[i]), int(ds.window_index[i]),
                                     float(ds.tempos[i])))
            fh.write(np.ascontiguousarray(ds.scores[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.spectrograms[i], dtype="<f4").tobytes())
    lines = [f"{p},{s}" for p, s in sorted(ds.splits.items())]
    manifest_path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a CMA1 dataset")
    if len(buf) < 4 + _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    version, f_bins, t, n = _HEADER.unpack_from(buf, 4)
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    if f_bins == 0 or t not in VALID_FRAMES:
        raise ShapeInconsistencyError(f"{path}: invalid spectrogram shape {f_bins}x{t}")
    n_px = SNIPPET_SHAPE[0] * SNIPPET_SHAPE[1]
    rec = _PAIR_HEAD.size + 4 * (n_px + f_bins * t)
    body = len(buf) - 4 - _HEADER.size
    if body < rec * n:
        raise TruncatedFileError(
            f"{path}: header declares {n} pairs, file holds {body // rec}")
    if body > rec * n:
        raise ShapeInconsistencyError(f"{path}: {body - rec * n} trailing bytes after {n} pairs")
    dt = np.dtype([("piece", "<u4"), ("window", "<u4"), ("tempo", "<f4"),
                   ("score", "<f4", SNIPPET_SHAPE), ("spec", "<f4", (f_bins, t))])
    assert dt.itemsize == rec
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=4 + _HEADER.size)
    splits = _read_manifest(path)
    ds = PairedDataset(arr["score"].astype(np.float32), arr["spec"].astype(np.float32),
                       arr["tempo"].astype(np.float32), arr["piece"].astype(np.uint32),
                       arr["window"].astype(np.uint32), splits)
    missing = {int(p) for p in ds.piece_ids} - set(splits)
    if splits and missing:
        raise FormatError(f"{path}: manifest lacks pieces {sorted(missing)[:5]}")
    return ds


def _read_manifest(path):
    mp = manifest_path(path)
    if not mp.exists():
        return {}
    splits = {}
    for ln, line in enumerate(mp.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            pid, split = line.split(",")
            pid = int(pid)
        except ValueError:
            raise FormatError(f"{mp}:{ln}: expected 'piece_id,split', got {line!r}") from None
        if split not in SPLITS:
            raise FormatError(f"{mp}:{ln}: unknown split {split!r}")
        splits[pid] = split
    return splits
