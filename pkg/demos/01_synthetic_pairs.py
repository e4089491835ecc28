"""
Synthetic score/audio pairs
===========================

Both modalities are rendered from one symbolic note sequence. The score
snippet ignores tempo entirely; the audio excerpt does not.
"""

import numpy as np

from tempoquery import synthdata as sd

# a random-walk melody with a few chords, first onset at beat 0
piece = sd.generate_piece(seed=7, n_events=120)
print(len(piece), "events, first few:", piece.events[:4])

# the first window as a score image (80 x 100, one disc per notehead)
snippet = sd.render_score_snippet(piece, (0, 8)).pixels
print("score snippet", snippet.shape, "ink pixels:", int((snippet > 0).sum()))

# the same music as an 84-frame spectrogram at two tempi
for tempo in (70, 170):
    spec = sd.render_audio_excerpt(piece, tempo, 84).spectrogram
    print(f"{tempo:3d} bpm: {sd.count_onsets(piece, tempo, 84):2d} onset frames in 4 s, "
          f"energy {spec.sum():7.1f}")

# a small dataset; tempo is drawn per pair, splits are by piece
ds = sd.make_pair_dataset(n_pieces=10, windows_per_piece=5, tempo_range=(60, 180),
                          t_frames=84, seed=0)
print(len(ds), "pairs; tempi from", ds.tempos.min().round(1), "to", ds.tempos.max().round(1))
print({s: int(ds.split_mask(s).sum()) for s in sd.SPLITS})

# the on-disk format round-trips exactly
sd.save_dataset(ds, "/tmp/demo_pairs.cma")
assert sd.load_dataset("/tmp/demo_pairs.cma").equals(ds)
np.set_printoptions(precision=3)
