"""Cross-modal audio/sheet-music retrieval with soft attention over spectrogram frames."""

from .attention import (apply_attention, attention_entropy, attention_forward,
                        attention_pathway)
from .embed import (CcaState, RankingLossConfig, cca_closed_form, cca_layer_forward,
                    cosine_similarity, pairwise_ranking_loss)
from .retrieval import (EmbeddingIndex, MetricsReport, build_index, evaluate, median_rank,
                        mrr, query, recall_at_k)
from .synthdata import (NoteSequence, PairedDataset, generate_piece, load_dataset,
                        make_pair_dataset, render_audio_excerpt, render_score_snippet,
                        save_dataset)
from .train import (ModelVariant, TrainConfig, TrainedModel, load_model, save_model,
                    variant)

__version__ = "0.1.0"
