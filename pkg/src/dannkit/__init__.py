"""Domain-adversarial text classification with a label predictor and a
domain critic trained against a shared feature extractor."""

from .autodiff import (Adam, Node, ShapeError, backward, clip_params,
                       cross_entropy, batch_cross_entropy, grl, no_grad,
                       parameter, constant, wasserstein_loss, zero_grad)
from .data import (Batch, Corpus, Document, FieldMap, SamplingPlan, SynthSpec,
                   batch_iter, load_jsonl, make_splits, synth_generate,
                   tokenize, truncate_document)
from .diagnostics import (DiagnosticsReport, FeatureGroup, feature_report,
                          normalized_attention, normalize_products, pca_2d,
                          sep_metric)
from .embeddings import (EmbeddingTable, ProjectionMatrix, Vocabulary, embed,
                         embed_padded, hausdorff_directed,
                         hausdorff_undirected, load_embeddings,
                         load_projection, save_embeddings, save_projection)
from .extractors import (AvgExtractor, CnnExtractor, HanExtractor, IdfTable,
                         TfidfExtractor, attention_pool, fit_idf, gru_cell,
                         gru_sequence, max_norm_rescale)
from .trainer import (ConfigError, DannConfig, DannModel, ModelData,
                      TrainHistory, TrainingDiverged, build_model,
                      critic_step, derive_model_data, evaluate, joint_step,
                      load_checkpoint, multi_domain_critic_loss,
                      save_checkpoint, train)

__version__ = "0.1.0"
