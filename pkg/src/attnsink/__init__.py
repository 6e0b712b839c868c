"""Attention-sink hallucination attack on a toy multi-modal language model.

Pure numpy: a small reverse-mode autodiff engine, a pre-norm transformer
over patch-projected image tokens plus text, decoding, sink analysis, the
attack itself, a synthetic grounded-caption corpus and hallucination
metrics. ``attnsink.cli`` drives the whole pipeline.
"""

__version__ = "0.1.0"

from .autodiff import Graph, GradientMap, Tensor, backward, grad_check
from .model import (ForwardTrace, ModelConfig, ModelParams, NumericalError, PromptAssembly,
                    VisualInput, assemble, encode_visual, forward, init_params,
                    next_token_distribution, train_toy_model)
from .decoding import DecodeConfig, DecodedResponse, beam_decode, decode, greedy_decode, nucleus_decode
from .analysis import (RelevanceProfile, SimilarityProfile, SinkReport, calibrate_sigma,
                       detect_sinks, global_context_embedding, relevance_profile,
                       select_potential_sink, similarity_distribution, similarity_profile)
from .attack import (AttackConfig, AttackTrace, attack_step, attention_loss, embedding_loss,
                     gaussian_baseline, run_attack, total_objective)
from .corpus import (AnnotatedResponse, Scene, VQAItem, generate_corpus, oracle_annotate,
                     render_scene)
from .metrics import (HallucinationReport, QualityScore, hallucination_metrics,
                      offline_quality_judge, perplexity, vqa_accuracy)
