"""Entity-chain-planned abstractive summarization with two soft prompts.

A desk-scale, dependency-light stack: a tape-based autodiff engine, a small
encoder-decoder transformer, deterministic entity tagging, gap-sentence
pretraining labels, prompt-only fine-tuning with a factored-moment optimizer,
beam-search decoding with chain interventions, and a full metric harness.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (Document, EntityChain, LabeledExample, SynthProfile, Tokenizer,
                   extract_entity_chain, fewshot_split, gsg_pseudo_summary,
                   synth_corpus, tag_entities, tokenize, detokenize)
from .decoding import GenConfig, GenerationResult, beam_search, diverse_beam_search, \
    generate_two_stage, sample_entity_chain
from .metrics import (MetricReport, RougeScore, abstractiveness, controllability_success,
                      correlation_report, diversity_report, entity_prf,
                      hallucination_pct, rouge_l_summary, rouge_n)
from .model import ModelConfig, build_model, compose_input, forward_loss, \
    init_soft_prompt, set_stage_trainability
from .tensor import ParamGroup, Tensor, backward, finite_diff_check, masked_update, \
    primitive_forward
from .training import Adafactor, LossReport, TrainConfig, pretrain, \
    tune_entity_prompt, tune_summary_prompt
