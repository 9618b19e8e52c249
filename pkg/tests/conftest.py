"""Shared fixtures: small trained-ish checkpoints and corpora."""

import json

import pytest

from promptsum import model as M
from promptsum import pipeline as P
from promptsum.checkpoint import save_checkpoint
from promptsum.data import SynthProfile, save_corpus_jsonl, synth_corpus


def micro_settings(**overrides):
    base = dict(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=64,
                prompt_len=4, entity_chain_cap=12, max_src_positions=192,
                max_tgt_positions=48, pretrain_docs=12, pool_size=30, test_size=8,
                fewshot_n=8, pretrain_epochs=2, tune_epochs=2, max_summary_len=20,
                beam_width=2)
    base.update(overrides)
    return P.RunSettings(**base)


@pytest.fixture(scope="session")
def micro_profile():
    return SynthProfile(name="micro", source_entities=(3, 4),
                        extra_mentions=(0, 1), noise_rate=0.2)


@pytest.fixture(scope="session")
def micro_bundle(micro_profile):
    return P.make_corpus_bundle(micro_profile, micro_settings(), seed_base=500)


@pytest.fixture(scope="session")
def micro_checkpoint(micro_bundle):
    """A briefly pretrained micro model: fast to build, real vocabulary."""
    settings = micro_settings()
    _, runs = P.train_standard(micro_bundle, settings, seeds=[1])
    return runs[0].checkpoint


@pytest.fixture(scope="session")
def micro_checkpoint_path(micro_checkpoint, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "micro.ckpt"
    save_checkpoint(micro_checkpoint, path)
    return path


@pytest.fixture(scope="session")
def micro_corpus_path(micro_bundle, tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "test.jsonl"
    save_corpus_jsonl(micro_bundle.test, path)
    return path
