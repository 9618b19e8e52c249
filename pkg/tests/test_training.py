"""Optimizer behavior, stage freezing, loss additivity, determinism."""

import numpy as np
import pytest

from promptsum import model as M
from promptsum import tensor as T
from promptsum import training as TR
from promptsum.checkpoint import new_checkpoint
from promptsum.data import SynthProfile, Tokenizer, detokenize, fewshot_split, synth_corpus
from promptsum.errors import ConfigError, ContractError, DataError, DomainError


def small_profile():
    return SynthProfile(name="small", source_entities=(3, 4),
                        extra_mentions=(0, 1), noise_rate=0.2)


def tiny_checkpoint(pool, d_model=32, prompt_len=4, seed=11):
    texts = [ex.source.text for ex in pool] + [detokenize(ex.summary) for ex in pool]
    tok = Tokenizer.build(texts)
    cfg = M.ModelConfig(vocab_size=len(tok), d_model=d_model, n_heads=2,
                        n_enc_layers=1, n_dec_layers=1, d_ff=64,
                        max_src_positions=160, max_tgt_positions=48,
                        prompt_len=prompt_len, entity_chain_cap=12).validate()
    params = M.build_model(cfg, seed=seed)
    return new_checkpoint(cfg, tok.vocab, params, stage="init", seed=seed)


class TestAdafactor:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        pg = T.ParamGroup()
        pg.add("w", T.Tensor(np.ones((3, 4))))
        pg["w"].grad = np.zeros((3, 4))
        before = pg.checksum()
        TR.Adafactor(lr=0.1).step(pg)
        assert pg.checksum() == before

    def test_descent_direction_scalar(self):
        pg = T.ParamGroup()
        pg.add("x", T.Tensor(np.array([1.0])))
        opt = TR.Adafactor(lr=0.01, relative_step=False)
        for _ in range(40):
            pg["x"].grad = np.array([2.0])  # constant positive gradient
            opt.step(pg)
        assert pg["x"].values[0] < 1.0

    def test_quadratic_convergence(self):
        # Convex quadratic in 5 dims: loss after 500 steps < 1e-3 of initial.
        rng = np.random.default_rng(0)
        target = rng.normal(size=5)
        pg = T.ParamGroup()
        pg.add("x", T.Tensor(np.zeros(5)))
        opt = TR.Adafactor(lr=0.05)

        def loss_and_grad():
            diff = pg["x"].values - target
            return float((diff * diff).sum()), 2.0 * diff

        initial, _ = loss_and_grad()
        for _ in range(500):
            _, grad = loss_and_grad()
            pg["x"].grad = grad
            opt.step(pg)
            pg["x"].grad = None
        final, _ = loss_and_grad()
        assert final < 1e-3 * initial

    def test_frozen_entries_have_no_state(self):
        pg = T.ParamGroup()
        pg.add("train", T.Tensor(np.ones((2, 2))), trainable=True)
        pg.add("frozen", T.Tensor(np.ones((2, 2))), trainable=False)
        pg["train"].grad = np.ones((2, 2))
        pg["frozen"].grad = np.ones((2, 2))
        opt = TR.Adafactor(lr=0.01)
        frozen_before = pg.checksum(["frozen"])
        opt.step(pg)
        assert "frozen" not in opt.state
        assert pg.checksum(["frozen"]) == frozen_before

    def test_nan_gradient_aborts_with_name(self):
        pg = T.ParamGroup()
        pg.add("bad", T.Tensor(np.ones(3)))
        pg["bad"].grad = np.array([1.0, np.nan, 0.0])
        with pytest.raises(DomainError, match="bad"):
            TR.Adafactor(lr=0.01).step(pg)

    def test_accumulators_strictly_positive_after_first_step(self):
        pg = T.ParamGroup()
        pg.add("w", T.Tensor(np.ones((3, 4))))
        pg.add("v", T.Tensor(np.ones(4)))
        pg["w"].grad = np.zeros((3, 4))
        pg["v"].grad = np.zeros(4)
        opt = TR.Adafactor(lr=0.01)
        opt.step(pg)
        assert np.all(opt.state["w"]["row"] > 0) and np.all(opt.state["w"]["col"] > 0)
        assert np.all(opt.state["v"]["acc"] > 0)

    def test_factored_state_shapes(self):
        pg = T.ParamGroup()
        pg.add("w", T.Tensor(np.ones((3, 7))))
        pg["w"].grad = np.ones((3, 7))
        opt = TR.Adafactor(lr=0.01)
        opt.step(pg)
        assert opt.state["w"]["row"].shape == (3,)
        assert opt.state["w"]["col"].shape == (7,)

    def test_invalid_lr(self):
        with pytest.raises(ConfigError):
            TR.Adafactor(lr=0.0)


class TestPretrain:
    def setup_method(self):
        self.pool = synth_corpus(5, 24, small_profile())
        self.ckpt = tiny_checkpoint(self.pool)
        self.docs = [ex.source for ex in self.pool[:8]]

    def test_loss_additivity_every_report(self):
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=2, lr=0.01, seed=0)
        _, reports = TR.pretrain(self.docs, self.ckpt, cfg)
        assert reports
        for rep in reports:
            assert abs(rep.loss_total - (rep.loss_entity + rep.loss_summary)) < 1e-9

    def test_single_doc_single_step_additivity(self):
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=1, lr=0.01, seed=0,
                             effective_batch=2)
        _, reports = TR.pretrain(self.docs[:1], self.ckpt, cfg)
        rep = reports[0]
        assert rep.loss_entity > 0 and rep.loss_summary > 0
        assert rep.loss_total == rep.loss_entity + rep.loss_summary

    def test_everything_trains(self):
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=1, lr=0.02, seed=0)
        out, _ = TR.pretrain(self.docs, self.ckpt, cfg)
        # every parameter moved (embedding, backbone, and both prompts)
        for name in ("embed.tok", "enc.0.attn.wq", "prompt.entity", "prompt.summary"):
            assert not np.array_equal(out.params[name].values, self.ckpt.params[name].values)

    def test_deterministic_checkpoint_bytes(self, tmp_path):
        from promptsum.checkpoint import save_checkpoint
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=2, lr=0.01, seed=3)
        a, ra = TR.pretrain(self.docs, self.ckpt, cfg)
        b, rb = TR.pretrain(self.docs, self.ckpt, cfg)
        save_checkpoint(a, tmp_path / "a.ckpt")
        save_checkpoint(b, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]

    def test_no_usable_docs_rejected(self):
        from promptsum.data import Document
        with pytest.raises(DataError):
            TR.pretrain([Document(id="x", text="one sentence .")], self.ckpt,
                        TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=1, lr=0.01))

    def test_eval_every_step_reports(self):
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=1, lr=0.01, seed=0,
                             eval_every=1, effective_batch=4)
        _, reports = TR.pretrain(self.docs, self.ckpt, cfg)
        assert len(reports) >= 2
        for rep in reports:
            assert abs(rep.loss_total - (rep.loss_entity + rep.loss_summary)) < 1e-9


class TestTuneStages:
    def setup_method(self):
        self.pool = synth_corpus(6, 30, small_profile())
        base = tiny_checkpoint(self.pool)
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=2, lr=0.02, seed=0)
        self.pretrained, _ = TR.pretrain([ex.source for ex in self.pool[:10]], base, cfg)
        self.train = self.pool[10:20]
        self.val = self.pool[20:26]

    def test_tune_entity_freezes_backbone_and_summary_prompt(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_ENTITY, epochs=3, lr=0.05, seed=1)
        out, _ = TR.tune_entity_prompt(self.train, self.val, self.pretrained, cfg)
        assert out.backbone_checksum() == self.pretrained.backbone_checksum()
        assert out.prompt_checksum(M.TASK_SUMMARY) == self.pretrained.prompt_checksum(M.TASK_SUMMARY)
        assert out.prompt_checksum(M.TASK_ENTITY) != self.pretrained.prompt_checksum(M.TASK_ENTITY)

    def test_tune_summary_freezes_backbone_and_entity_prompt(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_SUMMARY, epochs=3, lr=0.05, seed=1)
        out, _ = TR.tune_summary_prompt(self.train, self.val, self.pretrained, cfg)
        assert out.backbone_checksum() == self.pretrained.backbone_checksum()
        assert out.prompt_checksum(M.TASK_ENTITY) == self.pretrained.prompt_checksum(M.TASK_ENTITY)
        assert out.prompt_checksum(M.TASK_SUMMARY) != self.pretrained.prompt_checksum(M.TASK_SUMMARY)

    def test_best_validation_prompt_retained(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_ENTITY, epochs=4, lr=0.05, seed=1)
        out, _ = TR.tune_entity_prompt(self.train, self.val, self.pretrained, cfg)
        val_items = [TR._entity_item(ex) for ex in self.val]
        final_val = TR.mean_loss(out, val_items)
        initial_val = TR.mean_loss(self.pretrained, val_items)
        assert final_val <= initial_val + 1e-12

    def test_trainable_count_is_prompt_size(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_ENTITY, epochs=1, lr=0.05, seed=1)
        out, _ = TR.tune_entity_prompt(self.train, self.val, self.pretrained, cfg)
        assert out.params.num_params(out.params.trainable_names()) == \
            out.config.prompt_len * out.config.d_model

    def test_teacher_forcing_default_uses_ground_truth(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_SUMMARY, epochs=1, lr=0.05, seed=1)
        out, reports = TR.tune_summary_prompt(self.train, self.val, self.pretrained, cfg)
        assert reports

    def test_inferred_chains_required_when_not_teacher_forcing(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_SUMMARY, epochs=1, lr=0.05, seed=1,
                             teacher_force_chain=False)
        with pytest.raises(ContractError):
            TR.tune_summary_prompt(self.train, self.val, self.pretrained, cfg)

    def test_inferred_chains_accepted(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_SUMMARY, epochs=1, lr=0.05, seed=1,
                             teacher_force_chain=False)
        chains = [ex.entity_chain for ex in self.train]
        out, _ = TR.tune_summary_prompt(self.train, self.val, self.pretrained, cfg,
                                        inferred_chains=chains)
        assert out.backbone_checksum() == self.pretrained.backbone_checksum()

    def test_empty_dataset_rejected(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_ENTITY, epochs=1, lr=0.05)
        with pytest.raises(DataError):
            TR.tune_entity_prompt([], self.val, self.pretrained, cfg)

    def test_overfit_small_summary_set(self):
        # Capacity sanity: with everything trainable the model memorizes 4 pairs.
        ck = self.pretrained.clone()
        M.set_stage_trainability(ck.params, M.STAGE_PRETRAIN)
        tok = ck.tokenizer()
        items = [TR._summary_item(ex, ex.entity_chain) for ex in self.pool[:4]]
        opt = TR.Adafactor(lr=1e-3, relative_step=False)
        for _ in range(400):
            ck.params.zero_grad()
            for item in items:
                T.backward(TR._item_loss(ck.params, ck.config, tok, item))
            opt.step(ck.params, grad_scale=0.25)
        final = TR.mean_loss(ck, items)
        assert final < 0.05

    def test_provenance_chain(self):
        cfg = TR.TrainConfig(stage=M.STAGE_TUNE_ENTITY, epochs=1, lr=0.05, seed=1)
        out, _ = TR.tune_entity_prompt(self.train, self.val, self.pretrained, cfg)
        assert out.provenance["stage"] == M.STAGE_TUNE_ENTITY
        assert out.provenance["parent_checksum"] == self.pretrained.params_checksum()


class TestTrainConfig:
    def test_round_trip(self):
        cfg = TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=3, lr=0.5)
        assert TR.TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            TR.TrainConfig(stage="mystery").validate()
        with pytest.raises(ConfigError):
            TR.TrainConfig(stage=M.STAGE_PRETRAIN, epochs=0).validate()
        with pytest.raises(ConfigError):
            TR.TrainConfig(stage=M.STAGE_PRETRAIN, lr=-1.0).validate()
