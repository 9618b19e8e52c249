"""Small encoder-decoder transformer with two task-specific soft prompts.

The encoder consumes a composed sequence [source tokens, soft prompt, optional
discrete entity-chain tokens] sharing one contiguous position index space.
One soft prompt is reserved for entity-chain generation, the other for
chain-conditioned summary generation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import ParamGroup, Tensor

PAD_ID, BOS_ID, EOS_ID, SEP_ENT_ID, UNK_ID = 0, 1, 2, 3, 4

TASK_ENTITY = "entity"
TASK_SUMMARY = "summary"

STAGE_PRETRAIN = "pretrain"
STAGE_TUNE_ENTITY = "tune_entity"
STAGE_TUNE_SUMMARY = "tune_summary"

PROMPT_PARAM = {TASK_ENTITY: "prompt.entity", TASK_SUMMARY: "prompt.summary"}


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 512
    max_src_positions: int = 1024
    max_tgt_positions: int = 256
    prompt_len: int = 100
    entity_chain_cap: int = 100

    def validate(self) -> "ModelConfig":
        # EOS/BOS ids must be addressable; tiny oracle models use vocab 5.
        if self.vocab_size <= max(BOS_ID, EOS_ID):
            raise ConfigError(f"vocab_size {self.vocab_size} too small")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.prompt_len < 1 or self.entity_chain_cap < 1:
            raise ConfigError("prompt_len and entity_chain_cap must be >= 1")
        if min(self.n_enc_layers, self.n_dec_layers) < 1 or self.d_ff < 1:
            raise ConfigError("layer counts and d_ff must be >= 1")
        if self.max_src_positions < self.prompt_len + self.entity_chain_cap + 1:
            raise ConfigError("max_src_positions leaves no room for any source token")
        if self.max_tgt_positions < 2:
            raise ConfigError("max_tgt_positions must be >= 2")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw).validate()


@dataclass
class SoftPrompt:
    task: str
    embeddings: Tensor


@dataclass
class ComposedInput:
    token_embeddings: Tensor           # [L, d_model]
    segment_tags: list[str]            # "source" | "prompt" | "chain"
    source_truncated: bool = False
    chain_truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.segment_tags)


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def build_model(config: ModelConfig, seed: int) -> ParamGroup:
    """Deterministically initialized parameters for the given config.

    Weight matrices and embeddings draw from N(0, 0.02^2); biases start at
    zero, layer-norm gains at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParamGroup()
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def w(name, shape):
        params.add(name, Tensor(rng.normal(0.0, 0.02, size=shape)))

    def zeros(name, shape):
        params.add(name, Tensor(np.zeros(shape)))

    def ones(name, shape):
        params.add(name, Tensor(np.ones(shape)))

    w("embed.tok", (v, d))
    w("embed.pos_src", (config.max_src_positions, d))
    w("embed.pos_tgt", (config.max_tgt_positions, d))

    def attn(prefix):
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{nm}", (d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            zeros(f"{prefix}.{nm}", (d,))

    def ln(prefix):
        ones(f"{prefix}.g", (d,))
        zeros(f"{prefix}.b", (d,))

    def ffn(prefix):
        w(f"{prefix}.w1", (d, dff))
        zeros(f"{prefix}.b1", (dff,))
        w(f"{prefix}.w2", (dff, d))
        zeros(f"{prefix}.b2", (d,))

    for i in range(config.n_enc_layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2"); ffn(f"enc.{i}.ffn")
    ln("enc.final_ln")
    for i in range(config.n_dec_layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); ffn(f"dec.{i}.ffn")
    ln("dec.final_ln")

    w(PROMPT_PARAM[TASK_ENTITY], (config.prompt_len, d))
    w(PROMPT_PARAM[TASK_SUMMARY], (config.prompt_len, d))
    return params


def is_prompt_param(name: str) -> bool:
    return name.startswith("prompt.")


def backbone_names(params: ParamGroup) -> list[str]:
    return [n for n in params.names() if not is_prompt_param(n)]


def param_counts(params: ParamGroup) -> dict:
    total = params.num_params()
    prompt = sum(params.entries[n].size for n in params.names() if is_prompt_param(n))
    return {
        "total": total,
        "prompt": prompt,
        "backbone": total - prompt,
        "prompt_fraction": prompt / total,
    }


def init_soft_prompt(params: ParamGroup, task: str, token_frequency: dict[int, int]) -> None:
    """Reset a soft prompt to embeddings of the most frequent tokens.

    Row i copies the backbone embedding of the i-th most frequent token id
    (ties broken by ascending id); the frequency list wraps around when there
    are fewer distinct tokens than prompt rows.
    """
    if task not in PROMPT_PARAM:
        raise ContractError(f"unknown task {task!r}")
    if not token_frequency:
        raise ContractError("token_frequency is empty")
    prompt = params[PROMPT_PARAM[task]]
    table = params["embed.tok"].values
    ranked = sorted(token_frequency, key=lambda tid: (-token_frequency[tid], tid))
    rows = np.stack([table[ranked[i % len(ranked)]] for i in range(prompt.shape[0])])
    prompt.values = rows.copy()


def compose_input(
    params: ParamGroup,
    config: ModelConfig,
    source_ids: list[int],
    task: str,
    chain_ids: list[int] | None = None,
    include_prompt: bool = True,
) -> ComposedInput:
    """Build the encoder input [source embeddings; soft prompt; chain embeddings].

    Entity task takes no discrete chain; summary task requires one (possibly
    empty). Chains are capped to entity_chain_cap tokens and the source is
    right-truncated to fit the position budget; both truncations are flagged.
    """
    if task == TASK_ENTITY:
        if chain_ids is not None:
            raise ContractError("entity task takes no discrete chain")
        chain_ids = []
    elif task == TASK_SUMMARY:
        if chain_ids is None:
            raise ContractError("summary task requires a chain (possibly empty)")
    else:
        raise ContractError(f"unknown task {task!r}")

    chain_truncated = False
    if len(chain_ids) > config.entity_chain_cap:
        chain_ids = chain_ids[: config.entity_chain_cap]
        chain_truncated = True

    prompt_seg = config.prompt_len if include_prompt else 0
    budget = config.max_src_positions - prompt_seg - len(chain_ids)
    source_truncated = False
    if len(source_ids) > budget:
        source_ids = source_ids[:budget]
        source_truncated = True

    table = params["embed.tok"]
    parts: list[Tensor] = []
    tags: list[str] = []
    if source_ids:
        parts.append(T.embedding_lookup(table, source_ids))
        tags += ["source"] * len(source_ids)
    if include_prompt:
        parts.append(params[PROMPT_PARAM[task]])
        tags += ["prompt"] * config.prompt_len
    if chain_ids:
        parts.append(T.embedding_lookup(table, chain_ids))
        tags += ["chain"] * len(chain_ids)
    if not parts:
        raise ContractError("composed input is empty")
    embeddings = parts[0] if len(parts) == 1 else T.concat_seq(parts)
    return ComposedInput(
        token_embeddings=embeddings,
        segment_tags=tags,
        source_truncated=source_truncated,
        chain_truncated=chain_truncated,
    )


def _ln_affine(params: ParamGroup, prefix: str, x: Tensor) -> Tensor:
    normed = T.layer_norm(x)
    return T.add(T.mul(normed, params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _attention(
    params: ParamGroup,
    prefix: str,
    x: Tensor,
    kv: Tensor,
    n_heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    d = x.shape[-1]
    dh = d // n_heads
    tq, tk = x.shape[0], kv.shape[0]
    q = T.add(T.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = T.add(T.matmul(kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = T.add(T.matmul(kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    q = T.transpose(T.reshape(q, (tq, n_heads, dh)), (1, 0, 2))      # [h, tq, dh]
    k = T.transpose(T.reshape(k, (tk, n_heads, dh)), (1, 2, 0))      # [h, dh, tk]
    v = T.transpose(T.reshape(v, (tk, n_heads, dh)), (1, 0, 2))      # [h, tk, dh]
    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh))            # [h, tq, tk]
    if mask is not None:
        scores = T.add(scores, mask)
    ctx = T.matmul(T.softmax(scores), v)                             # [h, tq, dh]
    ctx = T.reshape(T.transpose(ctx, (1, 0, 2)), (tq, d))
    return T.add(T.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(params: ParamGroup, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _causal_mask(t: int) -> Tensor:
    mask = np.triu(np.full((t, t), -1e9), k=1)
    return Tensor(mask)


def encode(params: ParamGroup, config: ModelConfig, composed: ComposedInput) -> Tensor:
    """Encoder states over the composed sequence; positions are contiguous
    across the source, prompt, and chain segments."""
    h = composed.token_embeddings
    length = h.shape[0]
    pos = T.embedding_lookup(params["embed.pos_src"], np.arange(length))
    h = T.add(h, pos)
    for i in range(config.n_enc_layers):
        normed = _ln_affine(params, f"enc.{i}.ln1", h)
        h = T.add(h, _attention(params, f"enc.{i}.attn", normed, normed, config.n_heads))
        h = T.add(h, _ffn(params, f"enc.{i}.ffn", _ln_affine(params, f"enc.{i}.ln2", h)))
    return _ln_affine(params, "enc.final_ln", h)


def decode_states(
    params: ParamGroup,
    config: ModelConfig,
    enc_states: Tensor,
    decoder_input_ids: list[int],
) -> Tensor:
    t = len(decoder_input_ids)
    if t > config.max_tgt_positions:
        raise ContractError(f"decoder input of {t} exceeds max_tgt_positions")
    h = T.embedding_lookup(params["embed.tok"], decoder_input_ids)
    h = T.add(h, T.embedding_lookup(params["embed.pos_tgt"], np.arange(t)))
    mask = _causal_mask(t)
    for i in range(config.n_dec_layers):
        normed = _ln_affine(params, f"dec.{i}.ln1", h)
        h = T.add(h, _attention(params, f"dec.{i}.self", normed, normed,
                                config.n_heads, mask=mask))
        h = T.add(h, _attention(params, f"dec.{i}.cross",
                                _ln_affine(params, f"dec.{i}.ln2", h), enc_states,
                                config.n_heads))
        h = T.add(h, _ffn(params, f"dec.{i}.ffn", _ln_affine(params, f"dec.{i}.ln3", h)))
    return _ln_affine(params, "dec.final_ln", h)


def logits_from_states(params: ParamGroup, dec_states: Tensor) -> Tensor:
    # Output projection tied to the token embedding table.
    return T.matmul(dec_states, T.transpose(params["embed.tok"], (1, 0)))


def forward_loss(
    params: ParamGroup,
    config: ModelConfig,
    composed: ComposedInput,
    target_ids: list[int],
) -> Tensor:
    """Mean per-token NLL of the target under teacher forcing.

    The target must contain EOS; positions after the first EOS (padding) do
    not contribute to the loss.
    """
    if not target_ids:
        raise ContractError("empty target")
    if max(target_ids) >= config.vocab_size or min(target_ids) < 0:
        raise ContractError("target token outside vocabulary")
    if EOS_ID not in target_ids:
        raise ContractError("target does not end with EOS")
    effective = target_ids[: target_ids.index(EOS_ID) + 1]
    decoder_input = [BOS_ID] + effective[:-1]
    enc = encode(params, config, composed)
    states = decode_states(params, config, enc, decoder_input)
    return T.softmax_cross_entropy(logits_from_states(params, states), effective)


def next_token_logits(
    params: ParamGroup,
    config: ModelConfig,
    enc_states: Tensor,
    prefix_ids: list[int],
) -> np.ndarray:
    """Logits for the next token after prefix_ids (BOS-prefixed internally)."""
    with T.no_grad():
        states = decode_states(params, config, enc_states, [BOS_ID] + list(prefix_ids))
        logits = logits_from_states(params, states)
    return logits.values[-1].copy()


def set_stage_trainability(params: ParamGroup, stage: str) -> None:
    """pretrain: everything trains; tune stages train exactly one prompt."""
    if stage == STAGE_PRETRAIN:
        params.set_trainable(lambda name: True)
    elif stage == STAGE_TUNE_ENTITY:
        params.set_trainable(lambda name: name == PROMPT_PARAM[TASK_ENTITY])
    elif stage == STAGE_TUNE_SUMMARY:
        params.set_trainable(lambda name: name == PROMPT_PARAM[TASK_SUMMARY])
    else:
        raise ContractError(f"unknown stage {stage!r}")
