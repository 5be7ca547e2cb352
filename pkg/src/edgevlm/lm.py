"""
Toy causal decoder standing in for the base language model.

Blocks are pre-norm with rotary attention and a SiLU-gated MLP. Inference is
split into ``prefill`` (one pass over the multimodal prompt that fills the
KV cache) and ``decode_step`` (one token against the cache), which is what
makes time-to-first-token separately measurable from decoding speed.

Token ids: bytes map to 0..255, specials sit above them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import projector, vision
from . import tensor as T
from .config import LMConfig, ModelConfig
from .errors import CheckpointError, ContextOverflowError, ContractError, DecodeError
from .layers import attention, causal_mask, merge_heads, split_heads
from .tensor import Tensor

BOS, EOS, IMG_START, IMG_END, PAD = 256, 257, 258, 259, 260
SPECIALS = {BOS: "<bos>", EOS: "<eos>", IMG_START: "<img>", IMG_END: "</img>", PAD: "<pad>"}
N_BYTES = 256


def tokenize(text: str | bytes) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize_bytes(ids) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i < N_BYTES:
            out.append(i)
        elif i not in SPECIALS:
            raise DecodeError(f"token id {i} is neither a byte nor a known special")
    return bytes(out)


def detokenize(ids) -> str:
    """Byte tokens back to text; known specials are dropped."""
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


# -- weights -----------------------------------------------------------------
def param_shapes(cfg: LMConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_lm, cfg.d_ff
    shapes = {"lm.tok_embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        pre = f"lm.layers.{i}."
        shapes.update({
            pre + "ln1.weight": (d,), pre + "ln1.bias": (d,),
            pre + "attn.wq": (d, d), pre + "attn.wk": (d, d),
            pre + "attn.wv": (d, d), pre + "attn.wo": (d, d),
            pre + "ln2.weight": (d,), pre + "ln2.bias": (d,),
            pre + "mlp.w_gate": (d, ff), pre + "mlp.w_up": (d, ff), pre + "mlp.w_down": (ff, d),
        })
    shapes.update({"lm.ln_f.weight": (d,), "lm.ln_f.bias": (d,), "lm.head": (d, cfg.vocab_size)})
    return shapes


@dataclass
class KVCache:
    """Per-layer rotated keys and values, preallocated to ``max_seq``."""

    keys: list[np.ndarray]  # each [n_heads, max_seq, head_dim]
    values: list[np.ndarray]
    filled_len: int = 0

    @classmethod
    def empty(cls, cfg: LMConfig, dtype=np.float32) -> "KVCache":
        shape = (cfg.n_heads, cfg.max_seq, cfg.head_dim)
        return cls([np.zeros(shape, dtype) for _ in range(cfg.n_layers)],
                   [np.zeros(shape, dtype) for _ in range(cfg.n_layers)])

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0


def forward(weights: dict[str, Tensor], cfg: LMConfig, x: Tensor, cache: KVCache | None = None,
            last_only: bool = False) -> Tensor:
    """Embedded inputs [B, T, d] -> logits [B, T, vocab] (or [B, 1, vocab] if ``last_only``).

    With a cache, the inputs continue the cached prefix (batch size 1) and
    their keys/values are appended to it.
    """
    w = weights
    b, n, _ = x.shape
    start = 0
    if cache is not None:
        if b != 1:
            raise ContractError("KV-cached forward supports batch size 1")
        start = cache.filled_len
    if start + n > cfg.max_seq:
        raise ContextOverflowError(f"sequence of {start + n} tokens exceeds max_seq {cfg.max_seq}")
    positions = np.arange(start, start + n)
    mask = causal_mask(n, start + n)
    for i in range(cfg.n_layers):
        pre = f"lm.layers.{i}."
        h = T.layernorm(x, w[pre + "ln1.weight"], w[pre + "ln1.bias"])
        q = T.rope(split_heads(T.matmul(h, w[pre + "attn.wq"]), cfg.n_heads), positions, cfg.rope_theta)
        k = T.rope(split_heads(T.matmul(h, w[pre + "attn.wk"]), cfg.n_heads), positions, cfg.rope_theta)
        v = split_heads(T.matmul(h, w[pre + "attn.wv"]), cfg.n_heads)
        if cache is not None:
            cache.keys[i][:, start:start + n] = k.data[0]
            cache.values[i][:, start:start + n] = v.data[0]
            if start:
                k = Tensor(cache.keys[i][None, :, :start + n])
                v = Tensor(cache.values[i][None, :, :start + n])
        x = x + T.matmul(merge_heads(attention(q, k, v, mask)), w[pre + "attn.wo"])
        h = T.layernorm(x, w[pre + "ln2.weight"], w[pre + "ln2.bias"])
        gated = T.silu(T.matmul(h, w[pre + "mlp.w_gate"])) * T.matmul(h, w[pre + "mlp.w_up"])
        x = x + T.matmul(gated, w[pre + "mlp.w_down"])
    if cache is not None:
        cache.filled_len = start + n
    if last_only:
        x = x[:, -1:]
    x = T.layernorm(x, w["lm.ln_f.weight"], w["lm.ln_f.bias"])
    return T.matmul(x, w["lm.head"])


def embed_tokens(weights: dict[str, Tensor], ids) -> Tensor:
    return T.embedding(weights["lm.tok_embed"], np.asarray(ids, dtype=np.int64))


# -- multimodal sequences ----------------------------------------------------
@dataclass
class MultimodalSequence:
    """[BOS][IMG_START] image tokens [IMG_END] prompt tokens, already embedded."""

    embeddings: Tensor  # [1, L, d_lm]
    image_tokens: int
    text_ids: list[int]

    def __len__(self) -> int:
        return self.embeddings.shape[1]

    @property
    def image_span(self) -> tuple[int, int]:
        return 2, 2 + self.image_tokens


def assemble(weights: dict[str, Tensor], image_tokens: Tensor, text_ids) -> MultimodalSequence:
    """Splice projected image tokens [B, S, d] between the framing specials, then the text."""
    b = image_tokens.shape[0]
    text_ids = list(text_ids)
    head = embed_tokens(weights, np.tile([BOS, IMG_START], (b, 1)))
    tail = embed_tokens(weights, np.tile([IMG_END] + text_ids, (b, 1)))
    emb = T.concat([head, image_tokens, tail], axis=1)
    return MultimodalSequence(emb, image_tokens.shape[1], text_ids)


def image_tokens(weights: dict[str, Tensor], cfg: ModelConfig, image: vision.Image) -> Tensor:
    return projector.project(vision.vision_encode(image, cfg.vision, weights), cfg, weights)


def prefill(weights: dict[str, Tensor], cfg: LMConfig, seq: MultimodalSequence) -> tuple[Tensor, KVCache]:
    """Full causal pass over ``seq``; returns next-token logits [vocab] and the filled cache."""
    if len(seq) > cfg.max_seq:
        raise ContextOverflowError(f"sequence of {len(seq)} tokens exceeds max_seq {cfg.max_seq}")
    cache = KVCache.empty(cfg, seq.embeddings.dtype)
    logits = forward(weights, cfg, seq.embeddings, cache, last_only=True)
    return logits[0, 0], cache


def decode_step(weights: dict[str, Tensor], cfg: LMConfig, cache: KVCache, token) -> tuple[Tensor, KVCache]:
    """Feed one token (id or [1, 1, d] embedding) after the cached prefix."""
    if cache.filled_len >= cfg.max_seq:
        raise ContextOverflowError(f"KV cache is full ({cfg.max_seq} tokens)")
    emb = token if isinstance(token, Tensor) else embed_tokens(weights, [[int(token)]])
    logits = forward(weights, cfg, emb, cache)
    return logits[0, 0], cache


# -- generation --------------------------------------------------------------
@dataclass
class GenerationParams:
    max_new: int = 32
    temperature: float = 1.0
    seed: int = 0
    greedy: bool = True
    ignore_eos: bool = False


@dataclass
class GenerationResult:
    text: str
    token_ids: list[int]
    t_start: float
    per_token_timestamps: list[float]
    image_tokens: int
    prompt_tokens: int
    logits: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def ttft(self) -> float:
        return self.per_token_timestamps[0] - self.t_start

    @property
    def decode_tps(self) -> float | None:
        ts = self.per_token_timestamps
        if len(ts) < 2 or ts[-1] <= ts[0]:
            return None
        return (len(ts) - 1) / (ts[-1] - ts[0])


def pick_token(logits: np.ndarray, params: GenerationParams, rng: np.random.Generator) -> int:
    if params.greedy or params.temperature <= 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / params.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate(weights: dict[str, Tensor], cfg: ModelConfig, image: vision.Image, prompt: str,
             params: GenerationParams | None = None, keep_logits: bool = False) -> GenerationResult:
    """Encode, project, prefill, then decode until EOS or ``max_new`` tokens.

    EOS counts as a generated token (it has a timestamp) but is not part of ``text``.
    """
    params = params or GenerationParams()
    if params.max_new < 1:
        raise ContractError("max_new must be >= 1")
    for name in ("lm.tok_embed", "lm.head"):
        if name not in weights:
            raise CheckpointError(f"missing weight {name}")
    rng = np.random.default_rng(np.uint64(params.seed & (2**64 - 1)))
    t_start = time.perf_counter()
    prompt_ids = tokenize(prompt)
    ids: list[int] = []
    stamps: list[float] = []
    kept: list[np.ndarray] = []
    with T.no_grad():
        seq = assemble(weights, image_tokens(weights, cfg, image), prompt_ids)
        logits, cache = prefill(weights, cfg.lm, seq)
        while True:
            tok = pick_token(logits.data, params, rng)
            stamps.append(time.perf_counter())
            ids.append(tok)
            if keep_logits:
                kept.append(logits.data.copy())
            if len(ids) >= params.max_new or (tok == EOS and not params.ignore_eos):
                break
            logits, cache = decode_step(weights, cfg.lm, cache, tok)
    text_ids = [i for i in ids if i != EOS] if not params.ignore_eos else ids
    return GenerationResult(detokenize(text_ids), ids, t_start, stamps, seq.image_tokens,
                            len(prompt_ids), kept)


# -- teacher-forced scoring --------------------------------------------------
def build_batch(weights: dict[str, Tensor], img_tokens: Tensor, prompts: list[list[int]],
                responses: list[list[int]], append_eos: bool) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Right-padded teacher-forcing batch.

    Returns embeddings [B, L, d], next-token targets [B, L] and a mask [B, L]
    selecting the positions whose target is a response token.
    Right padding is harmless under causal attention.
    """
    b, n_img, _ = img_tokens.shape
    if len(prompts) != b or len(responses) != b:
        raise ContractError("batch sizes of images, prompts and responses differ")
    tails = []
    for p, r in zip(prompts, responses):
        if not r:
            raise ContractError("response must be nonempty")
        tails.append([IMG_END] + list(p) + list(r) + ([EOS] if append_eos else []))
    width = max(len(t) for t in tails)
    tail_ids = np.full((b, width), PAD, dtype=np.int64)
    for i, t in enumerate(tails):
        tail_ids[i, :len(t)] = t
    seq_len = 2 + n_img + width
    ids = np.full((b, seq_len), PAD, dtype=np.int64)
    ids[:, 0], ids[:, 1] = BOS, IMG_START
    ids[:, 2 + n_img:] = tail_ids
    targets = np.full((b, seq_len), PAD, dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    mask = np.zeros((b, seq_len), dtype=bool)
    for i, (p, r) in enumerate(zip(prompts, responses)):
        first = 2 + n_img + 1 + len(p)  # index of the first response token
        n = len(r) + (1 if append_eos else 0)
        mask[i, first - 1:first - 1 + n] = True
    head = embed_tokens(weights, ids[:, :2])
    tail = embed_tokens(weights, tail_ids)
    return T.concat([head, img_tokens, tail], axis=1), targets, mask


def response_logprobs(weights: dict[str, Tensor], cfg: LMConfig, img_tokens: Tensor,
                      prompts: list[list[int]], responses: list[list[int]],
                      append_eos: bool = False) -> Tensor:
    """Sum of log P(response tokens | image, prompt) per batch row -> [B]."""
    emb, targets, mask = build_batch(weights, img_tokens, prompts, responses, append_eos)
    logp = T.take_last(T.log_softmax(forward(weights, cfg, emb)), targets)
    return T.tsum(logp * Tensor(mask.astype(logp.dtype)), axis=1)


def sequence_logprob(weights: dict[str, Tensor], cfg: ModelConfig, image: vision.Image,
                     prompt: str, response: str) -> Tensor:
    """Teacher-forced log-likelihood of ``response`` only; differentiable w.r.t. projector and LM."""
    resp = tokenize(response)
    if not resp:
        raise ContractError("response must be nonempty")
    img = image_tokens(weights, cfg, image)
    return response_logprobs(weights, cfg.lm, img, [tokenize(prompt)], [resp])[0]
