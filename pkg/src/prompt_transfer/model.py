"""Miniature masked-LM and encoder-decoder transformers.

Both families use pre-LayerNorm blocks whose feed-forward sublayer is exactly
``max(x W1^T + b1, 0) W2 + b2`` so that FFN activation states are well
defined.  Soft prompts are spliced into the input embedding sequence and carry
no position embedding:

* masked-LM:       ``[MASK], p_1..p_l, x_1..x_n``  (decode at ``[MASK]``)
* encoder-decoder: encoder ``p_1..p_l, x_1..x_n``; decoder starts from ``<s>``

Pretraining runs on a token corpus.  A record containing a slot token
(``<cue:...>``) is a *prompted* record: the tokens before the slot token are
the answer, the slot token is expanded into 1..8 prompt-like vectors and the
rest is the input.  The special slot ``<cue:none>`` is filled with Gaussian
noise instead of a learned embedding, teaching the model that an
uninformative prompt carries no label preference.  Every other record is
plain text for masked-token (masked-LM) or span (encoder-decoder)
reconstruction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binio
from . import tensor as T
from .errors import CorruptFileError, FrozenModelError, ShapeError, VocabularyError
from .rng import substream

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("<s>", "</s>", "[MASK]", "[PAD]")
SLOT_PREFIX = "<cue:"
NULL_SLOT = "<cue:none>"
FAMILIES = ("masked_lm", "encoder_decoder")
MAX_SLOT = 8

MODEL_MAGIC = b"PTXMODEL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    family: str
    vocab: tuple[str, ...]
    num_layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_dim < self.hidden_dim:
            raise ValueError("ffn_dim must be >= hidden_dim")
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab contains duplicate tokens")
        for tok in SPECIAL_TOKENS:
            if tok not in self.vocab:
                raise ValueError(f"vocab is missing special token {tok}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "vocab": tuple(d["vocab"])})

    def canonical_json(self) -> str:
        return binio.canonical_json(self.to_dict())


@dataclass
class ActivationTrace:
    """Binary FFN activation states, shape (batch, layers, ffn_dim)."""

    states: np.ndarray
    position: str

    @property
    def num_layers(self) -> int:
        return self.states.shape[1]

    def layers(self, example: int = 0) -> list[np.ndarray]:
        return [self.states[example, i] for i in range(self.states.shape[1])]


@dataclass
class ForwardOutput:
    logits: T.Tensor  # (B, steps, V)
    trace: ActivationTrace | None = None


def _init_params(spec: ModelSpec) -> dict[str, np.ndarray]:
    rng = substream(spec.seed, "model-init")
    d, dm, V = spec.hidden_dim, spec.ffn_dim, len(spec.vocab)
    params: dict[str, np.ndarray] = {}

    def lin(name, out_dim, in_dim, scale=1.0):
        params[name + ".w"] = rng.normal(0.0, scale / np.sqrt(in_dim), size=(out_dim, in_dim))
        params[name + ".b"] = np.zeros(out_dim)

    def norm(name):
        params[name + ".g"] = np.ones(d)
        params[name + ".b"] = np.zeros(d)

    def attn(prefix):
        for part in ("q", "k", "v"):
            lin(f"{prefix}.{part}", d, d)
        lin(f"{prefix}.o", d, d, scale=1.0 / np.sqrt(2 * spec.num_layers))

    def ffn(prefix):
        # W1, W2 both stored d_m x d: FFN(x) = relu(x W1^T + b1) W2 + b2
        params[prefix + ".w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(dm, d))
        params[prefix + ".b1"] = np.zeros(dm)
        params[prefix + ".w2"] = rng.normal(0.0, 1.0 / np.sqrt(dm * 2 * spec.num_layers), size=(dm, d))
        params[prefix + ".b2"] = np.zeros(d)

    params["tok_emb"] = rng.normal(0.0, 0.1, size=(V, d))
    params["out_bias"] = np.zeros(V)
    stacks = ["enc"] if spec.family == "masked_lm" else ["enc", "dec"]
    for stack in stacks:
        params[f"{stack}.pos_emb"] = rng.normal(0.0, 0.1, size=(spec.max_seq_len, d))
        for i in range(spec.num_layers):
            p = f"{stack}.{i}"
            norm(p + ".ln1")
            attn(p + ".attn")
            if stack == "dec":
                norm(p + ".lnx")
                attn(p + ".xattn")
            norm(p + ".ln2")
            ffn(p + ".ffn")
        norm(f"{stack}.ln_f")
    return params


class ModelHandle:
    """A miniature transformer and its named parameters."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        raw = _init_params(spec) if params is None else params
        expected = _init_params_shapes(spec)
        if set(raw) != set(expected):
            raise ShapeError(f"parameter names do not match spec: {sorted(set(raw) ^ set(expected))[:5]}")
        for k, shape in expected.items():
            if raw[k].shape != shape:
                raise ShapeError(f"parameter {k} has shape {raw[k].shape}, expected {shape}")
        self.params = {k: T.Tensor(np.array(raw[k], dtype=np.float64), requires_grad=True, name=k) for k in sorted(raw)}
        self.frozen = False
        self.capture_enabled = True
        self.token_to_id = {tok: i for i, tok in enumerate(spec.vocab)}
        self.mask_id = self.token_to_id["[MASK]"]
        self.pad_id = self.token_to_id["[PAD]"]
        self.bos_id = self.token_to_id["<s>"]
        self.eos_id = self.token_to_id["</s>"]

    # -- bookkeeping ---------------------------------------------------------

    @property
    def hidden_dim(self) -> int:
        return self.spec.hidden_dim

    def freeze(self) -> "ModelHandle":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.frozen = True
            p.grad = None
        return self

    def digest(self) -> str:
        return parameter_digest(self)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        out = []
        for pos, tok in enumerate(tokens):
            try:
                out.append(self.token_to_id[tok])
            except KeyError:
                raise VocabularyError(f"token {tok!r} at position {pos} is not in the vocabulary") from None
        return out

    def tokens(self, ids: Sequence[int]) -> list[str]:
        return [self.spec.vocab[i] for i in ids]

    def _p(self, name: str) -> T.Tensor:
        return self.params[name]

    # -- building blocks -----------------------------------------------------

    def _linear(self, x: T.Tensor, name: str) -> T.Tensor:
        return T.matmul(x, T.transpose(self._p(name + ".w"))) + self._p(name + ".b")

    def _norm(self, x: T.Tensor, name: str) -> T.Tensor:
        return T.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    def _attention(self, xq: T.Tensor, xkv: T.Tensor, name: str, bias: np.ndarray | None) -> T.Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H = self.spec.num_heads
        dh = d // H

        def heads(x, part, length):
            return T.transpose(T.reshape(self._linear(x, f"{name}.{part}"), (B, length, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", Tq), heads(xkv, "k", Tk), heads(xkv, "v", Tk)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if bias is not None:
            scores = scores + T.Tensor(bias, _check=False)
        att = T.softmax(scores, axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, Tq, d))
        return self._linear(out, f"{name}.o")

    def _ffn(self, x: T.Tensor, name: str, capture: list | None, cap_pos: int | None) -> T.Tensor:
        pre = T.matmul(x, T.transpose(self._p(name + ".w1"))) + self._p(name + ".b1")
        if capture is not None:
            capture.append(pre.data[:, cap_pos, :] > 0)
        return T.matmul(T.relu(pre), self._p(name + ".w2")) + self._p(name + ".b2")

    def _stack(self, h, stack, self_bias, capture=None, cap_pos=None, memory=None, cross_bias=None):
        for i in range(self.spec.num_layers):
            p = f"{stack}.{i}"
            a = self._norm(h, p + ".ln1")
            h = h + self._attention(a, a, p + ".attn", self_bias)
            if memory is not None:
                h = h + self._attention(self._norm(h, p + ".lnx"), memory, p + ".xattn", cross_bias)
            h = h + self._ffn(self._norm(h, p + ".ln2"), p + ".ffn", capture, cap_pos)
        return self._norm(h, f"{stack}.ln_f")

    def _head(self, h: T.Tensor) -> T.Tensor:
        return T.matmul(h, T.transpose(self._p("tok_emb"))) + self._p("out_bias")

    def _pos(self, stack: str, positions: np.ndarray) -> T.Tensor:
        if positions.size and positions.max() >= self.spec.max_seq_len:
            raise ShapeError(f"sequence needs position {positions.max()} but max_seq_len is {self.spec.max_seq_len}")
        return T.embedding(self._p(f"{stack}.pos_emb"), positions)

    # -- input assembly ------------------------------------------------------

    def _pad(self, seqs) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
            ids = seqs.astype(np.int64)
            return ids, ids != self.pad_id
        seqs = [list(s) for s in seqs]
        n = max((len(s) for s in seqs), default=0)
        ids = np.full((len(seqs), n), self.pad_id, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = s
        return ids, ids != self.pad_id

    def _prompt_block(self, prompt, batch: int) -> T.Tensor | None:
        if prompt is None:
            return None
        p = getattr(prompt, "tensor", prompt)
        if not isinstance(p, T.Tensor):
            p = T.Tensor(p)
        d = self.spec.hidden_dim
        if p.shape[-1] != d:
            raise ShapeError(f"prompt dimension {p.shape[-1]} does not match model hidden_dim {d}")
        if p.ndim == 2:
            if p.shape[0] == 0:
                return None
            return T.broadcast_to(T.reshape(p, (1,) + p.shape), (batch,) + p.shape)
        if p.ndim == 3 and p.shape[0] == batch:
            return p if p.shape[1] else None
        raise ShapeError(f"prompt of shape {p.shape} incompatible with batch {batch}")

    def _encode(self, ids, valid, prompt_block, lead_mask: bool, capture, cap_pos):
        """Embed ``[MASK]? prompt x`` and run the encoder stack."""
        B, n = ids.shape
        parts = []
        key_valid = []
        if lead_mask:
            m = T.embedding(self._p("tok_emb"), np.full((B, 1), self.mask_id)) + self._pos("enc", np.zeros((1,), dtype=np.int64))
            parts.append(m)
            key_valid.append(np.ones((B, 1), dtype=bool))
        if prompt_block is not None:
            parts.append(prompt_block)
            key_valid.append(np.ones((B, prompt_block.shape[1]), dtype=bool))
        start = 1 if lead_mask else 0
        if n:
            parts.append(T.embedding(self._p("tok_emb"), ids) + self._pos("enc", np.arange(start, start + n)))
            key_valid.append(valid)
        if not parts:
            raise ShapeError("empty input sequence")
        total = sum(p.shape[1] for p in parts)
        if total > self.spec.max_seq_len:
            raise ShapeError(f"input length {total} exceeds max_seq_len {self.spec.max_seq_len}")
        h = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        kv = np.concatenate(key_valid, axis=1)
        bias = np.where(kv, 0.0, T.MASK_FILL)[:, None, None, :]
        return self._stack(h, "enc", bias, capture, cap_pos), bias

    # -- public forward ------------------------------------------------------

    def forward(self, tokens, prompt=None, decoder_inputs=None, capture: bool = False, positions=None) -> ForwardOutput:
        """Run the model on a batch of token-id sequences.

        Args:
            tokens: list of id sequences (or a padded 2-D id array).
            prompt: ``SoftPrompt``/``Tensor`` of shape (l, d), a per-example
                (B, l, d) block, or ``None``.
            decoder_inputs: encoder-decoder only; id sequences fed to the
                decoder (default: just ``<s>``).
            capture: record FFN activation states at the decode position.
            positions: masked-LM only; extra sequence positions whose logits
                are wanted instead of ``[MASK]`` (used by plain pretraining).

        Returns:
            ForwardOutput with logits of shape (B, steps, V).
        """
        ids, valid = self._pad(tokens)
        B = ids.shape[0]
        block = self._prompt_block(prompt, B)
        cap = [] if capture and self.capture_enabled else None
        if self.spec.family == "masked_lm":
            h, _ = self._encode(ids, valid, block, lead_mask=positions is None, capture=cap, cap_pos=0)
            if positions is None:
                sel = T.take(h, (slice(None), slice(0, 1)))
            else:
                rows, cols = positions
                sel = T.reshape(T.take(h, (np.asarray(rows), np.asarray(cols))), (len(rows), 1, self.spec.hidden_dim))
            logits = self._head(sel)
            trace = ActivationTrace(np.stack(cap, axis=1).astype(np.uint8), "mask") if cap is not None else None
            return ForwardOutput(logits, trace)
        memory, enc_bias = self._encode(ids, valid, block, lead_mask=False, capture=None, cap_pos=None)
        if decoder_inputs is None:
            dec_ids = np.full((B, 1), self.bos_id, dtype=np.int64)
        else:
            dec_ids, _ = self._pad(decoder_inputs)
        k = dec_ids.shape[1]
        h = T.embedding(self._p("tok_emb"), dec_ids) + self._pos("dec", np.arange(k))
        causal = np.where(np.tril(np.ones((k, k), dtype=bool)), 0.0, T.MASK_FILL)[None, None]
        h = self._stack(h, "dec", causal, cap, 0, memory=memory, cross_bias=enc_bias)
        logits = self._head(h)
        trace = ActivationTrace(np.stack(cap, axis=1).astype(np.uint8), "decoder_first") if cap is not None else None
        return ForwardOutput(logits, trace)

    def generate(self, tokens, prompt=None, max_len: int = 5) -> list[list[int]]:
        """Greedy decoding (encoder-decoder) until ``</s>`` or ``max_len``."""
        if self.spec.family != "encoder_decoder":
            raise ValueError("generate requires an encoder-decoder model")
        ids, _ = self._pad(tokens)
        B = ids.shape[0]
        dec = np.full((B, 1), self.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with T.no_grad():
            for _ in range(max_len):
                out = self.forward(ids, prompt, decoder_inputs=dec)
                nxt = out.logits.data[:, -1, :].argmax(axis=-1)
                nxt = np.where(done, self.pad_id, nxt)
                dec = np.concatenate([dec, nxt[:, None]], axis=1)
                done |= nxt == self.eos_id
                if done.all():
                    break
        result = []
        for row in dec[:, 1:]:
            seq = []
            for t in row:
                if t in (self.eos_id, self.pad_id):
                    break
                seq.append(int(t))
            result.append(seq)
        return result


def _init_params_shapes(spec: ModelSpec) -> dict[str, tuple]:
    d, dm, V, L = spec.hidden_dim, spec.ffn_dim, len(spec.vocab), spec.num_layers
    shapes = {"tok_emb": (V, d), "out_bias": (V,)}
    for stack in (["enc"] if spec.family == "masked_lm" else ["enc", "dec"]):
        shapes[f"{stack}.pos_emb"] = (spec.max_seq_len, d)
        for i in range(L):
            p = f"{stack}.{i}"
            names = [".ln1", ".ln2"] + ([".lnx"] if stack == "dec" else [])
            for n in names:
                shapes[p + n + ".g"] = (d,)
                shapes[p + n + ".b"] = (d,)
            for a in [".attn"] + ([".xattn"] if stack == "dec" else []):
                for part in "qkvo":
                    shapes[f"{p}{a}.{part}.w"] = (d, d)
                    shapes[f"{p}{a}.{part}.b"] = (d,)
            shapes[p + ".ffn.w1"] = (dm, d)
            shapes[p + ".ffn.b1"] = (dm,)
            shapes[p + ".ffn.w2"] = (dm, d)
            shapes[p + ".ffn.b2"] = (d,)
        shapes[f"{stack}.ln_f.g"] = (d,)
        shapes[f"{stack}.ln_f.b"] = (d,)
    return shapes


def init_model(spec: ModelSpec) -> ModelHandle:
    return ModelHandle(spec)


def freeze(model: ModelHandle) -> ModelHandle:
    return model.freeze()


def parameter_digest(model: ModelHandle) -> str:
    """SHA-256 over parameter names, shapes and little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def forward_with_prompt(model: ModelHandle, prompt, tokens, capture: bool = False) -> ForwardOutput:
    """Single-example convenience wrapper around :meth:`ModelHandle.forward`.

    ``tokens`` are ids or token strings for one input sequence.
    """
    tokens = list(tokens)
    if tokens and isinstance(tokens[0], str):
        tokens = model.ids(tokens)
    with T.no_grad():
        return model.forward([tokens], prompt, capture=capture)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    mask_prob: float = 0.15
    noise_scale: tuple[float, float] = (0.005, 1.0)
    warmup: int = 100


@dataclass
class _Record:
    answer: list[int]
    slot: int | None  # slot token id, None for plain text
    body: list[int]


def _parse_corpus(model: ModelHandle, corpus) -> list[_Record]:
    vocab = model.token_to_id
    slot_ids = {i for tok, i in vocab.items() if tok.startswith(SLOT_PREFIX)}
    records = []
    for r, seq in enumerate(corpus):
        ids = []
        for pos, tok in enumerate(seq):
            if isinstance(tok, str):
                if tok not in vocab:
                    raise VocabularyError(f"token {tok!r} at record {r}, position {pos} is not in the vocabulary")
                ids.append(vocab[tok])
            else:
                if not 0 <= int(tok) < len(model.spec.vocab):
                    raise VocabularyError(f"token id {tok} at record {r}, position {pos} is out of range")
                ids.append(int(tok))
        slots = [i for i, t in enumerate(ids) if t in slot_ids]
        if slots:
            s = slots[0]
            answer, body = ids[:s], ids[s + 1 :]
            if not answer:
                raise ValueError(f"prompted record {r} has no answer before its slot token")
            if model.spec.family == "masked_lm" and len(answer) != 1:
                raise ValueError(f"masked-LM prompted record {r} needs a single answer token")
            records.append(_Record(answer, ids[s], body))
        elif ids:
            records.append(_Record([], None, ids))
    return records


def pretrain(spec: ModelSpec, corpus, steps: int, config: PretrainConfig | None = None) -> ModelHandle:
    """Train a fresh model on ``corpus`` for ``steps`` AdamW steps.

    The result is a deterministic function of (spec, corpus, steps, config).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    config = config or PretrainConfig()
    model = ModelHandle(spec)
    records = _parse_corpus(model, corpus)
    if steps == 0:
        return model
    if not records:
        raise ValueError("corpus is empty")
    params = list(model.params.values())
    opt = T.AdamW(params, learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    rng = substream(spec.seed, "pretrain-batches")
    null_id = model.token_to_id.get(NULL_SLOT)
    for step in range(steps):
        batch = [records[i] for i in rng.integers(0, len(records), size=config.batch_size)]
        prompted = [r for r in batch if r.slot is not None]
        plain = [r for r in batch if r.slot is None]
        opt.zero_grad()
        losses = []
        if prompted:
            losses.append((len(prompted), _prompted_loss(model, prompted, rng, null_id, config)))
        if plain:
            losses.append((len(plain), _plain_loss(model, plain, rng, config)))
        total = sum(n for n, _ in losses)
        loss = losses[0][1] * (losses[0][0] / total)
        for n, l in losses[1:]:
            loss = loss + l * (n / total)
        T.backward(loss)
        opt.learning_rate = config.learning_rate * min(1.0, (step + 1) / max(config.warmup, 1))
        opt.step()
        if step % 500 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss.item())
    return model


def _prompted_loss(model, recs, rng, null_id, config):
    B = len(recs)
    d = model.spec.hidden_dim
    r = int(rng.integers(1, MAX_SLOT + 1))
    slot_ids = np.array([rec.slot for rec in recs])
    cue = T.embedding(model.params["tok_emb"], np.repeat(slot_ids[:, None], r, axis=1))
    if null_id is not None and (slot_ids == null_id).any():
        lo, hi = np.log(config.noise_scale[0]), np.log(config.noise_scale[1])
        scale = np.exp(rng.uniform(lo, hi, size=(B, 1, 1)))
        noise = rng.normal(size=(B, r, d)) * scale
        is_null = (slot_ids == null_id)[:, None, None]
        # learned cue embedding where a real cue is present, raw noise otherwise
        cue = cue * T.Tensor(np.where(is_null, 0.0, 1.0)) + T.Tensor(np.where(is_null, noise, 0.0))
    bodies = [rec.body for rec in recs]
    if model.spec.family == "masked_lm":
        out = model.forward(bodies, cue)
        targets = np.array([rec.answer[0] for rec in recs])
        return T.cross_entropy(T.reshape(out.logits, (B, -1)), targets)
    dec_in = [[model.bos_id] + rec.answer for rec in recs]
    targets = [rec.answer + [model.eos_id] for rec in recs]
    return _seq_loss(model, model.forward(bodies, cue, decoder_inputs=dec_in).logits, targets)


def _seq_loss(model, logits, targets):
    B, k, V = logits.shape
    tgt = np.full((B, k), model.pad_id, dtype=np.int64)
    w = np.zeros((B, k))
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = t
        w[i, : len(t)] = 1.0
    return T.cross_entropy(T.reshape(logits, (B * k, V)), tgt.reshape(-1), w.reshape(-1))


def _plain_loss(model, recs, rng, config):
    if model.spec.family == "masked_lm":
        ids, valid = model._pad([rec.body for rec in recs])
        chosen = (rng.random(ids.shape) < config.mask_prob) & valid
        for row in range(ids.shape[0]):
            if not chosen[row].any():
                chosen[row, rng.integers(0, valid[row].sum())] = True
        rows, cols = np.nonzero(chosen)
        targets = ids[rows, cols]
        corrupted = ids.copy()
        corrupted[rows, cols] = model.mask_id
        out = model.forward(corrupted, positions=(rows, cols))
        return T.cross_entropy(T.reshape(out.logits, (len(rows), -1)), targets)
    enc, dec_in, targets = [], [], []
    for rec in recs:
        body = rec.body
        span = int(rng.integers(1, min(3, len(body)) + 1))
        start = int(rng.integers(0, len(body) - span + 1))
        enc.append(body[:start] + [model.mask_id] + body[start + span :])
        piece = body[start : start + span]
        dec_in.append([model.bos_id] + piece)
        targets.append(piece + [model.eos_id])
    return _seq_loss(model, model.forward(enc, decoder_inputs=dec_in).logits, targets)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: ModelHandle, path: str | Path) -> str:
    digest = parameter_digest(model)
    header = {"kind": "model", "spec": model.spec.to_dict(), "digest": digest, "frozen": model.frozen}
    blocks = {k: p.data for k, p in model.params.items()}
    binio.write_file(path, binio.pack(MODEL_MAGIC, MODEL_VERSION, header, blocks))
    return digest


def load_model(path: str | Path, freeze_model: bool = True) -> ModelHandle:
    header, blocks = binio.unpack(binio.read_file(path), MODEL_MAGIC, {MODEL_VERSION})
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"bad model spec in header: {exc}") from None
    model = ModelHandle(spec, blocks)
    if parameter_digest(model) != header.get("digest"):
        raise CorruptFileError("parameter digest does not match header")
    return model.freeze() if freeze_model else model
