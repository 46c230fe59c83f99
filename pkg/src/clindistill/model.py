"""Word-level tokenizer and the small encoder-decoder sequence model.

The model has two parameter groups: the sequence model proper ("slm" group:
embeddings, encoder, decoder, layer norms) and the fusion stack ("fusion"
group: time-series patch encoder + knowledge cross-attention). The phase
schedule in training.py freezes one group or the other.

Encoder inputs per phase:
  phase 1: note token embeddings
  phase 2: the knowledge-fused lab sequence H alone (125 positions)
  phase 3: [H | separator token embedding | note token embeddings]

Target serialization (single source of truth for training and parsing):
  "Diagnoses: <label>; <label>; ... . <note rationale> <lab rationale>"
with the empty label set rendered as "Diagnoses: none .".
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, EhrRecord, LabelRegistry, N_PATCHES, PATCH_LEN, pad_and_patch
from .errors import SchemaError, SizeError
from .knowledge import KnowledgeBase, KnowledgeVocab
from .optim import GROUP_FUSION, GROUP_SLM, ParamStore, truncated_normal

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
_SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"]

NEG_INF = -1e9


def word_tokenize(text: str) -> List[str]:
    """Lowercased word-level split; punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Tokenizer:
    id_to_token: List[str]
    token_to_id: Dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> List[str]:
        return word_tokenize(text)

    def encode(self, text: str) -> List[int]:
        return [self.token_to_id.get(t, UNK) for t in self.tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token[i] for i in ids
                        if i not in (PAD, BOS, EOS, SEP))


def build_tokenizer(corpus: Corpus, kb: Optional[KnowledgeBase],
                    max_vocab: int = 2000) -> Tokenizer:
    """Frequency-ranked word vocabulary over notes and serialized targets,
    with all knowledge-term tokens force-included."""
    if not corpus.records:
        raise SizeError("cannot build a tokenizer from an empty corpus")
    counts: Counter = Counter()
    for record in corpus.records:
        counts.update(word_tokenize(record.note))
        counts.update(word_tokenize(serialize_target(record, corpus.registry)))
    forced: List[str] = []
    seen = set()
    for label in corpus.registry.labels:
        for tok in word_tokenize(label):
            if tok not in seen:
                seen.add(tok)
                forced.append(tok)
    if kb is not None:
        for term in sorted(kb.all_terms()):
            for tok in word_tokenize(term):
                if tok not in seen:
                    seen.add(tok)
                    forced.append(tok)
    vocab = list(_SPECIALS) + forced
    budget = max_vocab - len(vocab)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for tok, _ in ranked:
        if budget <= 0:
            break
        if tok not in seen:
            seen.add(tok)
            vocab.append(tok)
            budget -= 1
    return Tokenizer(vocab)


# ---- target serialization ----------------------------------------------------

DIAGNOSES_MARKER = "Diagnoses:"


def serialize_target(record: EhrRecord, registry: LabelRegistry,
                     include_note_rationale: bool = True,
                     include_lab_rationale: bool = True) -> str:
    labels = registry.sort(record.diagnoses)
    head = f"{DIAGNOSES_MARKER} " + ("; ".join(labels) if labels else "none") + " ."
    parts = [head]
    if include_note_rationale and record.note_rationale:
        parts.append(record.note_rationale)
    if include_lab_rationale and record.lab_rationale:
        parts.append(record.lab_rationale)
    return " ".join(parts)


# ---- config ------------------------------------------------------------------


@dataclass
class SlmConfig:
    hidden_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_note_tokens: int = 96
    max_target_tokens: int = 96
    tse_layers: int = 1
    vocab_size: int = 0          # set from the tokenizer at model build
    n_features: int = 0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise SchemaError("hidden_dim must be divisible by heads")

    @property
    def max_encoder_len(self) -> int:
        return N_PATCHES + 1 + self.max_note_tokens

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---- model -------------------------------------------------------------------


class ClinDistillModel:
    """Tokenizer + tiny encoder-decoder + time-series encoder + knowledge
    cross-attention, with the two-way parameter partition asserted at build."""

    def __init__(self, config: SlmConfig, tokenizer: Tokenizer):
        if config.vocab_size == 0:
            config.vocab_size = len(tokenizer)
        if config.vocab_size != len(tokenizer):
            raise SchemaError("config vocab_size disagrees with the tokenizer")
        if config.n_features <= 0:
            raise SchemaError("config.n_features must be set")
        self.config = config
        self.tokenizer = tokenizer
        self.store = ParamStore()
        self._build_params()
        names = set(self.store.names())
        slm = set(self.store.group_names(GROUP_SLM))
        fusion = set(self.store.group_names(GROUP_FUSION))
        assert slm | fusion == names and not (slm & fusion)

    # -- parameters --

    def _build_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden_dim

        def w(name, shape, group):
            self.store.add(name, Tensor(truncated_normal(rng, shape, cfg.init_std)), group)

        def zeros(name, shape, group):
            self.store.add(name, Tensor(np.zeros(shape)), group)

        def ones(name, shape, group):
            self.store.add(name, Tensor(np.ones(shape)), group)

        w("emb", (cfg.vocab_size, d), GROUP_SLM)
        w("enc_pos", (cfg.max_encoder_len, d), GROUP_SLM)
        w("dec_pos", (cfg.max_target_tokens + 1, d), GROUP_SLM)

        def attn_block(prefix, group):
            for part in ("q", "k", "v", "o"):
                w(f"{prefix}.w{part}", (d, d), group)
                zeros(f"{prefix}.b{part}", (d,), group)

        def ffn_block(prefix, group):
            w(f"{prefix}.w1", (d, cfg.ffn_dim), group)
            zeros(f"{prefix}.b1", (cfg.ffn_dim,), group)
            w(f"{prefix}.w2", (cfg.ffn_dim, d), group)
            zeros(f"{prefix}.b2", (d,), group)

        def ln_block(prefix, group):
            ones(f"{prefix}.g", (d,), group)
            zeros(f"{prefix}.b", (d,), group)

        for i in range(cfg.encoder_layers):
            attn_block(f"enc.{i}.attn", GROUP_SLM)
            ffn_block(f"enc.{i}.ffn", GROUP_SLM)
            ln_block(f"enc.{i}.ln1", GROUP_SLM)
            ln_block(f"enc.{i}.ln2", GROUP_SLM)
        ln_block("enc.final_ln", GROUP_SLM)
        for i in range(cfg.decoder_layers):
            attn_block(f"dec.{i}.self", GROUP_SLM)
            attn_block(f"dec.{i}.cross", GROUP_SLM)
            ffn_block(f"dec.{i}.ffn", GROUP_SLM)
            ln_block(f"dec.{i}.ln1", GROUP_SLM)
            ln_block(f"dec.{i}.ln2", GROUP_SLM)
            ln_block(f"dec.{i}.ln3", GROUP_SLM)
        ln_block("dec.final_ln", GROUP_SLM)

        w("tse.proj.w", (PATCH_LEN * cfg.n_features, d), GROUP_FUSION)
        zeros("tse.proj.b", (d,), GROUP_FUSION)
        w("tse.pos", (N_PATCHES, d), GROUP_FUSION)
        for i in range(cfg.tse_layers):
            attn_block(f"tse.{i}.attn", GROUP_FUSION)
            ffn_block(f"tse.{i}.ffn", GROUP_FUSION)
            ln_block(f"tse.{i}.ln1", GROUP_FUSION)
            ln_block(f"tse.{i}.ln2", GROUP_FUSION)
        ln_block("tse.final_ln", GROUP_FUSION)
        w("ka.wq", (d, d), GROUP_FUSION)
        w("ka.wk", (d, d), GROUP_FUSION)
        w("ka.wv", (d, d), GROUP_FUSION)

    def p(self, name: str) -> Tensor:
        return self.store.params[name]

    # -- building blocks --

    def _heads_split(self, x: Tensor, batch: int, seq: int) -> Tensor:
        cfg = self.config
        dh = cfg.hidden_dim // cfg.heads
        return x.reshape(batch, seq, cfg.heads, dh).swapaxes(1, 2)

    def _mha(self, prefix: str, q_in: Tensor, kv_in: Tensor,
             mask: Optional[np.ndarray]) -> Tensor:
        """Multi-head attention; mask is an additive [.., Sq, Sk] array."""
        b, sq, d = q_in.shape
        sk = kv_in.shape[1]
        q = self._heads_split(q_in @ self.p(f"{prefix}.wq") + self.p(f"{prefix}.bq"), b, sq)
        k = self._heads_split(kv_in @ self.p(f"{prefix}.wk") + self.p(f"{prefix}.bk"), b, sk)
        v = self._heads_split(kv_in @ self.p(f"{prefix}.wv") + self.p(f"{prefix}.bv"), b, sk)
        dh = d // self.config.heads
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = ad.softmax(scores, axis=-1)
        ctx = (weights @ v).swapaxes(1, 2).reshape(b, sq, d)
        return ctx @ self.p(f"{prefix}.wo") + self.p(f"{prefix}.bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = (x @ self.p(f"{prefix}.w1") + self.p(f"{prefix}.b1")).relu()
        return h @ self.p(f"{prefix}.w2") + self.p(f"{prefix}.b2")

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.p(f"{prefix}.g"), self.p(f"{prefix}.b"))

    @staticmethod
    def _pad_attn_mask(valid: np.ndarray) -> np.ndarray:
        """[B, Sk] validity -> additive [B, 1, 1, Sk] mask."""
        return np.where(valid[:, None, None, :], 0.0, NEG_INF)

    def _encoder_stack(self, x: Tensor, valid: np.ndarray) -> Tensor:
        mask = self._pad_attn_mask(valid)
        for i in range(self.config.encoder_layers):
            h = self._ln(f"enc.{i}.ln1", x)
            x = x + self._mha(f"enc.{i}.attn", h, h, mask)
            x = x + self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x))
        return self._ln("enc.final_ln", x)

    # -- note encoding --

    def note_ids(self, note: str) -> List[int]:
        return self.tokenizer.encode(note)[: self.config.max_note_tokens]

    def _embed_tokens(self, ids: np.ndarray, pos_offset: int = 0) -> Tensor:
        emb = ad.embedding(self.p("emb"), ids)
        seq = ids.shape[-1]
        pos = ad.embedding(self.p("enc_pos"), np.arange(pos_offset, pos_offset + seq))
        return emb + pos

    # -- time-series encoder --

    def tse_encode(self, patch_values: np.ndarray, patch_mask: np.ndarray) -> Tensor:
        """patch_values: [B, N_PATCHES, PATCH_LEN * n_features] (padding steps
        already zeroed); patch_mask: [B, N_PATCHES] validity. Output [B, 125, d].
        Padding patches are masked out of the self-attention keys; an
        all-padding grid degrades to uniform attention and stays finite."""
        if patch_values.shape[1] != N_PATCHES:
            raise SchemaError(f"expected {N_PATCHES} patches, got {patch_values.shape[1]}")
        x = Tensor(patch_values) @ self.p("tse.proj.w") + self.p("tse.proj.b")
        x = x + ad.embedding(self.p("tse.pos"), np.arange(N_PATCHES))
        mask = self._pad_attn_mask(patch_mask.astype(bool))
        for i in range(self.config.tse_layers):
            h = self._ln(f"tse.{i}.ln1", x)
            x = x + self._mha(f"tse.{i}.attn", h, h, mask)
            x = x + self._ffn(f"tse.{i}.ffn", self._ln(f"tse.{i}.ln2", x))
        return self._ln("tse.final_ln", x)

    def patch_batch(self, records: List[EhrRecord]) -> Tuple[np.ndarray, np.ndarray]:
        """Stack per-record patch grids into [B, 125, 8*F] values and a
        [B, 125] patch-validity mask. Feature channels interleave per step."""
        values, masks = [], []
        for record in records:
            grid = pad_and_patch(record.labs)
            # [F, 125, 8] -> [125, 8, F] -> [125, 8*F]
            v = np.transpose(grid.values, (1, 2, 0)).reshape(N_PATCHES, -1)
            values.append(v)
            masks.append(grid.patch_mask)
        return np.stack(values), np.stack(masks)

    # -- knowledge attention --

    def ka_attend(self, te: Tensor, vk: KnowledgeVocab,
                  return_weights: bool = False):
        """Cross-attention: lab embeddings query the knowledge token rows of
        the shared embedding table. Output matches te's shape."""
        if len(vk) == 0:
            raise SchemaError("knowledge vocabulary is empty")
        d = self.config.hidden_dim
        ek = ad.embedding(self.p("emb"), np.asarray(vk.token_ids))   # [K, d]
        q = te @ self.p("ka.wq")
        k = ek @ self.p("ka.wk")
        v = ek @ self.p("ka.wv")
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
        weights = ad.softmax(scores, axis=-1)
        h = weights @ v
        if return_weights:
            return h, weights
        return h

    def fuse_labs(self, records: List[EhrRecord], vk: KnowledgeVocab) -> Tensor:
        values, mask = self.patch_batch(records)
        return self.ka_attend(self.tse_encode(values, mask), vk)

    # -- phase encoders --

    def encode_phase1(self, records: List[EhrRecord]) -> Tuple[Tensor, np.ndarray]:
        ids, valid = _pad_id_batch([self.note_ids(r.note) for r in records])
        x = self._embed_tokens(ids)
        return self._encoder_stack(x, valid), valid

    def encode_phase2(self, records: List[EhrRecord],
                      vk: KnowledgeVocab) -> Tuple[Tensor, np.ndarray]:
        h = self.fuse_labs(records, vk)
        valid = np.ones((len(records), N_PATCHES), dtype=bool)
        pos = ad.embedding(self.p("enc_pos"), np.arange(N_PATCHES))
        return self._encoder_stack(h + pos, valid), valid

    def encode_phase3(self, records: List[EhrRecord],
                      vk: KnowledgeVocab) -> Tuple[Tensor, np.ndarray]:
        """Encoder input: [fused lab sequence | <sep> embedding | note tokens],
        jointly encoded; positions run over the whole concatenation."""
        b = len(records)
        h = self.fuse_labs(records, vk)
        note_ids, note_valid = _pad_id_batch([self.note_ids(r.note) for r in records])
        sep_ids = np.full((b, 1), SEP, dtype=np.int64)
        tail_ids = np.concatenate([sep_ids, note_ids], axis=1)
        tail = ad.embedding(self.p("emb"), tail_ids)
        x = ad.concat([h, tail], axis=1)
        seq = x.shape[1]
        x = x + ad.embedding(self.p("enc_pos"), np.arange(seq))
        valid = np.concatenate(
            [np.ones((b, N_PATCHES + 1), dtype=bool), note_valid], axis=1)
        return self._encoder_stack(x, valid), valid

    # -- decoder --

    def _decoder_stack(self, dec_in_ids: np.ndarray, enc: Tensor,
                       enc_valid: np.ndarray) -> Tensor:
        b, t = dec_in_ids.shape
        x = ad.embedding(self.p("emb"), dec_in_ids)
        x = x + ad.embedding(self.p("dec_pos"), np.arange(t))
        causal = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, NEG_INF)
        self_mask = causal[None, None, :, :] + self._pad_attn_mask(dec_in_ids != PAD)
        cross_mask = self._pad_attn_mask(enc_valid)
        for i in range(self.config.decoder_layers):
            h = self._ln(f"dec.{i}.ln1", x)
            x = x + self._mha(f"dec.{i}.self", h, h, self_mask)
            x = x + self._mha(f"dec.{i}.cross", self._ln(f"dec.{i}.ln2", x), enc, cross_mask)
            x = x + self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", x))
        return self._ln("dec.final_ln", x)

    def _logits(self, dec_out: Tensor) -> Tensor:
        return dec_out @ self.p("emb").swapaxes(0, 1)   # tied output projection

    def forward_loss(self, enc: Tensor, enc_valid: np.ndarray,
                     target_ids: np.ndarray) -> Tensor:
        """Teacher-forced mean token cross-entropy; target rows are
        [token..., EOS, PAD...] and the decoder input is BOS-shifted."""
        b, t = target_ids.shape
        dec_in = np.concatenate(
            [np.full((b, 1), BOS, dtype=np.int64), target_ids[:, :-1]], axis=1)
        dec_out = self._decoder_stack(dec_in, enc, enc_valid)
        return ad.cross_entropy(self._logits(dec_out), target_ids, PAD)

    def target_ids(self, record: EhrRecord, registry: LabelRegistry,
                   include_note_rationale: bool = True,
                   include_lab_rationale: bool = True) -> List[int]:
        text = serialize_target(record, registry, include_note_rationale,
                                include_lab_rationale)
        ids = self.tokenizer.encode(text)[: self.config.max_target_tokens - 1]
        return ids + [EOS]

    def generate(self, enc: Tensor, enc_valid: np.ndarray, max_len: int) -> List[str]:
        """Greedy decoding, stopping per row at EOS or max_len."""
        b = enc.shape[0]
        with ad.no_grad():
            ids = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            for _ in range(max_len):
                dec_out = self._decoder_stack(ids, enc, enc_valid)
                last = self._logits(dec_out).data[:, -1, :].copy()
                last[:, PAD] = -np.inf     # never emit padding
                nxt = last.argmax(axis=-1)
                nxt = np.where(done, PAD, nxt)
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        return [self.tokenizer.decode(row[1:]) for row in ids]


def _pad_id_batch(id_lists: List[List[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists to a common length; empty batches get length 1 so
    downstream shapes stay valid."""
    max_len = max(1, max((len(x) for x in id_lists), default=1))
    ids = np.full((len(id_lists), max_len), PAD, dtype=np.int64)
    valid = np.zeros((len(id_lists), max_len), dtype=bool)
    for i, row in enumerate(id_lists):
        ids[i, : len(row)] = row
        valid[i, : len(row)] = True
    if not valid.any():
        valid[:, 0] = True    # degenerate all-empty batch: keep softmax finite
    return ids, valid
