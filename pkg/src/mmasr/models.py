"""Attentive seq2seq ASR and its four visual-fusion variants.

Encoder: stacked BiLSTM, ``tanh`` after every layer. Decoder per step::

    h1  = GRU1(embed(y_prev) [; f'], h1)
    z   = Attention(E, h1)
    z   = HierAttention({W_z z, W_hf f'}, h1)       # hierarchical variant only
    h2  = GRU2(z, h1)
    logits = table . tanh(W_o h2 + b_o)              # tied embedding

Visual vector ``f`` enters through the variant:

=================  =================================================
enc-init           encoder h0 = tanh(W_v f + b_v)
enc-dec-init       encoder h0 = tanh(W_e f + b_e), h1_0 = tanh(W_d f + b_d)
early-fusion       f' = tanh(W_f f + b_f) concatenated to every input
hier-attn          f' = tanh(W_p f + b_p) as a second attention candidate
=================  =================================================
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .data import BOS, EOS, Batch, ManifestRecord, Vocabulary, collate
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


class FusionVariant(str, Enum):
    BASELINE = "baseline"
    ENCODER_INIT = "enc-init"
    ENCODER_DECODER_INIT = "enc-dec-init"
    EARLY_DECODER_FUSION = "early-fusion"
    HIERARCHICAL_FEATURE_ATTENTION = "hier-attn"

    @property
    def multimodal(self) -> bool:
        return self is not FusionVariant.BASELINE


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int = 43
    visual_dim: int = 2048
    hidden: int = 256
    embed_dim: int = 256
    encoder_layers: int = 6
    att_dim: int | None = None
    dropout: float = 0.4

    @property
    def attention_dim(self) -> int:
        return self.att_dim or self.hidden


_FUSION_PARAMS = {
    FusionVariant.BASELINE: (),
    FusionVariant.ENCODER_INIT: ("vis.w_v", "vis.b_v"),
    FusionVariant.ENCODER_DECODER_INIT: ("vis.w_e", "vis.b_e", "vis.w_d", "vis.b_d"),
    FusionVariant.EARLY_DECODER_FUSION: ("vis.w_f", "vis.b_f"),
    FusionVariant.HIERARCHICAL_FEATURE_ATTENTION: (
        "vis.w_p", "vis.b_p", "hier.w_z", "hier.w_f", "hier.att.w_k", "hier.att.w_q", "hier.att.v",
    ),
}


class ModelParams:
    """Named parameter tensors for one model instance."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig, variant: FusionVariant):
        self.tensors = tensors
        self.config = config
        self.variant = variant
        missing = [n for n in _FUSION_PARAMS[variant] if n not in tensors]
        extra = [n for v, names in _FUSION_PARAMS.items() if v is not variant for n in names
                 if n in tensors and n not in _FUSION_PARAMS[variant]]
        if missing or extra:
            raise ValueError(f"{variant.value}: missing fusion params {missing}, unexpected {extra}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def _lstm(self, prefix) -> L.LSTMCellParams:
        t = self.tensors
        return L.LSTMCellParams(t[prefix + "w_ih"], t[prefix + "w_hh"], t[prefix + "b"])

    def _gru(self, prefix) -> L.GRUCellParams:
        t = self.tensors
        return L.GRUCellParams(t[prefix + "w_ih"], t[prefix + "w_hh"], t[prefix + "b_ih"], t[prefix + "b_hh"])

    def _att(self, prefix) -> L.AttentionParams:
        t = self.tensors
        return L.AttentionParams(t[prefix + "w_k"], t[prefix + "w_q"], t[prefix + "v"])

    def encoder_layers(self):
        return [(self._lstm(f"enc.{i}.fwd."), self._lstm(f"enc.{i}.bwd."))
                for i in range(self.config.encoder_layers)]

    @property
    def gru1(self):
        return self._gru("dec.gru1.")

    @property
    def gru2(self):
        return self._gru("dec.gru2.")

    @property
    def att(self):
        return self._att("dec.att.")

    @property
    def hier_att(self):
        return self._att("hier.att.")

    @classmethod
    def init(cls, config: ModelConfig, variant: FusionVariant, seed: int = 0) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) initialisation, seeded per parameter name."""
        H, D, Dv, A = config.hidden, config.embed_dim, config.visual_dim, config.attention_dim
        t: dict[str, Tensor] = {}

        def add(prefix, p):
            for f, tensor in p.__dict__.items():
                tensor.name = prefix + f
                t[prefix + f] = tensor

        def rng(name):
            return derive_rng(seed, "init", name)

        for i in range(config.encoder_layers):
            in_dim = config.feat_dim if i == 0 else 2 * H
            for d in ("fwd", "bwd"):
                pre = f"enc.{i}.{d}."
                add(pre, L.LSTMCellParams.init(rng(pre), in_dim, H))
        gru1_in = D + (H if variant is FusionVariant.EARLY_DECODER_FUSION else 0)
        add("dec.gru1.", L.GRUCellParams.init(rng("gru1"), gru1_in, H))
        add("dec.att.", L.AttentionParams.init(rng("att"), 2 * H, H, A))
        add("dec.gru2.", L.GRUCellParams.init(rng("gru2"), 2 * H, H))
        t["emb.table"] = L.uniform_init(rng("emb"), (config.vocab_size, D), D, "emb.table")
        t["out.w_o"] = L.uniform_init(rng("out.w"), (D, H), H, "out.w_o")
        t["out.b_o"] = L.uniform_init(rng("out.b"), (D,), H, "out.b_o")

        def proj(w, b, out_dim):
            t[w] = L.uniform_init(rng(w), (out_dim, Dv), Dv, w)
            t[b] = L.uniform_init(rng(b), (out_dim,), Dv, b)

        if variant is FusionVariant.ENCODER_INIT:
            proj("vis.w_v", "vis.b_v", H)
        elif variant is FusionVariant.ENCODER_DECODER_INIT:
            proj("vis.w_e", "vis.b_e", H)
            proj("vis.w_d", "vis.b_d", H)
        elif variant is FusionVariant.EARLY_DECODER_FUSION:
            proj("vis.w_f", "vis.b_f", H)
        elif variant is FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
            proj("vis.w_p", "vis.b_p", H)
            # both candidates live in the 2H context space
            t["hier.w_z"] = L.uniform_init(rng("hier.w_z"), (2 * H, 2 * H), 2 * H, "hier.w_z")
            t["hier.w_f"] = L.uniform_init(rng("hier.w_f"), (2 * H, H), H, "hier.w_f")
            add("hier.att.", L.AttentionParams.init(rng("hier.att"), 2 * H, H, A))
        return cls(t, config, variant)


@dataclass
class DecoderState:
    h1: Tensor
    h2: Tensor
    last_token: np.ndarray = field(default_factory=lambda: np.array([BOS]))


@dataclass
class _Context:
    """Per-utterance decoder inputs computed once."""

    E: Tensor
    keys: Tensor
    mask: np.ndarray | None
    f_prime: Tensor | None = None
    f_cand: Tensor | None = None


class ASRModel:
    """One seq2seq model; the fusion variant selects how ``visual`` is used."""

    def __init__(self, params: ModelParams, vocab: Vocabulary):
        if len(vocab) != params.config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries, model expects {params.config.vocab_size}")
        self.params = params
        self.vocab = vocab

    @classmethod
    def create(cls, config: ModelConfig, variant, vocab: Vocabulary, seed: int = 0) -> "ASRModel":
        return cls(ModelParams.init(config, FusionVariant(variant), seed), vocab)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def variant(self) -> FusionVariant:
        return self.params.variant

    # -- input checks -----------------------------------------------------

    def _visual(self, visual, batch_size: int) -> Tensor | None:
        if not self.variant.multimodal:
            return None
        if visual is None:
            raise ValueError(f"variant {self.variant.value} needs a visual feature vector")
        v = np.asarray(visual.data if isinstance(visual, Tensor) else visual, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape != (batch_size, self.config.visual_dim):
            raise ValueError(f"visual input shape {v.shape}, expected ({batch_size}, {self.config.visual_dim})")
        return Tensor(v)

    @staticmethod
    def _features(features) -> Tensor:
        f = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
        if f.ndim == 2:
            f = T.reshape(f, (1,) + f.shape)
        return f

    # -- model pieces ---------------------------------------------------

    def encoder_h0(self, visual, batch_size: int = 1) -> Tensor | None:
        p, v = self.params, self.variant
        f = self._visual(visual, batch_size)
        if v is FusionVariant.ENCODER_INIT:
            return T.tanh(T.linear(f, p["vis.w_v"], p["vis.b_v"]))
        if v is FusionVariant.ENCODER_DECODER_INIT:
            return T.tanh(T.linear(f, p["vis.w_e"], p["vis.b_e"]))
        return None

    def encode(self, features, visual=None, lengths=None, mode: str = "eval", rng=None) -> Tensor:
        """Encoder states (B, T, 2H) for (T, F) or (B, T, F) features."""
        x = self._features(features)
        h0 = self.encoder_h0(visual, x.shape[0])
        E = L.bilstm_encoder(x, self.params.encoder_layers(), h0=h0, lengths=lengths)
        return L.dropout(E, self.config.dropout, mode, rng)

    def init_decoder(self, visual=None, batch_size: int = 1) -> DecoderState:
        H = self.config.hidden
        f = self._visual(visual, batch_size)
        if self.variant is FusionVariant.ENCODER_DECODER_INIT:
            h1 = T.tanh(T.linear(f, self.params["vis.w_d"], self.params["vis.b_d"]))
        else:
            h1 = Tensor(np.zeros((batch_size, H)))
        return DecoderState(h1, Tensor(np.zeros((batch_size, H))), np.full(batch_size, BOS))

    def _context(self, E: Tensor, visual, lengths=None) -> _Context:
        if E.ndim == 2:
            E = T.reshape(E, (1,) + E.shape)
        if E.shape[1] == 0:
            raise ValueError("empty encoder states")
        B = E.shape[0]
        mask = None
        if lengths is not None:
            mask = np.arange(E.shape[1])[None, :] < np.asarray(lengths)[:, None]
        ctx = _Context(E, T.linear(E, self.params.att.w_k), mask)
        p, v = self.params, self.variant
        if v is FusionVariant.EARLY_DECODER_FUSION:
            ctx.f_prime = T.tanh(T.linear(self._visual(visual, B), p["vis.w_f"], p["vis.b_f"]))
        elif v is FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
            ctx.f_prime = T.tanh(T.linear(self._visual(visual, B), p["vis.w_p"], p["vis.b_p"]))
            ctx.f_cand = T.linear(ctx.f_prime, p["hier.w_f"])
        return ctx

    def _step(self, prev_tokens, state: DecoderState, ctx: _Context, mode="eval", rng=None):
        p = self.params
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
        x = L.embed(prev, p["emb.table"])
        if self.variant is FusionVariant.EARLY_DECODER_FUSION:
            x = T.concat([x, ctx.f_prime], axis=1)
        h1 = L.gru_cell_step(x, state.h1, p.gru1)
        z, weights = L.attention(ctx.E, h1, p.att, mask=ctx.mask, keys=ctx.keys)
        if self.variant is FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
            z_cand = T.linear(z, p["hier.w_z"])
            cands = T.stack([z_cand, ctx.f_cand], axis=1)
            z, _ = L.attention(cands, h1, p.hier_att)
        h2 = L.gru_cell_step(z, h1, p.gru2)
        out = L.dropout(h2, self.config.dropout, mode, rng)
        logits = L.output_logits(out, p["emb.table"], p["out.w_o"], p["out.b_o"])
        return logits, DecoderState(h1, h2, prev), weights

    def decode_step(self, prev_token, state: DecoderState, E: Tensor, visual=None, lengths=None):
        """Advance the decoder one token.

        Returns:
            ``(logits (B, |V|), new state, attention weights (B, T))``.
        """
        if state.h1.shape[-1] != self.config.hidden:
            raise ValueError(f"decoder state width {state.h1.shape[-1]} != hidden {self.config.hidden}")
        ctx = self._context(E, visual, lengths)
        return self._step(prev_token, state, ctx)

    def hierarchical_context(self, z: Tensor, visual, query: Tensor):
        """Second-level attention over {W_z z, W_hf f'}; returns (z_hier, weights, candidates)."""
        if self.variant is not FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
            raise ValueError("hierarchical context needs the hier-attn variant")
        p = self.params
        B = z.shape[0]
        f_prime = T.tanh(T.linear(self._visual(visual, B), p["vis.w_p"], p["vis.b_p"]))
        cands = T.stack([T.linear(z, p["hier.w_z"]), T.linear(f_prime, p["hier.w_f"])], axis=1)
        z_hier, w = L.attention(cands, query, p.hier_att)
        return z_hier, w, cands

    # -- training objective ---------------------------------------------

    def forward_loss(self, batch, mode: str = "eval", rng=None, stats: dict | None = None) -> Tensor:
        """Teacher-forced mean token cross-entropy over non-padding targets."""
        if not isinstance(batch, Batch):
            batch = collate(batch, self.vocab)
        if stats is not None and batch.skipped:
            stats["skipped_empty"] = stats.get("skipped_empty", 0) + batch.skipped
        B = len(batch)
        E = self.encode(batch.features, batch.visual, batch.lengths, mode, rng)
        state = self.init_decoder(batch.visual, B)
        ctx = self._context(E, batch.visual, batch.lengths)
        total = None
        for t in range(batch.targets.shape[1] - 1):
            logits, state, _ = self._step(batch.targets[:, t], state, ctx, mode, rng)
            ce = T.cross_entropy(logits, batch.targets[:, t + 1], batch.target_mask[:, t + 1])
            total = ce if total is None else total + ce
        n_tokens = int(batch.target_mask[:, 1:].sum())
        return total * (1.0 / n_tokens)

    # -- inference ----------------------------------------------------------

    def greedy_decode_batch(self, batch: Batch, max_len: int = 50) -> list[list[int]]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        with T.no_grad():
            B = len(batch)
            E = self.encode(batch.features, batch.visual, batch.lengths)
            state = self.init_decoder(batch.visual, B)
            ctx = self._context(E, batch.visual, batch.lengths)
            prev = np.full(B, BOS)
            out: list[list[int]] = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logits, state, _ = self._step(prev, state, ctx)
                prev = np.argmax(logits.data, axis=1)  # first max = lowest id
                for i in range(B):
                    if not done[i]:
                        if prev[i] == EOS:
                            done[i] = True
                        else:
                            out[i].append(int(prev[i]))
                if done.all():
                    break
        return out

    def greedy_decode(self, features, visual=None, max_len: int = 50) -> list[int]:
        """Argmax decoding of one utterance; EOS is not included in the output."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
        rec = Batch(["_"], x[None], np.array([x.shape[0]]),
                    None if visual is None else np.asarray(visual, dtype=np.float64).reshape(1, -1),
                    np.zeros((1, 2), dtype=np.int64), np.ones((1, 2), dtype=bool))
        return self.greedy_decode_batch(rec, max_len)[0]

    def _single_context(self, features, visual):
        x = self._features(features)
        E = self.encode(x, visual)
        return self._context(E, visual), self.init_decoder(visual, 1)

    def sequence_score(self, features, visual, tokens: Sequence[int], finished: bool = True) -> float:
        """Length-normalised log-probability of ``tokens`` (+EOS if ``finished``)."""
        with T.no_grad():
            ctx, state = self._single_context(features, visual)
            seq = list(tokens) + ([EOS] if finished else [])
            prev, total = BOS, 0.0
            for tok in seq:
                logits, state, _ = self._step([prev], state, ctx)
                total += float(T.log_softmax(logits).data[0, tok])
                prev = tok
        return total / max(len(seq), 1)

    def beam_decode(self, features, visual=None, beam_size: int = 5, max_len: int = 50) -> list[int]:
        """Beam search ranked by log-probability per emitted token.

        Prefixes are pruned on cumulative log-probability; finished
        hypotheses (and those cut at ``max_len``) compete on the
        length-normalised score. The greedy hypothesis always joins the
        final pool, so the result never scores below it.
        """
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        with T.no_grad():
            ctx, state0 = self._single_context(features, visual)
            beams = [((), 0.0, state0)]
            pool: list[tuple[float, tuple[int, ...]]] = []
            for step in range(max_len):
                cands = []
                for bi, (toks, lp, st) in enumerate(beams):
                    prev = toks[-1] if toks else BOS
                    logits, new_st, _ = self._step([prev], st, ctx)
                    logp = T.log_softmax(logits).data[0]
                    for tok in range(len(logp)):
                        cands.append((-(lp + logp[tok]), bi, tok, new_st))
                cands.sort(key=lambda c: (c[0], c[1], c[2]))
                prev_beams, beams = beams, []
                for neg, bi, tok, st in cands[:beam_size]:
                    toks = prev_beams[bi][0] + (tok,)
                    if tok == EOS:
                        pool.append((-neg / len(toks), toks[:-1]))
                    else:
                        beams.append((toks, -neg, st))
                if not beams:
                    break
            for toks, lp, _ in beams:
                if len(toks) == max_len:
                    pool.append((lp / len(toks), toks))
        greedy = tuple(self.greedy_decode(features, visual, max_len))
        finished = len(greedy) < max_len
        pool.append((self.sequence_score(features, visual, greedy, finished), greedy))
        best = max(pool, key=lambda s: s[0])
        return list(best[1])

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "variant": self.variant.value,
            "config": asdict(self.config),
            "vocab": self.vocab.itos,
            "names": self.params.names(),
        }
        arrays = {f"p{i}": t.data for i, t in enumerate(self.params)}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ASRModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            tensors = {name: Tensor(z[f"p{i}"].copy(), requires_grad=True, name=name)
                       for i, name in enumerate(meta["names"])}
        config = ModelConfig(**meta["config"])
        vocab = Vocabulary(meta["vocab"][4:])
        return cls(ModelParams(tensors, config, FusionVariant(meta["variant"])), vocab)


# ---------------------------------------------------------------------------
# variant reduction helpers


def transplant_core(src: ASRModel, dst: ASRModel) -> None:
    """Copy every shared (non-fusion) weight of ``src`` into ``dst``.

    The early-fusion GRU1 input matrix is wider; the baseline part is copied
    into its leading columns.
    """
    for name, t in src.params.tensors.items():
        if name not in dst.params.tensors:
            continue
        d = dst.params[name].data
        if d.shape == t.data.shape:
            d[...] = t.data
        elif name == "dec.gru1.w_ih":
            d[:, : t.data.shape[1]] = t.data
        else:
            raise ValueError(f"cannot transplant {name}: {t.data.shape} -> {d.shape}")


def reduce_to_baseline(model: ASRModel) -> None:
    """Zero the fusion parameters (and the weights that consume them) in place.

    For hier-attn the zeroed second attention weighs both candidates 1/2,
    so the z projection is set to 2I to hand GRU2 the plain context.
    """
    p, v = model.params, model.variant
    for name in _FUSION_PARAMS[v]:
        p[name].data[...] = 0.0
    if v is FusionVariant.EARLY_DECODER_FUSION:
        p["dec.gru1.w_ih"].data[:, model.config.embed_dim :] = 0.0
    if v is FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
        p["hier.w_z"].data[...] = 2.0 * np.eye(2 * model.config.hidden)


def warm_start(base: ASRModel, variant, seed: int = 0, visual_dim: int | None = None) -> ASRModel:
    """A fresh ``variant`` model carrying ``base``'s trained core weights.

    The visual pathway keeps its random initialisation. For hier-attn the
    context projection starts at the identity and the second attention at
    equal weights, so neither candidate is favoured before training.
    """
    config = base.config if visual_dim is None else replace(base.config, visual_dim=visual_dim)
    model = ASRModel.create(config, variant, base.vocab, seed=seed)
    transplant_core(base, model)
    if model.variant is FusionVariant.HIERARCHICAL_FEATURE_ATTENTION:
        model.params["hier.w_z"].data[...] = np.eye(2 * model.config.hidden)
        model.params["hier.att.v"].data[...] = 0.0
    return model


def fusion_param_names(variant) -> tuple[str, ...]:
    return _FUSION_PARAMS[FusionVariant(variant)]


def load_checkpoint(path) -> ASRModel:
    return ASRModel.load(path)
