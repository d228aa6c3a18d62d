"""Encoder-decoder transformer that exposes every encoder layer's output.

Post-norm residual blocks, sinusoidal positions, and a decoder whose
cross-attention source is pluggable: the final encoder layer (vanilla), a
per-decoder-layer fusion of all encoder layers, or vanilla wiring plus a
surface head feeding the output distribution.

Every parameter and dropout site draws from its own named random stream, so
a given seed initializes shared parameters identically no matter which
optional modules (fusion weights, surface head) exist alongside them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fusion as F
from . import surface as S
from . import tensor as T
from .errors import ConfigError, InvalidParameterError, SequenceLengthError
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttentionLayer,
    causal_mask,
    padding_mask,
    sinusoid_positions,
)
from .tensor import Rng, Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_src: int = 32
    vocab_tgt: int = 32
    tie_embeddings: bool = True
    dropout: float = 0.1
    max_len: int = 64
    dtype: str = "float64"

    def validate(self) -> None:
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_src < 4 or self.vocab_tgt < 4:
            raise ConfigError("vocabularies must reserve pad/bos/eos/unk (size >= 4)")
        if self.tie_embeddings and self.vocab_src != self.vocab_tgt:
            raise ConfigError("tied embeddings need a joint vocabulary")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class LayerOutputs:
    """All encoder layer outputs for one batch, plus the position-free
    embeddings fusion consumers substitute for index 0."""

    layers: list[Tensor]
    x_emb: Tensor
    src_ids: np.ndarray
    attn_mask: np.ndarray = field(repr=False)


class EncoderLayer:
    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        dt = cfg.np_dtype
        self.self_attn = MultiHeadAttentionLayer(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng, dt)
        self.norm1 = LayerNorm(f"{name}.norm1", cfg.d_model, dt)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, rng, dt)
        self.norm2 = LayerNorm(f"{name}.norm2", cfg.d_model, dt)

    def __call__(self, x, mask, drop, training):
        x = self.norm1(x + drop("attn", self.self_attn(x, x, x, mask)))
        x = self.norm2(x + drop("ff", self.ff(x)))
        return x

    def named_parameters(self):
        for part in (self.self_attn, self.norm1, self.ff, self.norm2):
            yield from part.named_parameters()


class DecoderLayer:
    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        dt = cfg.np_dtype
        self.self_attn = MultiHeadAttentionLayer(f"{name}.self_attn", cfg.d_model, cfg.n_heads, rng, dt)
        self.norm1 = LayerNorm(f"{name}.norm1", cfg.d_model, dt)
        self.cross_attn = MultiHeadAttentionLayer(f"{name}.cross_attn", cfg.d_model, cfg.n_heads, rng, dt)
        self.norm2 = LayerNorm(f"{name}.norm2", cfg.d_model, dt)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, rng, dt)
        self.norm3 = LayerNorm(f"{name}.norm3", cfg.d_model, dt)

    def __call__(self, y, source, self_mask, cross_mask, drop, training):
        y = self.norm1(y + drop("self", self.self_attn(y, y, y, self_mask)))
        y = self.norm2(y + drop("cross", self.cross_attn(y, source, source, cross_mask)))
        y = self.norm3(y + drop("ff", self.ff(y)))
        return y

    def named_parameters(self):
        for part in (self.self_attn, self.norm1, self.cross_attn, self.norm2, self.ff, self.norm3):
            yield from part.named_parameters()


class Seq2Seq:
    """Transformer with pluggable encoder-fusion behavior."""

    def __init__(self, config: ModelConfig, fusion_cfg: S.FusionConfig | None = None, seed: int = 0):
        config.validate()
        fusion_cfg = fusion_cfg or S.FusionConfig()
        fusion_cfg.validate()
        self.config = config
        self.fusion_cfg = fusion_cfg
        self.seed = seed
        self.layer_mask: int | None = None  # masking diagnostic, eval only

        root = Rng(seed)
        dt = config.np_dtype
        d = config.d_model

        def embed_init(name, vocab):
            init = root.spawn(f"param:{name}").uniform(-0.1, 0.1, (vocab, d))
            return Tensor(init.astype(dt), requires_grad=True)

        self.src_embed = embed_init("src_embed", config.vocab_src)
        if config.tie_embeddings:
            self.tgt_embed = self.src_embed
            self.out_weight = self.src_embed
        else:
            self.tgt_embed = embed_init("tgt_embed", config.vocab_tgt)
            self.out_weight = embed_init("out_weight", config.vocab_tgt)

        self.positions = sinusoid_positions(config.max_len, d, dt)
        self.enc_layers = [EncoderLayer(f"encoder.{i}", config, root) for i in range(config.n_enc_layers)]
        self.dec_layers = [DecoderLayer(f"decoder.{i}", config, root) for i in range(config.n_dec_layers)]

        self.fusion_weights: F.FusionWeights | None = None
        if fusion_cfg.is_layer_fusion:
            n_sources = 2 if fusion_cfg.mode == "fine-uppermost" else config.n_enc_layers + 1
            n_slots = 1 if fusion_cfg.mode == "fine-uppermost" else config.n_dec_layers
            dim = 1 if fusion_cfg.mode == "coarse" else d
            self.fusion_weights = F.FusionWeights(n_slots, n_sources, dim, fusion_cfg.dropconnect, dt)

        self.surface_head: S.SurfaceHead | None = None
        if fusion_cfg.is_surface:
            self.surface_head = S.SurfaceHead(d, config.n_heads, root, dt)

        self._drop_rngs = {}
        self._drop_root = root
        self._dropconnect_rng = root.spawn("drop:fusion.dropconnect")

    # ------------------------------------------------------------------
    # parameters and dropout plumbing

    def named_parameters(self):
        yield "src_embed", self.src_embed
        if not self.config.tie_embeddings:
            yield "tgt_embed", self.tgt_embed
            yield "out_weight", self.out_weight
        for layer in self.enc_layers:
            yield from layer.named_parameters()
        for layer in self.dec_layers:
            yield from layer.named_parameters()
        if self.fusion_weights is not None:
            yield from self.fusion_weights.named_parameters()
        if self.surface_head is not None:
            yield from self.surface_head.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _dropper(self, site: str, training: bool):
        """Per-site dropout closure so streams never depend on sibling modules."""
        p = self.config.dropout

        def drop(tag: str, x: Tensor) -> Tensor:
            if not training or p == 0.0:
                return x
            key = f"drop:{site}.{tag}"
            rng = self._drop_rngs.get(key)
            if rng is None:
                rng = self._drop_rngs[key] = self._drop_root.spawn(key)
            return T.dropout(x, p, rng, training)

        return drop

    # ------------------------------------------------------------------
    # forward passes

    def _embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        return T.embedding(table, ids) * math.sqrt(self.config.d_model)

    def encode(self, src_ids: np.ndarray, training: bool = False) -> LayerOutputs:
        """Run the encoder stack, returning all layer outputs and the
        position-free embeddings."""
        src_ids = np.asarray(src_ids)
        if src_ids.ndim == 1:
            src_ids = src_ids[None, :]
        b, length = src_ids.shape
        if length == 0 or not ((src_ids != PAD_ID).any(axis=1)).all():
            raise SequenceLengthError("empty source sequence")
        if length > self.config.max_len:
            raise SequenceLengthError(f"source length {length} exceeds max_len {self.config.max_len}")
        if src_ids.max() >= self.config.vocab_src or src_ids.min() < 0:
            raise IndexError("source token id outside the vocabulary")

        x_emb = self._embed(self.src_embed, src_ids)
        x = x_emb + Tensor(self.positions[None, :length])
        x = self._dropper("enc_in", training)("emb", x)
        mask = padding_mask(src_ids, PAD_ID, self.config.np_dtype)
        layers = [x]
        for i, layer in enumerate(self.enc_layers):
            x = layer(x, mask, self._dropper(f"enc{i}", training), training)
            layers.append(x)
        return LayerOutputs(layers=layers, x_emb=x_emb, src_ids=src_ids, attn_mask=mask)

    def _sources(self, outputs: LayerOutputs, training: bool) -> list[Tensor]:
        cfg = self.fusion_cfg
        if not cfg.is_layer_fusion:
            return [outputs.layers[-1]] * self.config.n_dec_layers
        return F.decoder_sources(
            outputs,
            self.fusion_weights,
            cfg.mode,
            self.config.n_dec_layers,
            self._dropconnect_rng,
            training,
            layer_mask=self.layer_mask,
            dropconnect_on=cfg.dropconnect_on,
        )

    def decode(self, tgt_in_ids: np.ndarray, outputs: LayerOutputs, training: bool = False,
               last_only: bool = False, compute_surface: bool = True) -> dict:
        """Teacher-forced decoder pass.

        Returns decoder pre-softmax logits plus (for surface modes) the
        surface log-distribution; `last_only` restricts the output
        projection to the final position for incremental decoding.
        """
        tgt_in_ids = np.asarray(tgt_in_ids)
        if tgt_in_ids.ndim == 1:
            tgt_in_ids = tgt_in_ids[None, :]
        b, length = tgt_in_ids.shape
        if length == 0:
            raise SequenceLengthError("empty target prefix; prefixes start with BOS")
        if length > self.config.max_len:
            raise SequenceLengthError(f"target length {length} exceeds max_len {self.config.max_len}")
        if not (tgt_in_ids[:, 0] == BOS_ID).all():
            raise InvalidParameterError("target prefix must begin with BOS")

        y = self._embed(self.tgt_embed, tgt_in_ids) + Tensor(self.positions[None, :length])
        y = self._dropper("dec_in", training)("emb", y)
        self_mask = causal_mask(length, self.config.np_dtype)
        sources = self._sources(outputs, training)
        for i, layer in enumerate(self.dec_layers):
            y = layer(y, sources[i], self_mask, outputs.attn_mask,
                      self._dropper(f"dec{i}", training), training)

        y_out = y[:, -1:, :] if last_only else y
        logits = T.matmul(y_out, T.transpose(self.out_weight, (1, 0)))
        result = {"decoder_out": y, "logits": logits}

        if self.fusion_cfg.is_surface and compute_surface:
            q = y[:, -1:, :] if last_only else y
            r = self.surface_head(
                self._dropper("surface", training)("r", q),
                outputs.layers[-1], outputs.x_emb, outputs.attn_mask,
            )
            result["surface_log_p"] = S.surface_log_probability(r, self.out_weight, self.fusion_cfg.tau)
        return result

    def surface_decode_state(self, outputs: LayerOutputs) -> S.SurfaceDecodeState | None:
        """Per-sentence cache for fast fused decoding (None outside surface modes)."""
        if not self.fusion_cfg.is_surface:
            return None
        return S.SurfaceDecodeState(self.surface_head, outputs.layers[-1].data,
                                    outputs.x_emb.data, outputs.attn_mask,
                                    self.fusion_cfg.tau)

    def position_scores(self, outputs: LayerOutputs, tgt_in_ids: np.ndarray,
                        training: bool = False, last_only: bool = False,
                        surface_state: S.SurfaceDecodeState | None = None) -> dict:
        """Per-position token scores used for both the loss and ranking.

        "score" is log P for vanilla/layer-fusion and soft fusion; for hard
        fusion it is the unnormalized interpolated log-score (ranking is
        unaffected within a position). A SurfaceDecodeState short-circuits
        the surface computation with cached encoder projections (inference
        only, requires last_only).
        """
        use_cache = surface_state is not None and self.fusion_cfg.is_surface
        if use_cache and not last_only:
            raise InvalidParameterError("surface decode cache only produces last-position scores")
        decoded = self.decode(tgt_in_ids, outputs, training=training, last_only=last_only,
                              compute_surface=not use_cache)
        if use_cache:
            decoded["score"] = Tensor(
                surface_state.fused_scores(decoded["logits"].data,
                                           decoded["decoder_out"].data[:, -1:, :],
                                           self.out_weight.data, self.fusion_cfg))
            return decoded
        logits = decoded["logits"]
        mode = self.fusion_cfg.mode
        if mode == "surface-hard":
            log_p_dec = T.log_softmax(logits, axis=-1)
            score = S.hard_fuse(log_p_dec, decoded["surface_log_p"], self.fusion_cfg.lambda_,
                                renormalize=self.fusion_cfg.renormalize_hard)
            decoded["log_p_decoder"] = log_p_dec
        elif mode == "surface-soft":
            score = S.soft_fuse(logits, decoded["surface_log_p"])
        else:
            score = T.log_softmax(logits, axis=-1)
        decoded["score"] = score
        return decoded

    def loss_on_batch(self, batch, training: bool = False, label_smoothing: float = 0.0):
        """Mean per-token loss over non-pad targets, plus count stats."""
        outputs = self.encode(batch.src, training=training)
        decoded = self.position_scores(outputs, batch.tgt_in, training=training)
        loss = T.cross_entropy(decoded["score"], batch.tgt_out, PAD_ID, smoothing=label_smoothing)
        pred = decoded["score"].data.argmax(axis=-1)
        mask = batch.tgt_out != PAD_ID
        stats = {
            "ntokens": int(mask.sum()),
            "ncorrect": int((pred[mask] == batch.tgt_out[mask]).sum()),
        }
        return loss, stats
