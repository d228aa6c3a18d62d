"""Surface fusion: route the encoder embedding layer into the softmax.

A dedicated multi-head attention reads decoder outputs as queries, final
encoder outputs as keys, and the position-free encoder embeddings as values,
producing a surface vector r per target position. r times the shared
pre-softmax weight, through a temperature softmax, gives a source-only token
distribution that is fused with the decoder's own distribution either with a
fixed interpolation weight in log space (hard) or by adding the surface
log-probabilities onto the decoder logits before the softmax (soft).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvalidParameterError
from .layers import MultiHeadAttentionLayer
from .tensor import Rng, Tensor

FUSION_MODES = ("none", "coarse", "fine", "fine-uppermost", "surface-hard", "surface-soft")


@dataclass
class FusionConfig:
    """How (and whether) encoder layers are fused into the decoder.

    lambda_ is the hard-fusion interpolation weight; tau the surface softmax
    temperature (1 works for hard fusion, 5 for soft); dropconnect applies
    to the raw layer-attention weights in the layer-fusion modes. The raw
    (unnormalized) weights are what DropConnect zeroes by default; set
    dropconnect_on="normalized" to drop the softmaxed weights instead.
    renormalize_hard turns the hard-fused score back into a proper
    log-distribution before use (off by default: the interpolated score is
    used directly for the loss and for ranking).
    """

    mode: str = "none"
    lambda_: float = 0.9
    tau: float = 1.0
    dropconnect: float = 0.0
    dropconnect_on: str = "raw"
    renormalize_hard: bool = False

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; pick one of {FUSION_MODES}")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError(f"fusion lambda must be in [0, 1], got {self.lambda_}")
        if not self.tau > 0:
            raise ConfigError(f"fusion tau must be > 0, got {self.tau}")
        if not 0.0 <= self.dropconnect < 1.0:
            raise ConfigError(f"dropconnect must be in [0, 1), got {self.dropconnect}")
        if self.dropconnect_on not in ("raw", "normalized"):
            raise ConfigError(f"dropconnect_on must be 'raw' or 'normalized', got {self.dropconnect_on!r}")

    @property
    def is_layer_fusion(self) -> bool:
        return self.mode in ("coarse", "fine", "fine-uppermost")

    @property
    def is_surface(self) -> bool:
        return self.mode in ("surface-hard", "surface-soft")


class SurfaceHead:
    """Attention head producing surface representations r (one per target).

    Owns its projection matrices; only the pre-softmax weight is shared with
    the decoder output projection. The value and output maps start as the
    identity: r then begins training inside the embedding basis, which the
    shared pre-softmax weight can already read, instead of a random rotation
    of it. Query/key projections keep the standard init.
    """

    def __init__(self, dim: int, n_heads: int, rng: Rng, dtype=np.float64):
        self.attn = MultiHeadAttentionLayer("surface.attn", dim, n_heads, rng, dtype)
        self.attn.wv.w.data[:] = np.eye(dim, dtype=dtype)
        self.attn.wo.w.data[:] = np.eye(dim, dtype=dtype)

    def __call__(self, decoder_out: Tensor, encoder_final: Tensor, x_emb: Tensor,
                 src_mask: np.ndarray | None = None) -> Tensor:
        return surface_attention(self.attn, decoder_out, encoder_final, x_emb, src_mask)

    def named_parameters(self):
        yield from self.attn.named_parameters()


def surface_attention(attn: MultiHeadAttentionLayer, decoder_out: Tensor,
                      encoder_final: Tensor, x_emb: Tensor,
                      src_mask: np.ndarray | None = None) -> Tensor:
    """r = attention(query=decoder output, keys=final encoder layer,
    values=position-free embeddings), rows convex in the projected values."""
    return attn(decoder_out, encoder_final, x_emb, mask=src_mask)


def surface_logits(r: Tensor, presoftmax_w: Tensor) -> Tensor:
    """Project surface vectors onto the vocabulary with the shared weight.

    `presoftmax_w` is the decoder's own (vocab, dim) output matrix, the very
    same storage, so surface gradients land in it too.
    """
    return T.matmul(r, T.transpose(presoftmax_w, (1, 0)))


def surface_probability(r: Tensor, presoftmax_w: Tensor, tau: float) -> Tensor:
    """Row-stochastic source-only distribution softmax(r V / tau)."""
    return T.softmax_temp(surface_logits(r, presoftmax_w), tau=tau, axis=-1)


def surface_log_probability(r: Tensor, presoftmax_w: Tensor, tau: float) -> Tensor:
    """log of surface_probability computed stably in log space."""
    if not tau > 0:
        raise InvalidParameterError(f"surface temperature must be > 0, got {tau}")
    return T.log_softmax(surface_logits(r, presoftmax_w) * (1.0 / tau), axis=-1)


def hard_fuse(log_p_decoder: Tensor, log_p_surface: Tensor, lambda_: float,
              renormalize: bool = False) -> Tensor:
    """lambda * log P(y|prefix, x) + (1 - lambda) * log P(y|x).

    The result is an unnormalized log-score unless `renormalize` is set;
    within a position it ranks tokens identically either way.
    """
    if not 0.0 <= lambda_ <= 1.0:
        raise InvalidParameterError(f"hard fusion lambda must be in [0, 1], got {lambda_}")
    fused = log_p_decoder * lambda_ + log_p_surface * (1.0 - lambda_)
    if renormalize:
        fused = T.log_softmax(fused, axis=-1)
    return fused


def soft_fuse(decoder_logits: Tensor, log_p_surface: Tensor) -> Tensor:
    """log softmax(decoder pre-softmax logits + surface log-probabilities).

    Needs no interpolation weight; rows are valid log-distributions.
    """
    return T.log_softmax(decoder_logits + log_p_surface, axis=-1)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SurfaceDecodeState:
    """Per-sentence cache for fused decoding.

    The encoder-side key/value projections never change while decoding one
    sentence, so they are computed once here; each step only projects the
    current decoder state and runs the tiny attention in plain numpy. Keeps
    the fused decode overhead well under the latency budget.
    """

    def __init__(self, head: SurfaceHead, encoder_final: np.ndarray, x_emb: np.ndarray,
                 attn_mask: np.ndarray | None, tau: float):
        attn = head.attn
        self.heads = attn.n_heads
        b, i, d = encoder_final.shape
        self.d_head = d // self.heads
        self.scale = 1.0 / np.sqrt(self.d_head)
        self.tau = tau
        k = encoder_final @ attn.wk.w.data + attn.wk.b.data
        v = x_emb @ attn.wv.w.data + attn.wv.b.data
        self.k = np.ascontiguousarray(
            k.reshape(b, i, self.heads, self.d_head).transpose(0, 2, 3, 1))  # (B,H,dk,I)
        self.v = np.ascontiguousarray(
            v.reshape(b, i, self.heads, self.d_head).transpose(0, 2, 1, 3))  # (B,H,I,dk)
        self.mask = attn_mask
        self.wq_w, self.wq_b = attn.wq.w.data, attn.wq.b.data
        self.wo_w, self.wo_b = attn.wo.w.data, attn.wo.b.data
        self._presoftmax_t: np.ndarray | None = None

    def _vocab_proj(self, presoftmax_w: np.ndarray) -> np.ndarray:
        if self._presoftmax_t is None:
            self._presoftmax_t = np.ascontiguousarray(presoftmax_w.T)
        return self._presoftmax_t

    def surface_logits(self, decoder_last: np.ndarray, presoftmax_w: np.ndarray) -> np.ndarray:
        """Temperature-scaled surface logits for the final decoder position
        (an unnormalized shift of the surface log-distribution)."""
        b, j, d = decoder_last.shape
        q = decoder_last @ self.wq_w + self.wq_b
        q = q.reshape(b, j, self.heads, self.d_head).transpose(0, 2, 1, 3)
        scores = (q @ self.k) * self.scale
        if self.mask is not None:
            scores = scores + self.mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        weights = e / e.sum(axis=-1, keepdims=True)
        ctx = (weights @ self.v).transpose(0, 2, 1, 3).reshape(b, j, d)
        r = ctx @ self.wo_w + self.wo_b
        return (r @ self._vocab_proj(presoftmax_w)) / self.tau

    def log_p(self, decoder_last: np.ndarray, presoftmax_w: np.ndarray) -> np.ndarray:
        """Surface log-distribution for the final decoder position."""
        return _log_softmax_np(self.surface_logits(decoder_last, presoftmax_w))

    def fused_scores(self, decoder_logits: np.ndarray, decoder_last: np.ndarray,
                     presoftmax_w: np.ndarray, cfg: FusionConfig) -> np.ndarray:
        """Mode-matched fused score, computed without the autograd graph.

        Soft fusion exploits log softmax's shift invariance: adding the
        unnormalized surface logits equals adding the normalized surface
        log-probabilities, so the surface normalization is skipped.
        """
        s_logits = self.surface_logits(decoder_last, presoftmax_w)
        if cfg.mode == "surface-soft":
            return _log_softmax_np(decoder_logits + s_logits)
        fused = (cfg.lambda_ * _log_softmax_np(decoder_logits)
                 + (1.0 - cfg.lambda_) * _log_softmax_np(s_logits))
        if cfg.renormalize_hard:
            fused = _log_softmax_np(fused)
        return fused
