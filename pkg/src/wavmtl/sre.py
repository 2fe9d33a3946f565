"""Speech representation extractor: conv encoder, transformer, quantizer.

The conv stack turns a 16 kHz waveform into frames Z with a 20 ms hop, the
transformer turns (optionally masked) frames into contextual vectors C, and a
Gumbel-softmax product quantizer turns Z into discrete targets Q. The
self-supervised objective is built from those three paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .tensor import (
    Tensor,
    add_positional_encoding,
    conv_output_length,
    gelu,
    gumbel_softmax,
    log,
    matmul,
    reshape,
    scaled_dot_product_attention,
    softmax,
    sqrt,
    standardize,
    sum_,
    transpose,
    where,
)

CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)
CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)


class LengthError(ValueError):
    """Waveform shorter than the encoder's receptive field."""


@dataclass
class SREConfig:
    conv_channels: int = 64
    conv_strides: tuple = CONV_STRIDES
    conv_kernels: tuple = CONV_KERNELS
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    codebooks: int = 2
    entries_per_codebook: int = 64
    code_dim: int = 64
    mask_prob: float = 0.065
    mask_span: int = 4
    distractors: int = 32
    temperature: float = 0.1
    gumbel_start: float = 2.0
    gumbel_end: float = 0.5
    gumbel_decay: float = 0.9995
    diversity_weight: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.validate()

    def validate(self):
        positive = ["conv_channels", "d_model", "n_layers", "n_heads", "ffn_dim",
                    "codebooks", "entries_per_codebook", "code_dim", "mask_span",
                    "distractors", "temperature", "gumbel_start", "gumbel_end"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"sre.{name} must be positive, got {getattr(self, name)}")
        if len(self.conv_strides) != len(self.conv_kernels) or not self.conv_strides:
            raise ValueError("sre.conv_strides and sre.conv_kernels must have equal, nonzero length")
        if min(self.conv_strides) < 1 or min(self.conv_kernels) < 1:
            raise ValueError("sre conv strides and kernels must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"sre.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.code_dim % self.codebooks:
            raise ValueError(f"sre.code_dim ({self.code_dim}) must be divisible by codebooks ({self.codebooks})")
        if self.mask_span > self.frames_for(16000):
            raise ValueError(f"sre.mask_span ({self.mask_span}) exceeds the "
                             f"{self.frames_for(16000)} frames of a one-second clip")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"sre.mask_prob must lie in [0, 1], got {self.mask_prob}")
        if not 0.0 < self.gumbel_decay <= 1.0:
            raise ValueError(f"sre.gumbel_decay must lie in (0, 1], got {self.gumbel_decay}")
        if self.diversity_weight < 0 or self.weight_decay < 0:
            raise ValueError("sre.diversity_weight and sre.weight_decay must be non-negative")

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["conv_strides"] = list(self.conv_strides)
        out["conv_kernels"] = list(self.conv_kernels)
        return out

    # -- conv arithmetic --------------------------------------------------

    def frames_for(self, length):
        for k, s in zip(self.conv_kernels, self.conv_strides):
            length = conv_output_length(length, k, s)
        return length

    @property
    def receptive_field(self):
        field_, jump = 1, 1
        for k, s in zip(self.conv_kernels, self.conv_strides):
            field_ += (k - 1) * jump
            jump *= s
        return field_

    @property
    def hop(self):
        return int(np.prod(self.conv_strides))

    def gumbel_temperature(self, step):
        return max(self.gumbel_end, self.gumbel_start * self.gumbel_decay ** step)


@dataclass
class QuantizedTargets:
    """Quantizer output for a batch of frame sequences.

    ``frames`` is (B, T, code_dim). ``code_probs`` is the (B, T, G, V)
    selection (one-hot per row when hard). ``soft_probs`` holds the noise-free
    softmax over entries that the diversity penalty averages.
    """

    frames: Tensor
    code_probs: Tensor
    soft_probs: Tensor


@dataclass
class PretrainParts:
    total: Tensor
    contrastive: Tensor
    diversity: Tensor
    l2: Tensor
    mask: np.ndarray = field(repr=False)
    soft_probs: Tensor = field(default=None, repr=False)   # noise-free code probabilities


class TransformerLayer(nn.Module):
    """Pre-norm encoder block: self-attention then a GELU feed-forward."""

    def __init__(self, d_model, n_heads, ffn_dim, rng):
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model, rng)
        self.attn_out = nn.Linear(d_model, d_model, rng)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn_in = nn.Linear(d_model, ffn_dim, rng)
        self.ffn_out = nn.Linear(ffn_dim, d_model, rng)

    def __call__(self, x):
        b, t, d = x.shape
        h = self.n_heads
        qkv = self.qkv(self.norm1(x))
        qkv = transpose(reshape(qkv, (b, t, 3, h, d // h)), (2, 0, 3, 1, 4))
        ctx = scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        x = x + self.attn_out(ctx)
        return x + self.ffn_out(gelu(self.ffn_in(self.norm2(x))))


class Quantizer(nn.Module):
    """Product quantizer over ``codebooks`` groups of ``entries`` vectors."""

    def __init__(self, dim_in, codebooks, entries, code_dim, rng):
        self.codebooks = codebooks
        self.entries = entries
        self.to_logits = nn.Linear(dim_in, codebooks * entries, rng)
        # unit-variance logit weights: code choice must dominate the Gumbel
        # noise from the start or the targets are pure noise
        self.to_logits.weight.data = rng.normal(0.0, 1.0, size=(dim_in, codebooks * entries))
        entry_dim = code_dim // codebooks
        self.codebook = nn.parameter(rng.uniform(0.0, 1.0, size=(codebooks, entries, entry_dim)))
        self.project = nn.Linear(codebooks * entry_dim, code_dim, rng)

    def __call__(self, feats, temperature, rng=None, hard=True):
        b, t, _ = feats.shape
        g, v = self.codebooks, self.entries
        logits = reshape(self.to_logits(feats), (b, t, g, v))
        soft = softmax(logits, -1)
        if rng is None:
            # deterministic path: argmax of the logits, no noise
            noise = np.zeros(logits.shape)
            pick = gumbel_softmax(logits, temperature, hard=True, noise=noise)
        else:
            pick = gumbel_softmax(logits, temperature, hard=hard, rng=rng)
        chosen = matmul(reshape(pick, (b, t, g, 1, v)), self.codebook)   # (b, t, g, 1, e)
        chosen = reshape(chosen, (b, t, g * self.codebook.shape[-1]))
        return QuantizedTargets(self.project(chosen), pick, soft)


class SREModel(nn.Module):
    def __init__(self, config: SREConfig, rng):
        self.config = config
        c = config.conv_channels
        self.conv = []
        c_in = 1
        for k, s in zip(config.conv_kernels, config.conv_strides):
            self.conv.append(nn.Conv1d(c_in, c, k, s, rng))
            c_in = c
        # per-channel normalisation over time after the first conv layer
        self.conv0_gamma = nn.parameter(np.ones(c))
        self.conv0_beta = nn.parameter(np.zeros(c))
        self.feature_norm = nn.LayerNorm(c)
        self.project = nn.Linear(c, config.d_model, rng)
        self.mask_embedding = nn.parameter(rng.uniform(0.0, 1.0, size=config.d_model))
        self.layers = [TransformerLayer(config.d_model, config.n_heads, config.ffn_dim, rng)
                       for _ in range(config.n_layers)]
        self.final_norm = nn.LayerNorm(config.d_model)
        self.quantizer = Quantizer(c, config.codebooks, config.entries_per_codebook,
                                   config.code_dim, rng)
        self.final_proj = nn.Linear(config.d_model, config.code_dim, rng)

    PRETRAIN_ONLY = ("mask_embedding", "quantizer.", "final_proj.")

    def finetune_parameters(self):
        """Parameters on the unmasked waveform-to-C path used by the heads."""
        return [p for name, p in self.named_parameters()
                if not name.startswith(self.PRETRAIN_ONLY)]

    # -- Z path ------------------------------------------------------------

    def encode_frames(self, wave):
        """Waveform (L,) or (B, L) to frames Z of shape (T, C) or (B, T, C)."""
        wave = wave if isinstance(wave, Tensor) else Tensor(wave)
        unbatched = wave.ndim == 1
        if unbatched:
            wave = reshape(wave, (1,) + wave.shape)
        length = wave.shape[-1]
        if length < self.config.receptive_field:
            raise LengthError(
                f"waveform of {length} samples is shorter than the "
                f"{self.config.receptive_field}-sample receptive field")
        x = reshape(wave, wave.shape + (1,))        # (B, L, 1) channels-last
        for i, layer in enumerate(self.conv):
            x = layer(x, channels_last=True)
            if i == 0:
                x = standardize(x, axis=1) * self.conv0_gamma + self.conv0_beta
            x = gelu(x)
        return x[0] if unbatched else x

    # -- C path ------------------------------------------------------------

    def features(self, z):
        return self.project(self.feature_norm(z))

    def contextualize(self, z, mask=None, positional=True):
        """Frames Z (..., T, C) to contextual vectors C (..., T, d_model)."""
        return self._transform(self.features(z), mask, positional)

    def _transform(self, x, mask=None, positional=True):
        unbatched = x.ndim == 2
        if unbatched:
            x = reshape(x, (1,) + x.shape)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if unbatched:
                mask = mask[None]
            if mask.shape != x.shape[:2]:
                raise ValueError(f"mask shape {mask.shape} does not match frames {x.shape[:2]}")
            x = where(mask[..., None], self.mask_embedding, x)
        if positional:
            x = add_positional_encoding(x)
        for layer in self.layers:
            x = layer(x)
        x = self.final_norm(x)
        return x[0] if unbatched else x

    def __call__(self, wave):
        """Fine-tuning forward pass: waveform batch to C, no masking."""
        return self.contextualize(self.encode_frames(wave))

    # -- Q path ------------------------------------------------------------

    def quantize(self, z, temperature, rng=None, hard=True):
        unbatched = z.ndim == 2
        if unbatched:
            z = reshape(z, (1,) + z.shape)
        q = self.quantizer(self.feature_norm(z), temperature, rng, hard)
        if unbatched:
            return QuantizedTargets(q.frames[0], q.code_probs[0], q.soft_probs[0])
        return q

    # -- objective -----------------------------------------------------------

    def l2_penalty(self):
        total = None
        for p in self.parameters():
            if p.ndim >= 2:
                term = sum_(p * p)
                total = term if total is None else total + term
        return total

    def pretrain_loss(self, waves, rng, step=0, hard=True):
        """Contrastive + weighted diversity + L2 loss on a (B, L) batch.

        ``hard=False`` uses the relaxed code sample as the target, which makes
        the whole objective smooth (for finite-difference checks).
        """
        cfg = self.config
        z = self.encode_frames(waves)
        if z.ndim == 2:
            z = reshape(z, (1,) + z.shape)
        b, t, _ = z.shape
        normed = self.feature_norm(z)
        q = self.quantizer(normed, cfg.gumbel_temperature(step), rng, hard=hard)
        mask = np.stack([sample_mask(t, cfg.mask_prob, cfg.mask_span, rng) for _ in range(b)])
        c = self._transform(self.project(normed), mask)
        contrast = contrastive_loss(self.final_proj(c), q.frames, mask,
                                    cfg.distractors, cfg.temperature, rng)
        div = diversity_loss(q.soft_probs)
        l2 = self.l2_penalty()
        total = contrast + div * cfg.diversity_weight + l2 * cfg.weight_decay
        return PretrainParts(total, contrast, div, l2, mask, q.soft_probs)


def sample_mask(length, prob, span, rng):
    """Span mask over ``length`` frames.

    Every frame starts a span with probability ``prob``; spans cover
    ``min(span, length - start)`` frames and overlaps merge. When no frame is
    picked a single full span is forced at a uniform start.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {prob}")
    if not 1 <= span <= length:
        raise ValueError(f"mask span must lie in [1, {length}], got {span}")
    starts = np.flatnonzero(rng.random(length) < prob)
    if starts.size == 0:
        starts = np.array([rng.integers(0, length - span + 1)])
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return mask


def expected_mask_fraction(length, prob, span):
    """Exact mean masked fraction of :func:`sample_mask`."""
    miss = 1.0 - prob
    natural = sum(1.0 - miss ** min(t + 1, span) for t in range(length))
    return (natural + miss ** length * span) / length


def _cosine_rows(a, b):
    dot = sum_(a * b, axis=-1)
    na = sqrt(sum_(a * a, axis=-1) + 1e-12)
    nb = sqrt(sum_(b * b, axis=-1) + 1e-12)
    return dot / (na * nb)


def sample_distractors(mask, count, rng):
    """Distractor frame indices for each masked frame.

    Returns ``(targets, distractors)`` as flat indices into (B*T): distractors
    come from the other masked frames of the same utterance, without
    replacement when enough exist and with replacement otherwise.
    """
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    b, t = mask.shape
    targets, negs = [], []
    for i in range(b):
        idx = np.flatnonzero(mask[i])
        n = idx.size
        if n == 0:
            continue
        if n == 1:
            pool = np.setdiff1d(np.arange(t), idx)
            if pool.size == 0:
                raise ValueError("contrastive loss needs at least two frames")
            picks = pool[rng.integers(0, pool.size, size=(1, count))]
        else:
            if n - 1 >= count:
                order = rng.random((n, n - 1)).argsort(axis=1)[:, :count]
            else:
                order = rng.integers(0, n - 1, size=(n, count))
            # skip the target's own slot in the list of masked frames
            order = order + (order >= np.arange(n)[:, None])
            picks = idx[order]
        targets.append(i * t + idx)
        negs.append(i * t + picks)
    if not targets:
        raise ValueError("contrastive loss needs at least one masked frame")
    return np.concatenate(targets), np.concatenate(negs)


def contrastive_loss(c, q, mask, distractors, temperature, rng=None, picks=None):
    """InfoNCE over cosine similarities between C and Q at masked frames.

    ``c`` and ``q`` are (T, D) or (B, T, D). ``picks`` may supply the
    ``(targets, distractors)`` index pair explicitly.
    """
    mask = np.asarray(mask, dtype=bool)
    if c.ndim == 2:
        c, q = reshape(c, (1,) + c.shape), reshape(q, (1,) + q.shape)
        mask = mask[None] if mask.ndim == 1 else mask
    if not mask.any():
        raise ValueError("contrastive loss needs at least one masked frame")
    b, t, d = c.shape
    if picks is None:
        picks = sample_distractors(mask, distractors, rng)
    targets, negs = picks
    c_flat = reshape(c, (b * t, d))
    q_flat = reshape(q, (b * t, d))
    cand = np.concatenate([targets[:, None], negs], axis=1)     # (N, K+1)
    sims = _cosine_rows(reshape(c_flat[targets], (len(targets), 1, d)), q_flat[cand])
    logp = (sims * (1.0 / temperature)).log_softmax(-1)
    return -(logp[:, 0].mean())


def diversity_loss(probs):
    """(G·V − Σ_g exp(H(mean_g))) / (G·V) for soft code probs (..., G, V)."""
    g, v = probs.shape[-2:]
    avg = probs.reshape(-1, g, v).mean(axis=0)
    safe = where(avg.data > 0, avg, 1.0)
    entropy = -sum_(avg * log(safe), axis=-1)
    return (g * v - sum_(entropy.exp())) * (1.0 / (g * v))


def codebook_perplexity(probs):
    """Mean over codebooks of exp(entropy) of the average code distribution."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    g, v = data.shape[-2:]
    avg = data.reshape(-1, g, v).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(avg > 0, avg * np.log(avg), 0.0).sum(axis=-1)
    return float(np.exp(ent).mean())


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


def frames_per_second(config: SREConfig, sample_rate=16000):
    return sample_rate / config.hop


__all__ = [
    "SREConfig", "SREModel", "QuantizedTargets", "PretrainParts", "LengthError",
    "sample_mask", "expected_mask_fraction", "sample_distractors",
    "contrastive_loss", "diversity_loss", "codebook_perplexity",
    "CONV_STRIDES", "CONV_KERNELS",
]
