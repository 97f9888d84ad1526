"""
The four architectures compared in the RingFormer experiments, in
encoder-only (ViT-style) and encoder-decoder (translation) modes:

- vanilla     N distinct Transformer blocks
- universal   one shared block + static sinusoidal (position, level) transition
- owf         N distinct attention blocks + one wide FFN shared everywhere
- ringformer  one shared block + per-level low-rank signals and layer norms

Also exact parameter accounting (enumeration and closed form) and
multiply-accumulate FLOP accounting.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from level_signal import (
    LayerNormParams,
    RankPolicy,
    SignalVariant,
    apply_signal,
    make_level_signals,
    signal_param_count,
)
from nn_core import (
    ConfigurationError,
    DimensionError,
    Dropout,
    Module,
    ParamFactory,
    Tensor,
    concat,
    embedding,
    feed_forward,
    layer_norm,
    matmul,
    multi_head_attention,
    resolve_dtype,
    sinusoidal_table,
)

logger = logging.getLogger(__name__)

ARCHS = ('vanilla', 'universal', 'owf', 'ringformer')
MODES = ('encoder_only', 'encoder_decoder')
CONVENTIONS = ('weights_only', 'with_biases')
EXCLUSIONS = ('none', 'embeddings_and_head')

# Reserved token ids for sequence tasks
BOS, EOS = 0, 1


# ============ CONFIG ============

@dataclass
class ModelConfig:
    arch: str = 'ringformer'
    mode: str = 'encoder_decoder'
    hidden: int = 64
    ff: int = 256
    levels: int = 2
    heads: int = 4
    rank_policy: str = 'ratio:16'
    signal_variant: str = 'full'
    norm_placement: Optional[str] = None
    positional: Optional[str] = None
    vocab_size: Optional[int] = None
    image_size: Optional[int] = None
    patch_size: Optional[int] = None
    channels: int = 1
    num_classes: Optional[int] = None
    dropout: float = 0.1
    max_seq_len: int = 64
    ln_eps: float = 1e-5
    dtype: str = 'float32'

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"Unknown arch '{self.arch}' (choose from {', '.join(ARCHS)})")
        if self.mode not in MODES:
            raise ConfigurationError(f"Unknown mode '{self.mode}' (choose from {', '.join(MODES)})")
        for name in ('hidden', 'ff', 'levels', 'heads', 'max_seq_len', 'channels'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be ≥ 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigurationError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.norm_placement not in (None, 'pre', 'post'):
            raise ConfigurationError(f"norm_placement must be pre or post, got '{self.norm_placement}'")
        if self.positional not in (None, 'sinusoidal', 'learned'):
            raise ConfigurationError(f"positional must be sinusoidal or learned, got '{self.positional}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        resolve_dtype(self.dtype)
        variant = SignalVariant.parse(self.signal_variant)
        policy = RankPolicy.parse(self.rank_policy)
        if self.arch == 'ringformer' and (variant.has_attn_pairs or variant.has_ffn_pair):
            policy.resolve(self.hidden)
        if (self.uses_static_transition or self.position_kind == 'sinusoidal') and self.hidden % 2:
            raise ConfigurationError(f"sinusoidal encodings need an even hidden size, got {self.hidden}")
        if self.mode == 'encoder_only':
            for name in ('image_size', 'patch_size', 'num_classes'):
                if not getattr(self, name) or getattr(self, name) < 1:
                    raise ConfigurationError(f"encoder_only mode needs a positive {name}")
            if self.image_size % self.patch_size:
                raise ConfigurationError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        else:
            if not self.vocab_size or self.vocab_size < 3:
                raise ConfigurationError("encoder_decoder mode needs vocab_size ≥ 3 (two reserved ids plus data)")

    # --- derived settings ---

    @property
    def placement(self):
        return self.norm_placement or ('pre' if self.mode == 'encoder_only' else 'post')

    @property
    def position_kind(self):
        return self.positional or ('learned' if self.mode == 'encoder_only' else 'sinusoidal')

    @property
    def variant(self):
        return SignalVariant.parse(self.signal_variant)

    @property
    def policy(self):
        return RankPolicy.parse(self.rank_policy)

    @property
    def has_signal_pairs(self):
        return self.arch == 'ringformer' and (self.variant.has_attn_pairs or self.variant.has_ffn_pair)

    @property
    def rank(self):
        return self.policy.resolve(self.hidden) if self.has_signal_pairs else 0

    @property
    def uses_static_transition(self):
        return self.arch == 'universal' or (
            self.arch == 'ringformer' and SignalVariant.parse(self.signal_variant) is SignalVariant.STATIC_SINUSOIDAL)

    @property
    def patches_per_side(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.patches_per_side ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def n_tokens(self):
        """Encoder sequence length in encoder-only mode (patches + class token)."""
        return self.n_patches + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"Unknown model config keys: {', '.join(unknown)}")
        return cls(**values)


# ============ BUILDING BLOCKS ============

class AttentionBlock(Module):
    def __init__(self, factory, prefix, hidden):
        for name in ('q', 'k', 'v', 'o'):
            setattr(self, f"w_{name}", factory.weight(f"{prefix}.w_{name}", hidden, hidden, 'attention'))
            setattr(self, f"b_{name}", factory.bias(f"{prefix}.b_{name}", hidden, 'attention'))

    def __call__(self, x_q, x_kv, heads, mask=None, *, signals=(None, None, None), site='after',
                 dropout=None, trace=False):
        q_sig, k_sig, v_sig = signals
        return multi_head_attention(
            x_q, x_kv, self.w_q, self.w_k, self.w_v, self.w_o, heads, mask,
            b_q=self.b_q, b_k=self.b_k, b_v=self.b_v, b_o=self.b_o,
            q_signal=q_sig, k_signal=k_sig, v_signal=v_sig, signal_site=site,
            dropout=dropout, trace=trace,
        )


class FeedForwardBlock(Module):
    def __init__(self, factory, prefix, hidden, ff):
        self.w_up = factory.weight(f"{prefix}.w_up", hidden, ff, 'ffn')
        self.b_up = factory.bias(f"{prefix}.b_up", ff, 'ffn')
        self.w_down = factory.weight(f"{prefix}.w_down", ff, hidden, 'ffn')
        self.b_down = factory.bias(f"{prefix}.b_down", hidden, 'ffn')

    def __call__(self, x, signal=None, site='input'):
        return feed_forward(x, self.w_up, self.b_up, self.w_down, self.b_down, signal=signal, signal_site=site)


class TransformerLayer(Module):
    """Self-attention (+ cross-attention in decoders) + FFN, with or without its own norms."""

    def __init__(self, factory, prefix, cfg, decoder, with_norms=True, ffn=None):
        h = cfg.hidden
        self.attn = AttentionBlock(factory, f"{prefix}.attn", h)
        self.cross = AttentionBlock(factory, f"{prefix}.cross_attn", h) if decoder else None
        self.ffn = ffn if ffn is not None else FeedForwardBlock(factory, f"{prefix}.ffn", h, cfg.ff)
        self.ln_attn = LayerNormParams(factory, f"{prefix}.ln_attn", h, cfg.ln_eps) if with_norms else None
        self.ln_cross = LayerNormParams(factory, f"{prefix}.ln_cross", h, cfg.ln_eps) if with_norms and decoder else None
        self.ln_ffn = LayerNormParams(factory, f"{prefix}.ln_ffn", h, cfg.ln_eps) if with_norms else None


@dataclass
class LevelPlan:
    """The modules one level runs; shared modules appear in several plans."""
    level: int
    attn: AttentionBlock
    ffn: FeedForwardBlock
    ln_attn: LayerNormParams
    ln_ffn: LayerNormParams
    cross: Optional[AttentionBlock] = None
    ln_cross: Optional[LayerNormParams] = None
    signals: object = None
    static: bool = False


@dataclass
class ForwardTrace:
    """Per-level hidden states (level 0 = post-embedding) and per-head attention maps."""
    hidden: list = field(default_factory=list)
    attn_maps: list = field(default_factory=list)
    cross_maps: list = field(default_factory=list)
    input_digest: str = ''
    has_class_token: bool = False

    @property
    def levels(self):
        return len(self.hidden) - 1


@dataclass
class ModelTraces:
    encoder: ForwardTrace
    decoder: Optional[ForwardTrace] = None


def input_digest(array):
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()[:16]


def _norm(x, ln):
    return layer_norm(x, ln.gamma, ln.beta, ln.eps)


def _residual(x, sublayer, ln, placement, dropout):
    if placement == 'pre':
        out = sublayer(_norm(x, ln))
        return x + (dropout(out) if dropout is not None else out)
    out = sublayer(x)
    return _norm(x + (dropout(out) if dropout is not None else out), ln)


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def universal_level_transition(x, level):
    """x + PE(position) + PE(level) for every token; input-independent."""
    n, hidden = x.shape[-2], x.shape[-1]
    shift = sinusoidal_table(np.arange(n), hidden) + sinusoidal_table(level, hidden)
    return x + Tensor(shift.astype(x.dtype))


def _level_forward(x, plan, cfg, memory=None, self_mask=None, dropout=None, trace=False):
    sig = plan.signals
    variant = cfg.variant
    maps = {}
    if plan.static:
        x = universal_level_transition(x, plan.level)

    def self_attention(h):
        signals = (None, None, None)
        if sig is not None:
            signals = tuple(apply_signal(p, h) if p is not None else None for p in (sig.q, sig.k, sig.v))
        out, maps['self'] = plan.attn(h, h, cfg.heads, self_mask, signals=signals, site=variant.attn_site,
                                      dropout=dropout, trace=trace)
        return out

    def cross_attention(h):
        out, maps['cross'] = plan.cross(h, memory, cfg.heads, dropout=dropout, trace=trace)
        return out

    def ffn(h):
        f_sig = apply_signal(sig.f, h) if sig is not None and sig.f is not None else None
        return plan.ffn(h, signal=f_sig, site=variant.ffn_site)

    x = _residual(x, self_attention, plan.ln_attn, cfg.placement, dropout)
    if plan.cross is not None:
        x = _residual(x, cross_attention, plan.ln_cross, cfg.placement, dropout)
    x = _residual(x, ffn, plan.ln_ffn, cfg.placement, dropout)
    return x, maps


def run_stack(x, plans, cfg, *, memory=None, self_mask=None, dropout=None, final_ln=None, trace=False):
    """Apply the level plans in order; returns (output, ForwardTrace)."""
    record = ForwardTrace(hidden=[x.data])
    for plan in plans:
        x, maps = _level_forward(x, plan, cfg, memory, self_mask, dropout, trace)
        record.hidden.append(x.data)
        if trace:
            record.attn_maps.append(maps['self'])
            if 'cross' in maps:
                record.cross_maps.append(maps['cross'])
    if final_ln is not None:
        x = _norm(x, final_ln)
    return x, record


def _ringformer_plans(shared_block, signals, cfg, decoder):
    if len(signals) != cfg.levels:
        raise ConfigurationError(f"{len(signals)} level signal sets for {cfg.levels} levels")
    static = cfg.variant is SignalVariant.STATIC_SINUSOIDAL
    return [
        LevelPlan(level=s.level, attn=shared_block.attn, ffn=shared_block.ffn, ln_attn=s.ln_attn, ln_ffn=s.ln_ffn,
                  cross=shared_block.cross if decoder else None, ln_cross=s.ln_cross if decoder else None,
                  signals=s, static=static)
        for s in signals
    ]


def ringformer_encoder_forward(x, shared_block, signals, cfg, *, mask=None, dropout=None, final_ln=None,
                               trace=False):
    """
    One shared block applied once per level. At level i the Q/K/V projections
    get g_{Qi}(x), g_{Ki}(x), g_{Vi}(x) added after the shared projection, the
    FFN input gets g_{Fi}(x) added before the up-projection, and the level's
    own layer norms are used.
    """
    return run_stack(x, _ringformer_plans(shared_block, signals, cfg, decoder=False), cfg,
                     self_mask=mask, dropout=dropout, final_ln=final_ln, trace=trace)


def ringformer_decoder_forward(y, enc_out, shared_block, signals, cfg, *, dropout=None, final_ln=None,
                               trace=False):
    """Causal self-attention with level signals; cross-attention shared and signal-free."""
    if enc_out is None:
        raise ConfigurationError("decoder forward needs the encoder output")
    return run_stack(y, _ringformer_plans(shared_block, signals, cfg, decoder=True), cfg,
                     memory=enc_out, self_mask=causal_mask(y.shape[-2]), dropout=dropout,
                     final_ln=final_ln, trace=trace)


# ============ STACKS & MODEL ============

class Stack(Module):
    """Encoder or decoder stack of cfg.levels levels, shaped by the architecture."""

    def __init__(self, factory, prefix, cfg, decoder=False, shared_ffn=None):
        self.prefix = prefix
        self.decoder = decoder
        self.cfg = cfg
        self.layers, self.shared, self.signals = [], None, []
        n = cfg.levels
        if cfg.arch == 'vanilla':
            self.layers = [TransformerLayer(factory, f"{prefix}.levels.{i}", cfg, decoder) for i in range(1, n + 1)]
        elif cfg.arch == 'owf':
            self.layers = [TransformerLayer(factory, f"{prefix}.levels.{i}", cfg, decoder, ffn=shared_ffn)
                           for i in range(1, n + 1)]
        elif cfg.arch == 'universal':
            self.shared = TransformerLayer(factory, f"{prefix}.shared", cfg, decoder)
        else:
            self.shared = TransformerLayer(factory, f"{prefix}.shared", cfg, decoder, with_norms=False)
            self.signals = make_level_signals(cfg.hidden, n, cfg.policy, cfg.variant, with_cross_ln=decoder,
                                              ff=cfg.ff, prefix=prefix, factory=factory, eps=cfg.ln_eps)
        self.final_ln = LayerNormParams(factory, f"{prefix}.final_ln", cfg.hidden, cfg.ln_eps) \
            if cfg.placement == 'pre' else None

    def plans(self):
        if self.cfg.arch == 'ringformer':
            return _ringformer_plans(self.shared, self.signals, self.cfg, self.decoder)
        layers = self.layers or [self.shared] * self.cfg.levels
        return [
            LevelPlan(level=i, attn=layer.attn, ffn=layer.ffn, ln_attn=layer.ln_attn, ln_ffn=layer.ln_ffn,
                      cross=layer.cross, ln_cross=layer.ln_cross, static=self.cfg.arch == 'universal')
            for i, layer in enumerate(layers, start=1)
        ]

    def forward(self, x, memory=None, dropout=None, trace=False):
        if self.cfg.arch == 'ringformer':
            if self.decoder:
                return ringformer_decoder_forward(x, memory, self.shared, self.signals, self.cfg,
                                                  dropout=dropout, final_ln=self.final_ln, trace=trace)
            return ringformer_encoder_forward(x, self.shared, self.signals, self.cfg, dropout=dropout,
                                              final_ln=self.final_ln, trace=trace)
        mask = causal_mask(x.shape[-2]) if self.decoder else None
        return run_stack(x, self.plans(), self.cfg, memory=memory, self_mask=mask, dropout=dropout,
                         final_ln=self.final_ln, trace=trace)


class TokenEmbedding(Module):
    def __init__(self, factory, prefix, cfg):
        self.hidden = cfg.hidden
        self.kind = cfg.position_kind
        self.tokens = factory.normal(f"{prefix}.tokens", (cfg.vocab_size, cfg.hidden), cfg.hidden ** -0.5,
                                     role='embedding', group='embeddings')
        self.positions = factory.normal(f"{prefix}.positions", (cfg.max_seq_len, cfg.hidden), 0.02,
                                        role='embedding', group='embeddings') if self.kind == 'learned' else None

    def __call__(self, ids):
        ids = np.asarray(ids)
        n = ids.shape[-1]
        x = embedding(self.tokens, ids) * math.sqrt(self.hidden)
        if self.positions is not None:
            if n > self.positions.shape[0]:
                raise DimensionError(f"sequence of length {n} exceeds the {self.positions.shape[0]} learned positions")
            return x + self.positions[:n]
        return x + Tensor(sinusoidal_table(np.arange(n), self.hidden).astype(x.dtype))


def patchify(images, patch_size):
    """[B, C, S, S] → [B, (S/p)², p·p·C], patches in row-major grid order."""
    b, c, s, _ = images.shape
    g = s // patch_size
    x = images.reshape(b, c, g, patch_size, g, patch_size)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(b, g * g, patch_size * patch_size * c)


class PatchEmbedding(Module):
    def __init__(self, factory, prefix, cfg):
        self.cfg = cfg
        self.w = factory.weight(f"{prefix}.patch.w", cfg.patch_dim, cfg.hidden, 'embeddings')
        self.w.role = 'embedding'
        self.b = factory.bias(f"{prefix}.patch.b", cfg.hidden, 'embeddings')
        self.cls = factory.normal(f"{prefix}.cls", (1, cfg.hidden), 0.02, role='embedding', group='embeddings')
        self.positions = factory.normal(f"{prefix}.positions", (cfg.n_tokens, cfg.hidden), 0.02,
                                        role='embedding', group='embeddings') \
            if cfg.position_kind == 'learned' else None

    def __call__(self, images):
        cfg = self.cfg
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigurationError(
                f"expected images [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {images.shape}")
        patches = Tensor(patchify(images, cfg.patch_size).astype(self.w.dtype))
        x = matmul(patches, self.w) + self.b
        cls = Tensor(np.zeros((images.shape[0], 1, cfg.hidden), dtype=x.dtype)) + self.cls.reshape(1, 1, cfg.hidden)
        x = concat([cls, x], axis=1)
        if self.positions is not None:
            return x + self.positions
        return x + Tensor(sinusoidal_table(np.arange(cfg.n_tokens), cfg.hidden).astype(x.dtype))


class Head(Module):
    def __init__(self, factory, prefix, hidden, out_dim):
        self.w = factory.weight(f"{prefix}.w", hidden, out_dim, 'head')
        self.w.role = 'head'
        self.b = factory.bias(f"{prefix}.b", out_dim, 'head')

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class TransformerModel(Module):
    """Embeddings + encoder (+ decoder) + output head for one ModelConfig."""

    def __init__(self, cfg, factory):
        self.cfg = cfg
        if cfg.mode == 'encoder_only':
            shared_ffn = FeedForwardBlock(factory, 'shared_ffn', cfg.hidden, cfg.ff) if cfg.arch == 'owf' else None
            self.embed = PatchEmbedding(factory, 'encoder.embed', cfg)
            self.encoder = Stack(factory, 'encoder', cfg, shared_ffn=shared_ffn)
            self.tgt_embed, self.decoder = None, None
            self.head = Head(factory, 'head', cfg.hidden, cfg.num_classes)
        else:
            # one wide FFN serves every level of both stacks
            shared_ffn = FeedForwardBlock(factory, 'shared_ffn', cfg.hidden, cfg.ff) if cfg.arch == 'owf' else None
            self.embed = TokenEmbedding(factory, 'encoder.embed', cfg)
            self.encoder = Stack(factory, 'encoder', cfg, shared_ffn=shared_ffn)
            self.tgt_embed = TokenEmbedding(factory, 'decoder.embed', cfg)
            self.decoder = Stack(factory, 'decoder', cfg, decoder=True, shared_ffn=shared_ffn)
            self.head = Head(factory, 'head', cfg.hidden, cfg.vocab_size)

    def _dropout(self, training, rng, rate=None):
        rate = self.cfg.dropout if rate is None else rate
        if training and rate > 0 and rng is None:
            raise ConfigurationError("training-mode forward with dropout needs an rng")
        return Dropout(rate, rng, active=training)

    @property
    def max_target_len(self):
        """Longest decoder input the learned positions cover; None for sinusoidal positions."""
        return self.cfg.max_seq_len if self.cfg.mode == 'encoder_decoder' and self.cfg.position_kind == 'learned' \
            else None

    def encode(self, src, dropout=None, trace=False):
        x = self.embed(src)
        out, record = self.encoder.forward(x, dropout=dropout, trace=trace)
        record.input_digest = input_digest(src)
        record.has_class_token = self.cfg.mode == 'encoder_only'
        return out, record

    def decode(self, tgt_in, memory, dropout=None, trace=False):
        y = self.tgt_embed(tgt_in)
        out, record = self.decoder.forward(y, memory=memory, dropout=dropout, trace=trace)
        record.input_digest = input_digest(tgt_in)
        return self.head(out), record

    def forward(self, inputs, tgt_in=None, *, training=False, rng=None, trace=False, dropout_rate=None):
        """Classification logits [B, classes] or next-token logits [B, n, V], plus traces."""
        dropout = self._dropout(training, rng, dropout_rate)
        memory, enc_record = self.encode(inputs, dropout, trace)
        if self.cfg.mode == 'encoder_only':
            return self.head(memory[:, 0]), ModelTraces(enc_record)
        if tgt_in is None:
            raise ConfigurationError("encoder_decoder forward needs decoder inputs")
        logits, dec_record = self.decode(tgt_in, memory, dropout, trace)
        return logits, ModelTraces(enc_record, dec_record)


def build_model(cfg, rng=None, materialize=True):
    """Construct the model for `cfg`; materialize=False builds zero-cost shape placeholders."""
    cfg.validate()
    factory = ParamFactory(rng, dtype=cfg.dtype, materialize=materialize)
    model = TransformerModel(cfg, factory)
    if materialize:
        logger.info(f"Built {cfg.arch} ({cfg.mode}) H={cfg.hidden} FF={cfg.ff} N={cfg.levels}: "
                    f"{sum(p.size for p in model.named_parameters()):,} parameters")
    return model


# ============ PARAMETER ACCOUNTING ============

@dataclass
class ParamReport:
    total: int
    components: dict
    convention: str
    exclusions: str


def _check_counting_options(convention, exclusions):
    if convention not in CONVENTIONS:
        raise ConfigurationError(f"Unknown convention '{convention}' (choose from {', '.join(CONVENTIONS)})")
    if exclusions not in EXCLUSIONS:
        raise ConfigurationError(f"Unknown exclusions '{exclusions}' (choose from {', '.join(EXCLUSIONS)})")


def counted_parameters(model, convention='weights_only', exclusions='embeddings_and_head'):
    _check_counting_options(convention, exclusions)
    out = []
    for p in model.named_parameters():
        if convention == 'weights_only' and p.role == 'bias':
            continue
        if exclusions == 'embeddings_and_head' and p.group in ('embeddings', 'head'):
            continue
        out.append(p)
    return out


def param_breakdown(cfg, convention='weights_only', exclusions='embeddings_and_head'):
    """Per-component counts from enumerating every constructed parameter."""
    model = build_model(cfg, materialize=False)
    components = {}
    for p in counted_parameters(model, convention, exclusions):
        components[p.group] = components.get(p.group, 0) + p.size
    return ParamReport(sum(components.values()), components, convention, exclusions)


def count_params(cfg, convention='weights_only', exclusions='embeddings_and_head'):
    return param_breakdown(cfg, convention, exclusions).total


def closed_form_param_count(cfg, convention='weights_only', exclusions='embeddings_and_head'):
    """The same count as count_params, from formulas instead of enumeration."""
    _check_counting_options(convention, exclusions)
    h, ff, n = cfg.hidden, cfg.ff, cfg.levels
    biases = convention == 'with_biases'
    attn = 4 * h * h + (4 * h if biases else 0)
    ffn = 2 * h * ff + ((ff + h) if biases else 0)
    norm = 2 * h
    enc_only = cfg.mode == 'encoder_only'
    stacks = [(1, 2)] if enc_only else [(1, 2), (2, 3)]  # (attention blocks, norm sites) per level

    total = 0
    for n_attn, sites in stacks:
        if cfg.arch == 'vanilla':
            total += n * (n_attn * attn + ffn + sites * norm)
        elif cfg.arch == 'universal':
            total += n_attn * attn + ffn + sites * norm
        elif cfg.arch == 'owf':
            total += n * (n_attn * attn + sites * norm)
        else:
            total += n_attn * attn + ffn + n * sites * norm
        if cfg.placement == 'pre':
            total += norm
    if cfg.arch == 'owf':
        total += ffn
    if cfg.arch == 'ringformer':
        total += signal_param_count(h, cfg.policy, cfg.variant, n, cfg.mode, ff)

    if exclusions == 'none':
        if enc_only:
            total += cfg.patch_dim * h + (h if biases else 0) + h
            total += cfg.n_tokens * h if cfg.position_kind == 'learned' else 0
            total += h * cfg.num_classes + (cfg.num_classes if biases else 0)
        else:
            total += 2 * cfg.vocab_size * h
            total += 2 * cfg.max_seq_len * h if cfg.position_kind == 'learned' else 0
            total += h * cfg.vocab_size + (cfg.vocab_size if biases else 0)
    return total


# ============ FLOP ACCOUNTING ============

FLOP_COMPONENTS = ('projections', 'attention_scores', 'attention_mixing', 'ffn', 'signals', 'embeddings', 'head')


@dataclass
class FlopReport:
    """Multiply-accumulates per forward pass; 1 MAC counts as 1 FLOP."""
    components: dict
    n_tokens: int
    signal_convention: str = 'mac'

    @property
    def total_macs(self):
        return sum(self.components.values())

    @property
    def gflops(self):
        return self.total_macs / 1e9


def _signal_macs(cfg, n):
    if not cfg.has_signal_pairs:
        return 0
    h, r, variant = cfg.hidden, cfg.rank, cfg.variant
    macs = 0
    if variant.has_attn_pairs:
        macs += 3 * 2 * n * h * r
    if variant.has_ffn_pair:
        macs += n * h * r + n * r * variant.ffn_out_dim(h, cfg.ff)
    return macs


def _stack_macs(cfg, n, m=None, scale=1):
    """Per-stack MACs over n tokens; m is the memory length for a decoder stack."""
    h, ff, levels = cfg.hidden, cfg.ff, cfg.levels
    c = dict.fromkeys(FLOP_COMPONENTS, 0)
    c['projections'] = levels * 4 * n * h * h
    c['attention_scores'] = levels * n * n * h
    c['attention_mixing'] = levels * n * n * h
    c['ffn'] = levels * 2 * n * h * ff
    c['signals'] = levels * _signal_macs(cfg, n) * scale
    if m is not None:
        c['projections'] += levels * (2 * n * h * h + 2 * m * h * h)
        c['attention_scores'] += levels * n * m * h
        c['attention_mixing'] += levels * n * m * h
    return c


def count_flops(cfg, n_tokens, signal_convention='mac', src_tokens=None):
    """
    MAC count of one forward pass over n_tokens (encoder-only: patches + class
    token; encoder-decoder: target tokens, with src_tokens source tokens,
    default the same). signal_convention='two_flop' counts each signal MAC twice.
    """
    if signal_convention not in ('mac', 'two_flop'):
        raise ConfigurationError(f"Unknown signal convention '{signal_convention}'")
    if n_tokens < 1 or (src_tokens is not None and src_tokens < 1):
        raise ConfigurationError(f"token counts must be ≥ 1, got {n_tokens} and {src_tokens}")
    scale = 2 if signal_convention == 'two_flop' else 1
    h = cfg.hidden
    if cfg.mode == 'encoder_only':
        c = _stack_macs(cfg, n_tokens, scale=scale)
        c['embeddings'] = (n_tokens - 1) * cfg.patch_dim * h
        c['head'] = h * cfg.num_classes
    else:
        m = src_tokens or n_tokens
        enc = _stack_macs(cfg, m, scale=scale)
        dec = _stack_macs(cfg, n_tokens, m, scale=scale)
        c = {k: enc[k] + dec[k] for k in FLOP_COMPONENTS}
        c['head'] = n_tokens * h * cfg.vocab_size
    return FlopReport(components=c, n_tokens=n_tokens, signal_convention=signal_convention)


# ============ PRESETS ============

def _translation(arch, hidden, ff, heads, **extra):
    return dict(arch=arch, mode='encoder_decoder', hidden=hidden, ff=ff, levels=6, heads=heads,
                vocab_size=52000, max_seq_len=50, **extra)


def _vision(arch, hidden, ff, levels, heads, classes, **extra):
    return dict(arch=arch, mode='encoder_only', hidden=hidden, ff=ff, levels=levels, heads=heads,
                image_size=224, patch_size=16, channels=3, num_classes=classes, **extra)


PRESETS = {}
for _arch in ARCHS:
    PRESETS[f"translation-base-{_arch}"] = _translation(_arch, 512, 2048, 8)
    PRESETS[f"translation-large-{_arch}"] = _translation(_arch, 1024, 4096, 16)
    PRESETS[f"vit-base-{_arch}"] = _vision(_arch, 768, 3072, 12, 12, 1000)
    PRESETS[f"imagenet-small-{_arch}"] = _vision(_arch, 512, 2048, 6, 8, 100)
PRESETS.update({
    'imagenet-small-vanilla-down': _vision('vanilla', 328, 1536, 6, 8, 100),
    'imagenet-small-owf-down': _vision('owf', 376, 1024, 6, 8, 100),
    'imagenet-small-universal-up': _vision('universal', 848, 3072, 6, 8, 100),
    'imagenet-small-ringformer-up': _vision('ringformer', 728, 3072, 6, 8, 100),
    'vit-base-universal-up': _vision('universal', 1560, 6240, 12, 12, 1000),
    'vit-base-ringformer-up': _vision('ringformer', 1284, 5120, 12, 12, 1000),
})
for _variant in SignalVariant:
    PRESETS[f"ablation-{_variant.value}"] = _translation('ringformer', 128, 512, 4, signal_variant=_variant.value)
for _label, _policy in (('h32', 'ratio:32'), ('h8', 'ratio:8'), ('full-rank', 'full')):
    PRESETS[f"ablation-rank-{_label}"] = _translation('ringformer', 128, 512, 4, rank_policy=_policy)


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})")
    return ModelConfig(**{**PRESETS[name], **overrides})
