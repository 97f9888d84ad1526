"""
Depth-specific, input-dependent low-rank level signals.

Each level i owns factor pairs (A_i, B_i) with g_i(x) = x·B_i·A_iᵀ, i.e. the
rank-r matrix M_i = A_i·B_iᵀ applied to x without ever being materialized.
A is Gaussian with std 1/√r and B starts at zero, so a fresh model behaves
exactly like the signal-free shared-block recurrence.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum

from nn_core import ConfigurationError, DimensionError, Module, ParamFactory, matmul

logger = logging.getLogger(__name__)


class SignalVariant(str, Enum):
    FULL = 'full'
    STATIC_SINUSOIDAL = 'static_sinusoidal'
    NO_ATTN_SIGNAL = 'no_attn_signal'
    NO_FFN_SIGNAL = 'no_ffn_signal'
    BEFORE_ATTN = 'before_attn'
    INTER_FFN = 'inter_ffn'

    @classmethod
    def parse(cls, value):
        try:
            return cls(value)
        except ValueError:
            choices = ', '.join(v.value for v in cls)
            raise ConfigurationError(f"Unknown signal variant '{value}' (choose from {choices})") from None

    @property
    def has_attn_pairs(self):
        return self not in (SignalVariant.STATIC_SINUSOIDAL, SignalVariant.NO_ATTN_SIGNAL)

    @property
    def has_ffn_pair(self):
        return self not in (SignalVariant.STATIC_SINUSOIDAL, SignalVariant.NO_FFN_SIGNAL)

    @property
    def attn_site(self):
        return 'before' if self is SignalVariant.BEFORE_ATTN else 'after'

    @property
    def ffn_site(self):
        return 'inter' if self is SignalVariant.INTER_FFN else 'input'

    def ffn_out_dim(self, hidden, ff):
        return ff if self is SignalVariant.INTER_FFN else hidden


_POLICY_RE = re.compile(r'^\s*(?:(ratio|explicit)\s*:\s*(\d+)|(full)|H\s*/\s*(\d+))\s*$')


@dataclass(frozen=True)
class RankPolicy:
    """ratio(divisor) → r = floor(H / divisor); explicit(r); full → r = H."""

    mode: str = 'ratio'
    value: int = 16

    @classmethod
    def parse(cls, text):
        if isinstance(text, RankPolicy):
            return text
        match = _POLICY_RE.match(str(text))
        if not match:
            raise ConfigurationError(f"Bad rank policy '{text}' (use ratio:N, explicit:R, full or H/N)")
        if match.group(3):
            return cls('full', 0)
        if match.group(4):
            return cls('ratio', int(match.group(4)))
        return cls(match.group(1), int(match.group(2)))

    def __str__(self):
        return 'full' if self.mode == 'full' else f"{self.mode}:{self.value}"

    def resolve(self, hidden):
        if self.mode == 'full':
            return hidden
        if self.mode == 'ratio':
            if self.value < 1:
                raise ConfigurationError(f"rank divisor must be ≥ 1, got {self.value}")
            rank = hidden // self.value
        else:
            rank = self.value
        if rank < 1:
            raise ConfigurationError(f"rank policy {self} gives rank {rank} < 1 for hidden size {hidden}")
        if rank > hidden:
            raise ConfigurationError(f"rank {rank} exceeds hidden size {hidden}")
        return rank


class LowRankFactorPair(Module):
    """A[out×r], B[in×r]; g(x) = (x·B)·Aᵀ."""

    def __init__(self, factory, prefix, in_dim, out_dim, rank):
        self.rank = rank
        self.a = factory.normal(f"{prefix}.a", (out_dim, rank), rank ** -0.5, role='signal', group='signals')
        self.b = factory.zeros(f"{prefix}.b", (in_dim, rank), role='signal', group='signals')

    def __call__(self, x):
        return apply_signal(self, x)

    def materialize(self):
        """The dense M = A·Bᵀ (tests and diagnostics only)."""
        return self.a.data @ self.b.data.T


class LayerNormParams(Module):
    def __init__(self, factory, prefix, dim, eps=1e-5):
        self.eps = eps
        self.gamma = factory.ones(f"{prefix}.gamma", (dim,), role='norm', group='norms')
        self.beta = factory.zeros(f"{prefix}.beta", (dim,), role='norm', group='norms')


class LevelSignalSet(Module):
    """Everything level i owns: its q/k/v/f factor pairs and its layer norms."""

    def __init__(self, level, q=None, k=None, v=None, f=None, ln_attn=None, ln_ffn=None, ln_cross=None,
                 variant=SignalVariant.FULL):
        self.level = level
        self.q, self.k, self.v, self.f = q, k, v, f
        self.ln_attn, self.ln_ffn, self.ln_cross = ln_attn, ln_ffn, ln_cross
        self.variant = variant

    @property
    def pairs(self):
        return [p for p in (self.q, self.k, self.v, self.f) if p is not None]

    def without_pairs(self):
        """Same norms, no signals: the plain shared-block recurrence at this level."""
        return LevelSignalSet(self.level, ln_attn=self.ln_attn, ln_ffn=self.ln_ffn, ln_cross=self.ln_cross,
                              variant=self.variant)


def make_level_signals(hidden, levels, policy, variant, with_cross_ln, rng=None, *, ff=None,
                       prefix='encoder', factory=None, dtype='float32', eps=1e-5):
    """One LevelSignalSet per level 1..N, LoRA-style init (A Gaussian, B zero)."""
    if hidden < 1 or levels < 1:
        raise ConfigurationError(f"need hidden ≥ 1 and levels ≥ 1, got {hidden} and {levels}")
    policy = RankPolicy.parse(policy)
    variant = SignalVariant.parse(variant)
    factory = factory or ParamFactory(rng, dtype=dtype)
    has_pairs = variant.has_attn_pairs or variant.has_ffn_pair
    rank = policy.resolve(hidden) if has_pairs else 0
    f_out = variant.ffn_out_dim(hidden, ff if ff is not None else hidden)
    sets = []
    for level in range(1, levels + 1):
        base = f"{prefix}.levels.{level}"
        pairs = {}
        if variant.has_attn_pairs:
            for name in ('q', 'k', 'v'):
                pairs[name] = LowRankFactorPair(factory, f"{base}.signal_{name}", hidden, hidden, rank)
        if variant.has_ffn_pair:
            pairs['f'] = LowRankFactorPair(factory, f"{base}.signal_f", hidden, f_out, rank)
        sets.append(LevelSignalSet(
            level,
            ln_attn=LayerNormParams(factory, f"{base}.ln_attn", hidden, eps),
            ln_ffn=LayerNormParams(factory, f"{base}.ln_ffn", hidden, eps),
            ln_cross=LayerNormParams(factory, f"{base}.ln_cross", hidden, eps) if with_cross_ln else None,
            variant=variant,
            **pairs,
        ))
    logger.debug(f"Built {levels} level signal sets under '{prefix}' (rank {rank}, variant {variant.value})")
    return sets


def apply_signal(pair, x):
    """(x·B)·Aᵀ through two rank-r products."""
    if x.shape[-1] != pair.b.shape[0]:
        raise DimensionError(f"signal input last extent {x.shape[-1]} does not match B {pair.b.shape}")
    return matmul(matmul(x, pair.b), pair.a.swapaxes(0, 1))


# ============ ACCOUNTING ============

def _pair_count(in_dim, out_dim, rank):
    return (in_dim + out_dim) * rank


def signal_param_count(hidden, policy, variant, levels, mode, ff=None, include_norms=False):
    """
    Closed-form count of level-signal parameters. Both stacks carry q, k, v
    and f pairs (cross-attention has none); with include_norms, each level
    adds 2·H per norm site (2 encoder sites, 3 decoder sites).
    """
    policy = RankPolicy.parse(policy)
    variant = SignalVariant.parse(variant)
    rank = policy.resolve(hidden) if variant.has_attn_pairs or variant.has_ffn_pair else 0
    per_level = 0
    if variant.has_attn_pairs:
        per_level += 3 * _pair_count(hidden, hidden, rank)
    if variant.has_ffn_pair:
        per_level += _pair_count(hidden, variant.ffn_out_dim(hidden, ff or hidden), rank)
    stacks = 2 if mode == 'encoder_decoder' else 1
    total = stacks * levels * per_level
    if include_norms:
        sites = 2 + (3 if mode == 'encoder_decoder' else 0)
        total += levels * sites * 2 * hidden
    return total


ABLATIONS = {
    'static signal': ('static_sinusoidal', None),
    'w.o. attn signal': ('no_attn_signal', None),
    'w.o. FF signal': ('no_ffn_signal', None),
    'before attn': ('before_attn', None),
    'inter-FF signal': ('inter_ffn', None),
    'H / 32 rank signal': ('full', 'ratio:32'),
    'H / 8 rank signal': ('full', 'ratio:8'),
    'full-rank signal': ('full', 'full'),
}


def ablation_deltas(hidden, ff, levels, mode, base_policy='ratio:16'):
    """Parameter delta of each ablation row relative to the default design."""
    reference = signal_param_count(hidden, base_policy, 'full', levels, mode, ff)
    deltas = {}
    for label, (variant, policy) in ABLATIONS.items():
        count = signal_param_count(hidden, policy or base_policy, variant, levels, mode, ff)
        deltas[label] = count - reference
    return deltas
