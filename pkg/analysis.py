"""
Diagnostics over captured forward traces:
- linear CKA similarity of per-level representations (grids between two models)
- mean attention distance per (level, head) for patch-based encoders
- CSV / JSON report emission
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from model_zoo import CONVENTIONS, ForwardTrace, ModelTraces, input_digest
from nn_core import ConfigurationError, DimensionError, UndefinedError, no_grad

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = '%.9g'


class AnalysisError(ConfigurationError):
    """Traces or attention maps that cannot be analysed together."""


@dataclass
class AnalysisSpec:
    kind: str = 'cka'
    format: str = 'csv'
    images: int = 500
    samples: int = 64
    batch_size: int = 64
    stack: str = 'both'
    seed: int = 0
    out: Optional[str] = None
    # parameter and FLOP counting
    convention: str = 'weights_only'
    exclude_embeddings: bool = True
    ablations: bool = False
    tokens: Optional[int] = None
    src_tokens: Optional[int] = None
    signal_convention: str = 'mac'

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in ('cka', 'mad'):
            raise ConfigurationError(f"Unknown analysis kind '{self.kind}' (use cka or mad)")
        if self.format not in ('csv', 'json'):
            raise ConfigurationError(f"Unknown report format '{self.format}' (use csv or json)")
        if self.stack not in ('encoder', 'decoder', 'both'):
            raise ConfigurationError(f"stack must be encoder, decoder or both, got '{self.stack}'")
        if self.images < 1 or self.samples < 2 or self.batch_size < 1:
            raise ConfigurationError("images and batch_size must be ≥ 1, samples ≥ 2")
        if self.convention not in CONVENTIONS + ('both',):
            raise ConfigurationError(f"convention must be {', '.join(CONVENTIONS)} or both, got '{self.convention}'")
        if self.signal_convention not in ('mac', 'two_flop', 'both'):
            raise ConfigurationError(f"unknown signal_convention '{self.signal_convention}' (mac, two_flop or both)")
        if any(n is not None and n < 1 for n in (self.tokens, self.src_tokens)):
            raise ConfigurationError("tokens and src_tokens must be ≥ 1")


@dataclass
class RepresentationMatrix:
    data: np.ndarray
    layer_index: int = 0
    model_tag: str = ''


@dataclass
class CkaGrid:
    values: np.ndarray
    row_model: str = 'a'
    col_model: str = 'b'
    stack: str = 'encoder'


@dataclass
class PatchGeometry:
    patches_per_side: int
    patch_size: int

    @property
    def diameter(self):
        return self.patch_size * np.sqrt(2.0) * (self.patches_per_side - 1)


@dataclass
class AttentionDistanceReport:
    """values[level][head] in pixels."""
    values: np.ndarray
    geometry: PatchGeometry
    model_tag: str = 'model'
    n_images: int = 0


# ============ TRACE CAPTURE ============

def _merge_traces(records, digest):
    if records[0] is None:
        return None
    first = records[0]
    return ForwardTrace(
        hidden=[np.concatenate([r.hidden[i] for r in records]) for i in range(len(first.hidden))],
        attn_maps=[np.concatenate([r.attn_maps[i] for r in records]) for i in range(len(first.attn_maps))],
        cross_maps=[np.concatenate([r.cross_maps[i] for r in records]) for i in range(len(first.cross_maps))],
        input_digest=digest,
        has_class_token=first.has_class_token,
    )


def capture_traces(model, inputs, tgt_in=None, batch_size=64):
    """Traced forward over `inputs` in chunks, merged back into one ModelTraces."""
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise AnalysisError("cannot trace an empty evaluation batch")
    parts = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            chunk_tgt = None if tgt_in is None else tgt_in[start:start + batch_size]
            _, traces = model.forward(inputs[start:start + batch_size], chunk_tgt, trace=True)
            parts.append(traces)
    encoder = _merge_traces([p.encoder for p in parts], input_digest(inputs))
    decoder = _merge_traces([p.decoder for p in parts], input_digest(tgt_in) if tgt_in is not None else '')
    return ModelTraces(encoder, decoder)


# ============ CKA ============

def _as_matrix(x):
    data = x.data if isinstance(x, RepresentationMatrix) else x
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"representation must be [n_samples × d], got shape {data.shape}")
    if data.shape[0] < 2:
        raise DimensionError(f"CKA needs at least 2 samples, got {data.shape[0]}")
    return data


def _center(x):
    centered = x - x.mean(axis=0, keepdims=True)
    scale = max(1.0, float(np.abs(x).max()))
    if np.abs(centered).max() <= 1e-12 * scale:
        raise UndefinedError("CKA is undefined for a zero-variance representation (all rows identical)")
    return centered


def linear_cka(x, y):
    """‖YᵀX‖²_F / (‖XᵀX‖_F·‖YᵀY‖_F) on column-centered X, Y, in float64."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"CKA sample counts differ: {x.shape} vs {y.shape}")
    x, y = _center(x), _center(y)
    # fixed argument order makes the score exactly symmetric
    if (x.shape[1], x.tobytes()) > (y.shape[1], y.tobytes()):
        x, y = y, x
    cross = np.linalg.norm(y.T @ x) ** 2
    norm_x = np.linalg.norm(x.T @ x)
    norm_y = np.linalg.norm(y.T @ y)
    return float(cross / (norm_x * norm_y))


def _check_same_batch(trace_a, trace_b):
    if not trace_a.hidden or not trace_b.hidden:
        raise AnalysisError("CKA needs traces with at least one hidden state")
    shape_a, shape_b = trace_a.hidden[0].shape[:-1], trace_b.hidden[0].shape[:-1]
    if shape_a != shape_b:
        raise AnalysisError(f"traces cover different batches: {shape_a} vs {shape_b}")
    if trace_a.input_digest and trace_b.input_digest and trace_a.input_digest != trace_b.input_digest:
        raise AnalysisError(f"traces were captured on different inputs "
                            f"({trace_a.input_digest} vs {trace_b.input_digest})")


def cka_grid(trace_a, trace_b, tags=('a', 'b'), stack='encoder'):
    """Entry (i, j) = linear_cka(level i of a, level j of b); tokens pooled into samples."""
    _check_same_batch(trace_a, trace_b)
    flat_a = [h.reshape(-1, h.shape[-1]) for h in trace_a.hidden]
    flat_b = [h.reshape(-1, h.shape[-1]) for h in trace_b.hidden]
    values = np.empty((len(flat_a), len(flat_b)))
    for i, x in enumerate(flat_a):
        for j, y in enumerate(flat_b):
            values[i, j] = linear_cka(x, y)
    logger.debug(f"CKA grid {tags[0]} × {tags[1]} ({stack}): mean diagonal "
                 f"{np.mean(np.diag(values)):.4f}")
    return CkaGrid(values, tags[0], tags[1], stack)


# ============ MEAN ATTENTION DISTANCE ============

def _patch_distances(geometry):
    g = geometry.patches_per_side
    rows, cols = np.divmod(np.arange(g * g), g)
    centers = np.stack([rows, cols], axis=1).astype(np.float64) * geometry.patch_size
    return cdist(centers, centers)


def mean_attention_distance(attn, geometry, has_class_token=True):
    """
    Attention-weighted pixel distance between patch centers, averaged over
    query patches. attn is [..., n, n]; a leading image axis of a 4-D
    [images, heads, n, n] input is averaged away, giving one value per head.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim < 2:
        raise AnalysisError(f"attention map must be at least 2-D, got shape {a.shape}")
    if has_class_token:
        a = a[..., 1:, 1:]
    n = geometry.patches_per_side ** 2
    if a.shape[-2:] != (n, n):
        raise AnalysisError(f"attention over {a.shape[-1]} patches does not fit a "
                            f"{geometry.patches_per_side}×{geometry.patches_per_side} grid")
    totals = a.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise AnalysisError("attention row has no mass left on patch tokens")
    per_query = (a / totals * _patch_distances(geometry)).sum(axis=-1)
    per_head = per_query.mean(axis=-1)
    if per_head.ndim == 2:
        per_head = per_head.mean(axis=0)
    return per_head


def attention_distance_report(trace, geometry, model_tag='model'):
    """MAD for every level and head of a traced encoder forward."""
    if not trace.attn_maps:
        raise AnalysisError("trace holds no attention maps (was the forward traced?)")
    values = np.stack([mean_attention_distance(m, geometry, trace.has_class_token) for m in trace.attn_maps])
    n_images = trace.attn_maps[0].shape[0] if trace.attn_maps[0].ndim == 4 else 1
    return AttentionDistanceReport(values, geometry, model_tag, n_images)


# ============ REPORTS ============

def _report_frame(report):
    if isinstance(report, CkaGrid):
        values = np.asarray(report.values)
        if values.size == 0:
            raise ConfigurationError("cannot emit an empty CKA grid")
        columns = [f"{report.col_model}:{j}" for j in range(values.shape[1])]
        frame = pd.DataFrame(values, columns=columns)
        frame.insert(0, f"{report.row_model}\\{report.col_model}", np.arange(values.shape[0]))
        return frame
    values = np.asarray(report.values)
    if values.size == 0:
        raise ConfigurationError("cannot emit an empty attention-distance report")
    frame = pd.DataFrame(values, columns=[f"head_{h}" for h in range(values.shape[1])])
    frame.insert(0, 'level', np.arange(1, values.shape[0] + 1))
    return frame


def report_payload(report):
    """JSON-ready dict: {schema_version, kind, models, levels, values}."""
    _report_frame(report)
    values = [[float(FLOAT_FORMAT % v) for v in row] for row in np.asarray(report.values)]
    if isinstance(report, CkaGrid):
        return {'schema_version': SCHEMA_VERSION, 'kind': 'cka', 'models': [report.row_model, report.col_model],
                'levels': len(values) - 1, 'values': values}
    return {'schema_version': SCHEMA_VERSION, 'kind': 'mad', 'models': [report.model_tag],
            'levels': len(values), 'values': values}


def emit_report(report, fmt, path):
    """Write a CkaGrid or AttentionDistanceReport as csv or json; returns the path."""
    if fmt not in ('csv', 'json'):
        raise ConfigurationError(f"Unknown report format '{fmt}' (use csv or json)")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    if fmt == 'csv':
        _report_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    else:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(report_payload(report), f, indent=2)
            f.write('\n')
    logger.info(f"Wrote {fmt} report to {path}")
    return path


def summarize(report):
    """One-line human summary for CLI output."""
    if isinstance(report, CkaGrid):
        diag = np.diag(report.values) if report.values.shape[0] == report.values.shape[1] else report.values[0]
        return f"CKA {report.stack} {report.row_model}×{report.col_model}: mean diagonal {np.mean(diag):.4f}"
    return (f"MAD {report.model_tag}: {report.values.shape[0]} levels × {report.values.shape[1]} heads, "
            f"range {report.values.min():.2f}–{report.values.max():.2f} px")
