"""
Desk-scale training and evaluation.

Synthetic tasks (sequence copy / reverse / sort, procedurally drawn shape
classification), Adam with warm-up + cosine schedule and global-norm
clipping, greedy-decode evaluation with corpus BLEU, and a versioned binary
container used for both checkpoints and image datasets:

    b'RFTC' | uint64 LE manifest length | JSON manifest | raw LE payload
"""
import json
import logging
import math
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from model_zoo import BOS, EOS, ModelConfig, build_model
from nn_core import (
    AdamState,
    ConfigurationError,
    DimensionError,
    NumericError,
    RingFormerError,
    Rng,
    UndefinedError,
    adam_step,
    clip_global_norm,
    cosine_warmup_lr,
    cross_entropy,
    no_grad,
)

logger = logging.getLogger(__name__)

MAGIC = b'RFTC'
SCHEMA_VERSION = 1
JSONL_FORMAT = 'ringformer-jsonl'
METRICS_COLUMNS = ['step', 'loss', 'token_acc', 'seq_acc', 'bleu', 'lr']

SEQ_TASKS = ('seq_copy', 'seq_reverse', 'seq_sort')
TASK_KINDS = SEQ_TASKS + ('shapes_classify', 'external')
SHAPES = ('circle', 'square', 'triangle', 'cross', 'diamond', 'hline', 'vline', 'ring')
PAD_TARGET = -1
MANIFEST_KEYS = ('kind', 'meta', 'tensors')
CHECKPOINT_META_KEYS = ('model_config', 'step', 'rng_state')


# ============ ERRORS ============

class DivergenceError(RingFormerError):
    def __init__(self, step, checkpoint_path=None):
        where = f"; last good state saved to {checkpoint_path}" if checkpoint_path else ""
        super().__init__(f"Training diverged at step {step} (non-finite loss or gradient){where}")
        self.step = step
        self.checkpoint_path = checkpoint_path


class CheckpointError(RingFormerError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class NameMismatchError(CheckpointError):
    pass


# ============ CONFIG TYPES ============

@dataclass
class TaskSpec:
    kind: str = 'seq_copy'
    vocab_size: int = 32
    seq_len: int = 16
    classes: int = 4
    image_size: int = 16
    n_train: int = 2000
    n_eval: int = 200
    seed: int = 0
    path: Optional[str] = None
    eval_path: Optional[str] = None
    # gen-data output
    split: str = 'train'
    out: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"Unknown task kind '{self.kind}' (choose from {', '.join(TASK_KINDS)})")
        if self.n_train < 0 or self.n_eval < 0:
            raise ConfigurationError("n_train and n_eval must be ≥ 0")
        if self.split not in ('train', 'eval'):
            raise ConfigurationError(f"split must be train or eval, got '{self.split}'")
        if self.kind in SEQ_TASKS:
            if self.vocab_size < 3:
                raise ConfigurationError(f"vocab_size must leave room for data tokens, got {self.vocab_size}")
            if self.seq_len < 1:
                raise ConfigurationError(f"seq_len must be ≥ 1, got {self.seq_len}")
        elif self.kind == 'shapes_classify':
            if not 1 <= self.classes <= len(SHAPES):
                raise ConfigurationError(f"shapes_classify renders {len(SHAPES)} shapes, asked for {self.classes} classes")
            if self.image_size < 8:
                raise ConfigurationError(f"image_size must be ≥ 8, got {self.image_size}")
        elif not self.path:
            raise ConfigurationError("external task needs a dataset path")


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 32
    clip_norm: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    out_dir: Optional[str] = None
    resume: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("total_steps and warmup_steps must be ≥ 0")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigurationError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})")
        if self.batch_size < 1 or self.eval_every < 1 or self.eval_samples < 1:
            raise ConfigurationError("batch_size, eval_every and eval_samples must be ≥ 1")
        if self.clip_norm <= 0 or self.max_lr <= 0:
            raise ConfigurationError("clip_norm and max_lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class MetricsRecord:
    step: int
    loss: float
    token_acc: float
    seq_acc: float
    bleu: Optional[float] = None
    lr: float = 0.0

    def summary(self):
        bleu = f" bleu={self.bleu:.4f}" if self.bleu is not None else ""
        return (f"step={self.step} loss={self.loss:.4f} token_acc={self.token_acc:.4f} "
                f"seq_acc={self.seq_acc:.4f}{bleu} lr={self.lr:.3g}")


@dataclass
class Dataset:
    """
    kind 'seq2seq': inputs/targets are lists of int arrays (ids ≥ 2).
    kind 'classification': inputs [n, 1, S, S] float32, targets [n] int.
    """
    kind: str
    inputs: object
    targets: object
    task: str = ''
    vocab_size: int = 0
    classes: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if self.kind == 'classification':
            return Dataset(self.kind, self.inputs[indices], self.targets[indices], self.task, self.vocab_size,
                           self.classes, self.meta)
        return Dataset(self.kind, [self.inputs[i] for i in indices], [self.targets[i] for i in indices],
                       self.task, self.vocab_size, self.classes, self.meta)


# ============ SYNTHETIC TASKS ============

def _shape_mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dx * dx + dy * dy)
    if shape == 'circle':
        return dist <= r
    if shape == 'square':
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == 'triangle':
        h = 0.8 * r
        return (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / 2)
    if shape == 'cross':
        arm = r / 4
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == 'diamond':
        return np.abs(dx) + np.abs(dy) <= r
    if shape == 'hline':
        return (np.abs(dy) <= r / 5) & (np.abs(dx) <= r)
    if shape == 'vline':
        return (np.abs(dx) <= r / 5) & (np.abs(dy) <= r)
    return (dist <= r) & (dist >= r / 2)


def render_shapes(labels, image_size, rng):
    """One grayscale image [1, S, S] per label, random position/size/brightness plus light noise."""
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.zeros((len(labels), 1, s, s), dtype=np.float32)
    for i, label in enumerate(labels):
        r = rng.uniform((), s / 5, s / 3)
        cy, cx = rng.uniform((2,), r, s - 1 - r)
        level = rng.uniform((), 0.6, 1.0)
        noise = rng.normal((s, s), 0.05)
        images[i, 0] = _shape_mask(SHAPES[int(label)], yy, xx, cy, cx, r) * level + noise
    return images


def _split_rng(spec, split):
    # train and eval splits draw from independent Philox streams of the same seed
    return Rng(spec.seed * 2 + (1 if split == 'eval' else 0))


def generate_task(spec, split='train'):
    """Deterministic dataset for (spec, split); split 'train' has n_train samples, 'eval' n_eval."""
    spec.validate()
    if spec.kind == 'external':
        path = spec.path if split == 'train' else (spec.eval_path or spec.path)
        return load_dataset(path)
    rng = _split_rng(spec, split)
    n = spec.n_train if split == 'train' else spec.n_eval
    if spec.kind == 'shapes_classify':
        labels = rng.integers(0, spec.classes, (n,)).astype(np.int64)
        images = render_shapes(labels, spec.image_size, rng)
        return Dataset('classification', images, labels, spec.kind, classes=spec.classes,
                       meta={'image_size': spec.image_size})
    src = rng.integers(2, spec.vocab_size, (n, spec.seq_len)).astype(np.int64)
    if spec.kind == 'seq_copy':
        tgt = src.copy()
    elif spec.kind == 'seq_reverse':
        tgt = src[:, ::-1].copy()
    else:
        tgt = np.sort(src, axis=1)
    return Dataset('seq2seq', list(src), list(tgt), spec.kind, vocab_size=spec.vocab_size)


def check_compatible(model_cfg, dataset):
    if dataset.kind == 'classification':
        if model_cfg.mode != 'encoder_only':
            raise ConfigurationError("classification tasks need an encoder_only model")
        if dataset.classes > model_cfg.num_classes:
            raise ConfigurationError(f"task has {dataset.classes} classes, model head has {model_cfg.num_classes}")
        if len(dataset) and tuple(dataset.inputs.shape[1:]) != (model_cfg.channels, model_cfg.image_size,
                                                                 model_cfg.image_size):
            raise ConfigurationError(f"images {dataset.inputs.shape[1:]} do not match the model's "
                                     f"{model_cfg.channels}×{model_cfg.image_size}×{model_cfg.image_size} input")
        return
    if model_cfg.mode != 'encoder_decoder':
        raise ConfigurationError("sequence tasks need an encoder_decoder model")
    if dataset.vocab_size > model_cfg.vocab_size:
        raise ConfigurationError(f"task vocab {dataset.vocab_size} exceeds model vocab {model_cfg.vocab_size}")
    longest = max((max(len(s), len(t) + 1) for s, t in zip(dataset.inputs, dataset.targets)), default=0)
    if model_cfg.position_kind == 'learned' and longest > model_cfg.max_seq_len:
        raise ConfigurationError(f"sequences of length {longest} exceed max_seq_len {model_cfg.max_seq_len}")


# ============ BATCHING & LOSS ============

def _pad(rows, value, width=None):
    width = width or max(len(r) for r in rows)
    out = np.full((len(rows), width), value, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def collate(dataset, indices):
    """(inputs, decoder inputs, targets); padded target positions are ignored by the loss."""
    if dataset.kind == 'classification':
        return dataset.inputs[indices], None, dataset.targets[indices]
    src = _pad([dataset.inputs[i] for i in indices], EOS)
    tgt_in = _pad([np.concatenate([[BOS], dataset.targets[i]]) for i in indices], EOS)
    tgt_out = _pad([np.concatenate([dataset.targets[i], [EOS]]) for i in indices], PAD_TARGET)
    return src, tgt_in, tgt_out


def batch_loss(model, dataset, indices, *, training=False, rng=None, dropout_rate=None):
    inputs, tgt_in, targets = collate(dataset, indices)
    logits, _ = model.forward(inputs, tgt_in, training=training, rng=rng, dropout_rate=dropout_rate)
    return cross_entropy(logits, targets, ignore_index=PAD_TARGET)


# ============ METRICS ============

def bleu(hypotheses, references, max_n=4):
    """
    Corpus BLEU: clipped n-gram matches summed over the corpus, unsmoothed
    unigram precision, add-one smoothing for n ≥ 2, brevity penalty
    exp(min(0, 1 − ref_len/hyp_len)).
    """
    if len(hypotheses) != len(references):
        raise DimensionError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise UndefinedError("BLEU of an empty corpus is undefined")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = [int(t) for t in hyp], [int(t) for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_grams = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
            ref_grams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            matches[n - 1] += sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_precision = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_precision += math.log((matches[n] + 1) / (totals[n] + 1))
    brevity = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return brevity * math.exp(log_precision / max_n)


def greedy_decode(model, src, max_len):
    """Argmax decoding from BOS; each row stops at its first EOS (excluded from the output)."""
    src = np.asarray(src)
    with no_grad():
        memory, _ = model.encode(src)
        ys = np.full((src.shape[0], 1), BOS, dtype=np.int64)
        done = np.zeros(src.shape[0], dtype=bool)
        for _ in range(max_len):
            logits, _ = model.decode(ys, memory)
            nxt = logits.data[:, -1].argmax(axis=-1)
            nxt = np.where(done, EOS, nxt)
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in ys[:, 1:]:
        stop = np.flatnonzero(row == EOS)
        out.append(row[:stop[0]] if stop.size else row)
    return out


def token_accuracy(hypotheses, references):
    """Fraction of reference positions whose hypothesis token matches (missing positions count as wrong)."""
    correct = total = 0
    for hyp, ref in zip(hypotheses, references):
        n = min(len(hyp), len(ref))
        correct += int(np.sum(np.asarray(hyp[:n]) == np.asarray(ref[:n])))
        total += len(ref)
    return correct / total if total else 0.0


def evaluate(model, dataset, metrics=('token_acc', 'seq_acc', 'bleu'), batch_size=64, step=0, lr=0.0):
    """
    Teacher-forced loss plus greedy-decode accuracies (and BLEU) for seq2seq;
    class accuracy (reported as both token_acc and seq_acc) for classification.
    """
    if len(dataset) == 0:
        raise UndefinedError("cannot evaluate on an empty dataset")
    losses, weights = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            losses.append(batch_loss(model, dataset, idx).item())
            weights.append(len(idx))
    loss = float(np.average(losses, weights=weights))

    if dataset.kind == 'classification':
        with no_grad():
            preds = np.concatenate([
                model.forward(dataset.inputs[s:s + batch_size])[0].data.argmax(axis=-1)
                for s in range(0, len(dataset), batch_size)
            ])
        acc = float(np.mean(preds == dataset.targets))
        return MetricsRecord(step, loss, acc, acc, None, lr)

    hyps = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        src = _pad([dataset.inputs[i] for i in idx], EOS)
        max_len = max(len(dataset.targets[i]) for i in idx) + 4
        if model.max_target_len is not None:
            max_len = min(max_len, model.max_target_len)
        hyps.extend(greedy_decode(model, src, max_len))
    refs = list(dataset.targets)
    token_acc = token_accuracy(hyps, refs) if 'token_acc' in metrics else 0.0
    seq_acc = float(np.mean([len(h) == len(r) and np.array_equal(h, r) for h, r in zip(hyps, refs)]))
    score = bleu(hyps, refs) if 'bleu' in metrics else None
    return MetricsRecord(step, loss, token_acc, seq_acc, score, lr)


def write_metrics(records, path):
    """CSV with header step,loss,token_acc,seq_acc,bleu,lr."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.9g', lineterminator='\n')
    return path


# ============ TRAINING ============

@dataclass
class _Snapshot:
    step: int
    params: dict
    adam: AdamState
    rng_state: dict


def _snapshot(model, adam, rng, step):
    # adam_step rebinds p.data to fresh arrays, so references stay valid
    return _Snapshot(step, {p.name: p.data for p in model.named_parameters()},
                     AdamState(adam.step, dict(adam.m), dict(adam.v)), rng.get_state())


def _restore(model, snap):
    for p in model.named_parameters():
        p.data = snap.params[p.name]


def train(model, task, cfg, *, eval_data=None, rng=None, adam=None, start_step=0, stop_step=None,
          out_dir=None, progress=True):
    """
    Run steps start_step+1 .. cfg.total_steps. Step t samples a batch from
    `rng`, uses lr(t), clips gradients to cfg.clip_norm and applies Adam.
    A record is produced every eval_every steps and at cfg.total_steps.
    stop_step ends the run early without changing the schedule (for resumable runs).
    Returns (model, records).
    """
    cfg.validate()
    check_compatible(model.cfg, task)
    if len(task) == 0 and cfg.total_steps > start_step:
        raise UndefinedError("cannot train on an empty dataset")
    rng = rng if rng is not None else Rng(cfg.seed)
    adam = adam if adam is not None else AdamState()
    if eval_data is None:
        eval_data = task.subset(np.arange(min(len(task), cfg.eval_samples)))
    params = model.parameters()
    records = []

    if cfg.total_steps == 0:
        records.append(evaluate(model, eval_data, step=0, lr=0.0))
        logger.info(f"No training steps; {records[-1].summary()}")
        return model, records

    last_good = _snapshot(model, adam, rng, start_step)
    last = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    bar = tqdm(range(start_step + 1, last + 1), desc="Training", disable=not progress,
               initial=start_step, total=cfg.total_steps)
    for step in bar:
        lr = cosine_warmup_lr(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr)
        indices = rng.integers(0, len(task), (cfg.batch_size,))
        loss = batch_loss(model, task, indices, training=True, rng=rng, dropout_rate=cfg.dropout)
        loss_value = loss.item()
        try:
            if not math.isfinite(loss_value):
                raise NumericError(f"loss is {loss_value}")
            model.zero_grad()
            loss.backward()
            grads = clip_global_norm([p.grad for p in params], cfg.clip_norm)
            adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
        except NumericError as e:
            bar.close()
            _restore(model, last_good)
            path = None
            if out_dir:
                path = os.path.join(out_dir, 'last_good.ckpt')
                save_checkpoint(model, last_good.step, Rng.from_state(last_good.rng_state), path,
                                adam=last_good.adam)
            logger.error(f"Divergence at step {step}: {e}")
            raise DivergenceError(step, path) from e
        last_good = _snapshot(model, adam, rng, step)
        bar.set_postfix(loss=f"{loss_value:.4f}", lr=f"{lr:.2e}")

        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            record = evaluate(model, eval_data, step=step, lr=lr)
            record.loss = loss_value
            records.append(record)
            logger.info(record.summary())
    return model, records


# ============ BINARY CONTAINER ============

def _le(array):
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder('<'), copy=False)


def write_container(path, tensors, meta, kind):
    """Write named arrays + metadata; byte-identical for identical inputs."""
    entries, offset, blobs = [], 0, []
    for name, array in tensors.items():
        data = _le(array)
        blob = data.tobytes()
        entries.append({'name': name, 'shape': list(data.shape), 'dtype': data.dtype.str,
                        'offset': offset, 'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {'schema_version': SCHEMA_VERSION, 'kind': kind, 'meta': meta, 'tensors': entries}
    header = json.dumps(manifest, separators=(',', ':')).encode('utf-8')
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path):
    """(manifest, {name: array}); validates framing, version and payload bounds."""
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    if len(raw) < 12:
        raise TruncatedCheckpointError(f"{path}: file ends inside the header length")
    (header_len,) = struct.unpack('<Q', raw[4:12])
    if 12 + header_len > len(raw):
        raise TruncatedCheckpointError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(raw[12:12 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({e})") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest is not a JSON object")
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise VersionMismatchError(
            f"{path}: schema_version {manifest.get('schema_version')} (this build reads {SCHEMA_VERSION})")
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise CheckpointError(f"{path}: manifest lacks {missing}")
    if not isinstance(manifest['tensors'], list) or not isinstance(manifest['meta'], dict):
        raise CheckpointError(f"{path}: manifest has a malformed tensor table or meta block")
    payload = raw[12 + header_len:]
    arrays, end = {}, 0
    for entry in manifest['tensors']:
        try:
            name, start, nbytes = entry['name'], int(entry['offset']), int(entry['nbytes'])
            dtype, shape = np.dtype(entry['dtype']), tuple(entry['shape'])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed tensor entry {entry!r}") from e
        if start != end:
            raise CheckpointError(f"{path}: tensor '{name}' at offset {start}, expected {end}")
        end = start + nbytes
        if end > len(payload):
            raise TruncatedCheckpointError(f"{path}: payload truncated inside tensor '{name}'")
        try:
            array = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape)
        except ValueError as e:
            raise CheckpointError(f"{path}: tensor '{name}' does not fit shape {list(shape)}") from e
        arrays[name] = array
    if end != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end} unexpected trailing payload bytes")
    return manifest, arrays


# ============ CHECKPOINTS ============

def save_checkpoint(model, step, rng, path, adam=None):
    tensors = {p.name: p.data for p in model.named_parameters()}
    if adam is not None:
        for name in tensors.copy():
            if name in adam.m:
                tensors[f"adam.m.{name}"] = adam.m[name]
                tensors[f"adam.v.{name}"] = adam.v[name]
    meta = {'model_config': model.cfg.to_dict(), 'step': int(step), 'rng_state': rng.get_state(),
            'adam_step': adam.step if adam is not None else 0}
    write_container(path, tensors, meta, 'checkpoint')
    logger.info(f"Saved checkpoint step={step} to {path}")
    return path


def load_training_state(path):
    """(model, step, rng, AdamState) reconstructed bitwise from a checkpoint."""
    manifest, arrays = read_container(path)
    if manifest['kind'] != 'checkpoint':
        raise CheckpointError(f"{path}: holds a {manifest['kind']}, not a checkpoint")
    meta = manifest['meta']
    missing = [key for key in CHECKPOINT_META_KEYS if key not in meta]
    if missing:
        raise CheckpointError(f"{path}: checkpoint meta lacks {missing}")
    model = build_model(ModelConfig.from_dict(meta['model_config']), materialize=False)
    names = [p.name for p in model.named_parameters()]
    stored = [n for n in arrays if not n.startswith('adam.')]
    if sorted(names) != sorted(stored):
        missing = sorted(set(names) - set(stored))
        extra = sorted(set(stored) - set(names))
        raise NameMismatchError(f"{path}: parameter names disagree (missing {missing[:5]}, unexpected {extra[:5]})")
    model.load_state_dict({n: arrays[n] for n in names})
    adam = AdamState(meta.get('adam_step', 0))
    for n in names:
        if f"adam.m.{n}" in arrays:
            adam.m[n] = arrays[f"adam.m.{n}"].astype(arrays[n].dtype)
            adam.v[n] = arrays[f"adam.v.{n}"].astype(arrays[n].dtype)
    return model, meta['step'], Rng.from_state(meta['rng_state']), adam


def load_checkpoint(path):
    model, step, rng, _ = load_training_state(path)
    logger.info(f"Loaded checkpoint step={step} from {path}")
    return model, step, rng


# ============ DATASET FILES ============

def save_dataset(dataset, path):
    """JSON-lines (header line + {src, tgt} per sample) for seq2seq, tensor container for images."""
    if dataset.kind == 'classification':
        meta = {'task': dataset.task, 'classes': dataset.classes, 'count': len(dataset)}
        return write_container(path, {'images': dataset.inputs, 'labels': dataset.targets}, meta, 'dataset')
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = {'format': JSONL_FORMAT, 'schema_version': SCHEMA_VERSION, 'task': dataset.task,
              'vocab_size': dataset.vocab_size, 'count': len(dataset)}
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(header) + '\n')
        for src, tgt in zip(dataset.inputs, dataset.targets):
            f.write(json.dumps({'src': [int(t) for t in src], 'tgt': [int(t) for t in tgt]}) + '\n')
    return path


def load_dataset(path):
    with open(path, 'rb') as f:
        head = f.read(4)
    if head == MAGIC:
        manifest, arrays = read_container(path)
        if manifest['kind'] != 'dataset' or 'images' not in arrays or 'labels' not in arrays:
            raise CheckpointError(f"{path}: holds a {manifest['kind']}, not an image dataset")
        meta = manifest['meta']
        return Dataset('classification', arrays['images'].astype(np.float32), arrays['labels'].astype(np.int64),
                       meta.get('task', 'external'), classes=meta.get('classes', int(arrays['labels'].max(initial=0)) + 1))
    inputs, targets, header = [], [], None
    with open(path, 'r', encoding='utf-8', errors='replace') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{line_no}: not valid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ConfigurationError(f"{path}:{line_no}: expected a JSON object")
            if header is None and 'format' in obj:
                header = obj
                continue
            if 'src' not in obj or 'tgt' not in obj:
                raise ConfigurationError(f"{path}:{line_no}: expected an object with src and tgt")
            try:
                src, tgt = np.asarray(obj['src'], dtype=np.int64), np.asarray(obj['tgt'], dtype=np.int64)
            except (TypeError, ValueError) as e:
                raise ConfigurationError(f"{path}:{line_no}: src and tgt must be lists of token ids") from e
            if src.ndim != 1 or tgt.ndim != 1:
                raise ConfigurationError(f"{path}:{line_no}: src and tgt must be flat lists of token ids")
            inputs.append(src)
            targets.append(tgt)
    header = header or {}
    vocab = header.get('vocab_size') or 1 + max((int(max(t.max(initial=0), s.max(initial=0)))
                                                 for s, t in zip(inputs, targets)), default=2)
    return Dataset('seq2seq', inputs, targets, header.get('task', 'external'), vocab_size=vocab)
