"""
Batch command line: train, params, flops, analyze, gen-data.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 incompatible analysis inputs, 5 I/O failure.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

import analysis
from config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    get_setting,
    load_run_config,
    render_run_config,
)
from level_signal import ablation_deltas
from model_zoo import (
    CONVENTIONS,
    build_model,
    count_flops,
    param_breakdown,
    preset_config,
)
from nn_core import AdamState, ConfigurationError, RingFormerError, Rng, UndefinedError
from train_harness import (
    CheckpointError,
    DivergenceError,
    TaskSpec,
    TrainConfig,
    collate,
    generate_task,
    load_checkpoint,
    load_training_state,
    save_checkpoint,
    save_dataset,
    train,
    write_metrics,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ANALYSIS, EXIT_IO = 0, 2, 3, 4, 5


def _setup_logging(args):
    level = get_setting('RINGFORMER_LOG_LEVEL').upper()
    if getattr(args, 'verbose', False):
        level = 'DEBUG'
    elif getattr(args, 'quiet', False):
        level = 'WARNING'
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def _print_json(payload):
    print(json.dumps(payload, indent=2))


# ============ COMMON ============

def _load_run(args):
    run = load_run_config(args.config) if getattr(args, 'config', None) else RunConfig()
    return apply_overrides(run, getattr(args, 'set', None))


COUNT_OPTIONS = ('convention', 'exclude_embeddings', 'ablations', 'tokens', 'src_tokens', 'signal_convention')


def _flag_values(args, names):
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _count_inputs(args):
    """
    (ModelConfig, AnalysisSpec) for params/flops: the model from --preset or
    the config's [model] section, counting options from [analysis] with flags on top.
    """
    if getattr(args, 'preset', None):
        if getattr(args, 'config', None):
            raise ConfigurationError("give either a config file or --preset, not both")
        run = apply_overrides(RunConfig(model=preset_config(args.preset)), getattr(args, 'set', None))
    else:
        run = _load_run(args)
        if run.model is None:
            raise ConfigError("config has no [model] section", source=getattr(args, 'config', None))
    spec = replace(run.analysis or analysis.AnalysisSpec(), **_flag_values(args, COUNT_OPTIONS))
    return run.model, spec


# ============ TRAIN ============

def cmd_train(args):
    run = _load_run(args)
    if run.model is None:
        raise ConfigError("config has no [model] section", source=args.config)
    overrides = []
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.total_steps is not None:
        overrides.append(f"train.total_steps={args.total_steps}")
    run.task = run.task or TaskSpec()
    run.train = run.train or TrainConfig()
    run = apply_overrides(run, overrides)
    flags = {'out_dir': args.out, 'resume': args.resume}
    run.train = replace(run.train, **{k: v for k, v in flags.items() if v is not None})

    stem = os.path.splitext(os.path.basename(args.config))[0]
    out_dir = run.train.out_dir or os.path.join(get_setting('RINGFORMER_OUTPUT_DIR'), stem)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'run_config.toml'), 'w', encoding='utf-8') as f:
        f.write(render_run_config(run))

    task = generate_task(run.task, 'train')
    eval_data = generate_task(run.task, 'eval') if run.task.kind != 'external' or run.task.eval_path else None
    if eval_data is not None and len(eval_data) == 0:
        eval_data = None

    if run.train.resume:
        model, start_step, rng, adam = load_training_state(run.train.resume)
        print(f"Resuming from {run.train.resume} at step {start_step}")
    else:
        rng = Rng(run.train.seed)
        model = build_model(run.model, rng)
        start_step, adam = 0, AdamState()
    n_params = sum(p.size for p in model.named_parameters())
    print(f"Training {run.model.arch} ({run.model.mode}) on {run.task.kind}: {n_params:,} parameters, "
          f"{run.train.total_steps} steps -> {out_dir}")

    model, records = train(model, task, run.train, eval_data=eval_data, rng=rng, adam=adam,
                           start_step=start_step, out_dir=out_dir, progress=not args.quiet)
    write_metrics(records, os.path.join(out_dir, 'metrics.csv'))
    save_checkpoint(model, max(start_step, run.train.total_steps), rng, os.path.join(out_dir, 'final.ckpt'),
                    adam=adam)
    if records:
        print(f"Final: {records[-1].summary()}")
    print(f"Wrote {os.path.join(out_dir, 'metrics.csv')} and {os.path.join(out_dir, 'final.ckpt')}")
    return EXIT_OK


# ============ PARAMS ============

def _params_payload(cfg, conventions, exclusions):
    out = {}
    for convention in conventions:
        report = param_breakdown(cfg, convention, exclusions)
        out[convention] = {'total': report.total, 'components': report.components}
    return out


def cmd_params(args):
    cfg, spec = _count_inputs(args)
    conventions = CONVENTIONS if spec.convention == 'both' else (spec.convention,)
    exclusions = 'embeddings_and_head' if spec.exclude_embeddings else 'none'
    counts = _params_payload(cfg, conventions, exclusions)
    ablations = ablation_deltas(cfg.hidden, cfg.ff, cfg.levels, cfg.mode, cfg.rank_policy) \
        if spec.ablations else None

    if args.json:
        payload = {'kind': 'params', 'arch': cfg.arch, 'mode': cfg.mode, 'exclusions': exclusions,
                   'conventions': counts}
        if ablations is not None:
            payload['ablations'] = ablations
        _print_json(payload)
        return EXIT_OK

    print(f"{cfg.arch} ({cfg.mode}) H={cfg.hidden} FF={cfg.ff} N={cfg.levels} heads={cfg.heads}"
          + (f" rank={cfg.rank}" if cfg.rank else "") + f"  [{exclusions}]")
    components = sorted({c for entry in counts.values() for c in entry['components']})
    header = f"{'component':<14}" + ''.join(f"{c:>18}" for c in conventions)
    print(header)
    print('-' * len(header))
    for comp in components:
        print(f"{comp:<14}" + ''.join(f"{counts[c]['components'].get(comp, 0):>18,}" for c in conventions))
    print('-' * len(header))
    print(f"{'total':<14}" + ''.join(f"{counts[c]['total']:>18,}" for c in conventions))
    print(f"{'(millions)':<14}" + ''.join(f"{counts[c]['total'] / 1e6:>17.2f}M" for c in conventions))
    if ablations is not None:
        print("\nAblation parameter deltas vs. default signals:")
        for label, delta in ablations.items():
            print(f"  {label:<22}{delta:>+14,}")
    return EXIT_OK


# ============ FLOPS ============

def cmd_flops(args):
    cfg, spec = _count_inputs(args)
    n_tokens = spec.tokens or (cfg.n_tokens if cfg.mode == 'encoder_only' else cfg.max_seq_len)
    conventions = ('mac', 'two_flop') if spec.signal_convention == 'both' else (spec.signal_convention,)
    reports = {c: count_flops(cfg, n_tokens, c, spec.src_tokens) for c in conventions}

    if args.json:
        _print_json({'kind': 'flops', 'arch': cfg.arch, 'mode': cfg.mode, 'n_tokens': n_tokens,
                     'reports': {c: {'total_macs': r.total_macs, 'components': r.components}
                                 for c, r in reports.items()}})
        return EXIT_OK

    print(f"{cfg.arch} ({cfg.mode}) H={cfg.hidden} FF={cfg.ff} N={cfg.levels}, {n_tokens} tokens")
    header = f"{'component':<18}" + ''.join(f"{c:>20}" for c in conventions)
    print(header)
    print('-' * len(header))
    for comp in next(iter(reports.values())).components:
        print(f"{comp:<18}" + ''.join(f"{reports[c].components[comp]:>20,}" for c in conventions))
    print('-' * len(header))
    print(f"{'total':<18}" + ''.join(f"{reports[c].total_macs:>20,}" for c in conventions))
    print(f"{'GFLOPs':<18}" + ''.join(f"{reports[c].gflops:>20.3f}" for c in conventions))
    return EXIT_OK


# ============ ANALYZE ============

def _eval_task(model_cfg, run, kind, spec):
    """TaskSpec for the evaluation batch: the config's [task] if given, else one fitting the model."""
    count = spec.images if kind == 'mad' else spec.samples
    if run.task is not None:
        return TaskSpec(**{**vars(run.task), 'n_eval': count, 'seed': spec.seed})
    if model_cfg.mode == 'encoder_only':
        return TaskSpec(kind='shapes_classify', classes=min(model_cfg.num_classes, 8),
                        image_size=model_cfg.image_size, n_train=0, n_eval=count, seed=spec.seed)
    seq_len = 16 if model_cfg.position_kind == 'sinusoidal' else min(16, model_cfg.max_seq_len - 1)
    return TaskSpec(kind='seq_copy', vocab_size=model_cfg.vocab_size, seq_len=max(seq_len, 1),
                    n_train=0, n_eval=count, seed=spec.seed)


def _eval_batch(model_cfg, run, kind, spec):
    data = generate_task(_eval_task(model_cfg, run, kind, spec), 'eval')
    if len(data) == 0:
        raise analysis.AnalysisError("evaluation batch is empty")
    if data.kind == 'classification':
        if model_cfg.mode != 'encoder_only' or data.inputs.shape[1:] != (model_cfg.channels, model_cfg.image_size,
                                                                         model_cfg.image_size):
            raise analysis.AnalysisError("evaluation images do not fit the checkpoint's input geometry")
        return data.inputs, None
    if model_cfg.mode != 'encoder_decoder' or data.vocab_size > model_cfg.vocab_size:
        raise analysis.AnalysisError("evaluation sequences do not fit the checkpoint's vocabulary")
    src, tgt_in, _ = collate(data, np.arange(len(data)))
    return src, tgt_in


def _output_path(base, suffix, fmt):
    stem, ext = os.path.splitext(base)
    return f"{stem}{suffix}{ext or '.' + fmt}"


def _tag(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_analyze(args):
    try:
        return _run_analysis(args)
    except UndefinedError as e:
        raise analysis.AnalysisError(str(e)) from e


def _run_analysis(args):
    run = _load_run(args)
    spec = run.analysis or analysis.AnalysisSpec(kind=args.kind)
    spec = analysis.AnalysisSpec(**{**vars(spec), 'kind': args.kind,
                                    **{k: v for k, v in (('format', args.format), ('images', args.images),
                                                         ('samples', args.samples), ('seed', args.seed),
                                                         ('stack', args.stack), ('out', args.out)) if v is not None}})
    out = spec.out or os.path.join(get_setting('RINGFORMER_OUTPUT_DIR'), f"{args.kind}.{spec.format}")
    models = [load_checkpoint(path)[0] for path in args.checkpoints]

    if args.kind == 'cka':
        if len(models) > 2:
            raise ConfigurationError("cka compares at most two checkpoints")
        paths = list(args.checkpoints) + list(args.checkpoints[:1]) * (2 - len(models))
        model_a, model_b = models[0], models[-1]
        if model_a.cfg.mode != model_b.cfg.mode:
            raise analysis.AnalysisError("checkpoints have different modes and cannot share an evaluation batch")
        inputs, tgt_in = _eval_batch(model_a.cfg, run, 'cka', spec)
        _eval_batch(model_b.cfg, run, 'cka', spec)
        traces_a = analysis.capture_traces(model_a, inputs, tgt_in, spec.batch_size)
        traces_b = analysis.capture_traces(model_b, inputs, tgt_in, spec.batch_size)
        tags = (_tag(paths[0]), _tag(paths[1]))
        stacks = ['encoder', 'decoder'] if spec.stack == 'both' else [spec.stack]
        for stack in stacks:
            trace_a, trace_b = getattr(traces_a, stack), getattr(traces_b, stack)
            if trace_a is None or trace_b is None:
                if spec.stack == 'both':
                    continue
                raise analysis.AnalysisError(f"checkpoints have no {stack} stack")
            grid = analysis.cka_grid(trace_a, trace_b, tags, stack)
            path = out if stack == 'encoder' or len(stacks) == 1 else _output_path(out, '_decoder', spec.format)
            analysis.emit_report(grid, spec.format, path)
            print(analysis.summarize(grid))
            print(f"Wrote {path}")
        return EXIT_OK

    for i, (model, path) in enumerate(zip(models, args.checkpoints)):
        cfg = model.cfg
        if cfg.mode != 'encoder_only':
            raise analysis.AnalysisError(f"{path}: mean attention distance needs an encoder_only (patch) model")
        inputs, _ = _eval_batch(cfg, run, 'mad', spec)
        traces = analysis.capture_traces(model, inputs, None, spec.batch_size)
        geometry = analysis.PatchGeometry(cfg.patches_per_side, cfg.patch_size)
        report = analysis.attention_distance_report(traces.encoder, geometry, _tag(path))
        target = out if len(models) == 1 else _output_path(out, f"_{_tag(path)}", spec.format)
        analysis.emit_report(report, spec.format, target)
        print(analysis.summarize(report))
        print(f"Wrote {target}")
    return EXIT_OK


# ============ GEN-DATA ============

def cmd_gen_data(args):
    run = _load_run(args)
    base = vars(run.task) if run.task is not None else {}
    flags = {'kind': args.task, 'vocab_size': args.vocab, 'seq_len': args.seq_len, 'classes': args.classes,
             'image_size': args.image_size, 'seed': args.seed, 'split': args.split, 'out': args.out}
    values = {**base, **{k: v for k, v in flags.items() if v is not None}}
    if args.n is not None:
        values['n_train' if values.get('split', 'train') == 'train' else 'n_eval'] = args.n
    spec = TaskSpec(**values)
    if not spec.out:
        raise ConfigError("gen-data needs --out or an out key in [task]", source=args.config)
    dataset = generate_task(spec, spec.split)
    save_dataset(dataset, spec.out)
    print(f"Wrote {len(dataset)} {spec.kind} samples to {spec.out}")
    return EXIT_OK


# ============ ENTRY POINT ============

def _add_common(p, config_required=False):
    if config_required:
        p.add_argument('config', help='run config (TOML)')
    else:
        p.add_argument('--config', help='run config (TOML)')
    p.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                   help='override a config value (repeatable)')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('-v', '--verbose', action='store_true')
    p.add_argument('-q', '--quiet', action='store_true')


def build_parser():
    parser = argparse.ArgumentParser(prog='ringformer', description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train a model from a run config')
    _add_common(p, config_required=True)
    p.add_argument('--total-steps', type=int, default=None)
    p.add_argument('--out', help='output directory (default $RINGFORMER_OUTPUT_DIR/<config name>)')
    p.add_argument('--resume', help='checkpoint to continue training from')
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (('params', cmd_params, 'parameter counts'), ('flops', cmd_flops, 'FLOP counts')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('config', nargs='?', help='run config (TOML) with a [model] section')
        p.add_argument('--preset', help='named model preset instead of a config file')
        p.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE')
        p.add_argument('--seed', type=int, default=None, help='accepted for uniformity; counts are deterministic')
        p.add_argument('--json', action='store_true', help='machine-readable output')
        p.add_argument('-v', '--verbose', action='store_true')
        p.add_argument('-q', '--quiet', action='store_true')
        p.set_defaults(func=func)
        if name == 'params':
            p.add_argument('--convention', choices=list(CONVENTIONS) + ['both'], default=None)
            p.add_argument('--exclude-embeddings', action=argparse.BooleanOptionalAction, default=None,
                           help='leave embeddings and the output head out of the count (default)')
            p.add_argument('--ablations', action=argparse.BooleanOptionalAction, default=None,
                           help='also print ablation parameter deltas')
        else:
            p.add_argument('--tokens', type=int, default=None, help='sequence length (default: model input length)')
            p.add_argument('--src-tokens', type=int, default=None, help='source length for encoder-decoder models')
            p.add_argument('--signal-convention', choices=['mac', 'two_flop', 'both'], default=None)

    p = sub.add_parser('analyze', help='CKA or mean-attention-distance report from checkpoints')
    p.add_argument('kind', choices=['cka', 'mad'])
    p.add_argument('checkpoints', nargs='+')
    _add_common(p)
    p.add_argument('--out', help='report path')
    p.add_argument('--format', choices=['csv', 'json'], default=None)
    p.add_argument('--images', type=int, default=None, help='images averaged for mad (default 500)')
    p.add_argument('--samples', type=int, default=None, help='evaluation samples for cka (default 64)')
    p.add_argument('--stack', choices=['encoder', 'decoder', 'both'], default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser('gen-data', help='write a synthetic dataset file')
    _add_common(p)
    p.add_argument('--task', choices=['seq_copy', 'seq_reverse', 'seq_sort', 'shapes_classify'], default=None)
    p.add_argument('--vocab', type=int, default=None)
    p.add_argument('--seq-len', type=int, default=None)
    p.add_argument('--classes', type=int, default=None)
    p.add_argument('--image-size', type=int, default=None)
    p.add_argument('--n', type=int, default=None, help='number of samples')
    p.add_argument('--split', choices=['train', 'eval'], default=None)
    p.add_argument('--out', help='.jsonl for sequences, container file for images')
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except analysis.AnalysisError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, RingFormerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
