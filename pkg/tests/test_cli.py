import json

import numpy as np
import pandas as pd
import pytest

import cli
from analysis import PatchGeometry, attention_distance_report, capture_traces
from train_harness import DivergenceError, TaskSpec, generate_task, load_checkpoint, load_dataset

SEQ_CONFIG = """\
[model]
arch = "ringformer"
mode = "encoder_decoder"
hidden = 8
ff = 16
levels = 2
heads = 2
rank_policy = "explicit:2"
vocab_size = 8
max_seq_len = 32
dropout = 0.0

[task]
kind = "seq_copy"
vocab_size = 8
seq_len = 4
n_train = 16
n_eval = 4

[train]
max_lr = 0.01
warmup_steps = 1
total_steps = 2
batch_size = 4
eval_every = 1
eval_samples = 4
"""

VIT_CONFIG = """\
[model]
arch = "ringformer"
mode = "encoder_only"
hidden = 8
ff = 16
levels = 2
heads = 2
rank_policy = "explicit:2"
image_size = 8
patch_size = 4
num_classes = 3
dropout = 0.0

[task]
kind = "shapes_classify"
classes = 3
image_size = 8
n_train = 8
n_eval = 4

[train]
warmup_steps = 1
total_steps = 2
batch_size = 4
eval_samples = 4
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def _json_output(capsys, argv):
    assert cli.main(argv) == 0
    return json.loads(capsys.readouterr().out)


def _trained_checkpoint(tmp_path, text, name, steps=0):
    config = _write(tmp_path, f"{name}.toml", text)
    out = tmp_path / name
    assert cli.main(['train', config, '--total-steps', str(steps), '--out', str(out), '-q']) == 0
    return str(out / 'final.ckpt')


# ============ PARAMS & FLOPS ============

class TestCounts:
    def test_params_preset(self, capsys):
        payload = _json_output(capsys, ['params', '--preset', 'translation-base-ringformer', '--json'])
        assert payload['conventions']['weights_only']['total'] == 8_943_616
        assert payload['exclusions'] == 'embeddings_and_head'

    def test_params_both_conventions_and_ablations(self, capsys):
        payload = _json_output(capsys, ['params', '--preset', 'ablation-full', '--convention', 'both', '--ablations',
                                        '--json'])
        assert set(payload['conventions']) == {'weights_only', 'with_biases'}
        assert payload['conventions']['with_biases']['total'] > payload['conventions']['weights_only']['total']
        assert payload['ablations']['full-rank signal'] == 1_474_560

    def test_params_with_embeddings(self, capsys):
        excluded = _json_output(capsys, ['params', '--preset', 'translation-base-vanilla', '--json'])
        included = _json_output(capsys, ['params', '--preset', 'translation-base-vanilla', '--no-exclude-embeddings',
                                         '--json'])
        diff = included['conventions']['weights_only']['total'] - excluded['conventions']['weights_only']['total']
        assert diff == 3 * 52000 * 512

    def test_one_level_vanilla_equals_universal(self, capsys):
        totals = []
        for arch in ('vanilla', 'universal'):
            payload = _json_output(capsys, ['params', '--preset', f"translation-base-{arch}", '--set',
                                            'model.levels=1', '--json'])
            totals.append(payload['conventions']['weights_only']['total'])
        assert totals[0] - totals[1] == 0

    def test_params_table(self, capsys):
        assert cli.main(['params', '--preset', 'translation-base-ringformer']) == 0
        out = capsys.readouterr().out
        assert 'rank=32' in out and '8,943,616' in out

    def test_flops_preset(self, capsys):
        payload = _json_output(capsys, ['flops', '--preset', 'vit-base-ringformer', '--signal-convention', 'both',
                                        '--json'])
        assert payload['n_tokens'] == 197
        assert payload['reports']['mac']['total_macs'] == 18_261_000_192
        assert payload['reports']['two_flop']['total_macs'] == 18_958_172_160

    def test_flops_from_config(self, tmp_path, capsys):
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        payload = _json_output(capsys, ['flops', config, '--tokens', '5', '--json'])
        assert payload['n_tokens'] == 5 and payload['reports']['mac']['total_macs'] > 0

    def test_counting_options_from_config(self, tmp_path, capsys):
        text = SEQ_CONFIG.replace('hidden = 8', 'hidden = 64') + (
            '\n[analysis]\nconvention = "both"\nexclude_embeddings = false\nablations = true\ntokens = 5\n'
            'signal_convention = "both"\n')
        config = _write(tmp_path, 'count.toml', text)
        payload = _json_output(capsys, ['params', config, '--json'])
        assert set(payload['conventions']) == {'weights_only', 'with_biases'}
        assert payload['exclusions'] == 'none' and 'ablations' in payload
        narrowed = _json_output(capsys, ['params', config, '--convention', 'with_biases', '--no-ablations', '--json'])
        assert set(narrowed['conventions']) == {'with_biases'} and 'ablations' not in narrowed
        flops = _json_output(capsys, ['flops', config, '--json'])
        assert flops['n_tokens'] == 5 and set(flops['reports']) == {'mac', 'two_flop'}
        assert _json_output(capsys, ['flops', config, '--tokens', '7', '--json'])['n_tokens'] == 7

    def test_bad_config_value_reports_line(self, tmp_path, capsys):
        config = _write(tmp_path, 'bad.toml', '[model]\narch = "ringformer"\nhidden = "wide"\n')
        assert cli.main(['params', config]) == 2
        assert f"{config}:3:" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        config = _write(tmp_path, 'bad.toml', '[model]\nmode = "encoder_decoder"\nvocab_size = 8\ndepth = 3\n')
        assert cli.main(['params', config]) == 2
        assert ':4:' in capsys.readouterr().err

    def test_config_and_preset_conflict(self, tmp_path):
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        assert cli.main(['params', config, '--preset', 'vit-base-vanilla']) == 2

    def test_missing_model_section(self, tmp_path):
        config = _write(tmp_path, 'task.toml', '[task]\nkind = "seq_copy"\n')
        assert cli.main(['params', config]) == 2

    def test_bad_override(self):
        assert cli.main(['params', '--preset', 'vit-base-vanilla', '--set', 'model.heads=5']) == 2


# ============ GEN-DATA ============

class TestGenData:
    def test_sorted_sequences(self, tmp_path):
        out = str(tmp_path / 'sort.jsonl')
        assert cli.main(['gen-data', '--task', 'seq_sort', '--vocab', '10', '--seq-len', '5', '--n', '6',
                         '--out', out]) == 0
        data = load_dataset(out)
        assert len(data) == 6
        assert all(np.all(np.diff(t) >= 0) for t in data.targets)

    def test_deterministic(self, tmp_path):
        paths = [str(tmp_path / f"{i}.jsonl") for i in range(2)]
        for path in paths:
            cli.main(['gen-data', '--task', 'seq_reverse', '--n', '5', '--seed', '9', '--out', path])
        assert open(paths[0], 'rb').read() == open(paths[1], 'rb').read()

    def test_zero_samples(self, tmp_path):
        out = str(tmp_path / 'empty.jsonl')
        assert cli.main(['gen-data', '--task', 'seq_copy', '--n', '0', '--out', out]) == 0
        assert len(open(out, encoding='utf-8').read().splitlines()) == 1

    def test_images(self, tmp_path):
        out = str(tmp_path / 'shapes.bin')
        assert cli.main(['gen-data', '--task', 'shapes_classify', '--classes', '4', '--image-size', '8', '--n', '5',
                         '--split', 'eval', '--out', out]) == 0
        data = load_dataset(out)
        assert data.inputs.shape == (5, 1, 8, 8) and data.classes == 4

    def test_task_from_config(self, tmp_path):
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        out = str(tmp_path / 'copy.jsonl')
        assert cli.main(['gen-data', '--config', config, '--out', out]) == 0
        assert len(load_dataset(out)) == 16

    def test_split_and_output_from_config(self, tmp_path):
        out = tmp_path / 'eval.jsonl'
        config = _write(tmp_path, 'gen.toml', f'[task]\nkind = "seq_copy"\nvocab_size = 8\nseq_len = 3\nn_eval = 5\n'
                                              f'split = "eval"\nout = "{out}"\n')
        assert cli.main(['gen-data', '--config', config]) == 0
        assert len(load_dataset(str(out))) == 5

    def test_needs_an_output(self):
        assert cli.main(['gen-data', '--task', 'seq_copy', '--n', '2']) == 2

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / 'file.txt'
        blocker.write_text('x', encoding='utf-8')
        assert cli.main(['gen-data', '--task', 'seq_copy', '--n', '2', '--out', str(blocker / 'sub' / 'x.jsonl')]) == 5

    def test_invalid_task(self, tmp_path):
        out = str(tmp_path / 'x.bin')
        assert cli.main(['gen-data', '--task', 'shapes_classify', '--classes', '12', '--out', out]) == 2


# ============ TRAIN ============

class TestTrain:
    def test_zero_steps(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'zero')
        model, step, _ = load_checkpoint(ckpt)
        assert step == 0
        out = tmp_path / 'zero'
        assert (out / 'metrics.csv').exists() and (out / 'run_config.toml').exists()
        assert 'total_steps = 0' in (out / 'run_config.toml').read_text(encoding='utf-8')

    def test_metrics_rows(self, tmp_path):
        _trained_checkpoint(tmp_path, SEQ_CONFIG, 'two', steps=2)
        frame = pd.read_csv(tmp_path / 'two' / 'metrics.csv')
        assert list(frame.columns) == ['step', 'loss', 'token_acc', 'seq_acc', 'bleu', 'lr']
        assert list(frame['step']) == [1, 2]

    def test_deterministic(self, tmp_path):
        a = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'a', steps=2)
        b = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'b', steps=2)
        assert open(a, 'rb').read() == open(b, 'rb').read()

    def test_seed_changes_run(self, tmp_path):
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        for seed in ('1', '2'):
            assert cli.main(['train', config, '--seed', seed, '--out', str(tmp_path / seed), '-q']) == 0
        assert (tmp_path / '1' / 'final.ckpt').read_bytes() != (tmp_path / '2' / 'final.ckpt').read_bytes()

    def test_resume(self, tmp_path, capsys):
        ckpt = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'first', steps=2)
        config = str(tmp_path / 'first.toml')
        assert cli.main(['train', config, '--resume', ckpt, '--total-steps', '4', '--out', str(tmp_path / 'second'),
                         '-q']) == 0
        assert 'at step 2' in capsys.readouterr().out
        _, step, _ = load_checkpoint(str(tmp_path / 'second' / 'final.ckpt'))
        assert step == 4

    def test_output_and_resume_from_config(self, tmp_path, capsys):
        out = tmp_path / 'from_config'
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG.replace('[train]\n', f'[train]\nout_dir = "{out}"\n'))
        assert cli.main(['train', config, '-q']) == 0
        ckpt = out / 'final.ckpt'
        assert ckpt.exists()
        again = _write(tmp_path, 'again.toml', SEQ_CONFIG.replace('[train]\n', f'[train]\nresume = "{ckpt}"\n'))
        assert cli.main(['train', again, '--total-steps', '4', '--out', str(tmp_path / 'again'), '-q']) == 0
        assert 'at step 2' in capsys.readouterr().out
        assert load_checkpoint(str(tmp_path / 'again' / 'final.ckpt'))[1] == 4

    def test_classification_run(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, VIT_CONFIG, 'vit', steps=2)
        assert load_checkpoint(ckpt)[0].cfg.mode == 'encoder_only'

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise DivergenceError(1)

        monkeypatch.setattr(cli, 'train', diverge)
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        assert cli.main(['train', config, '--out', str(tmp_path / 'out'), '-q']) == 3

    def test_missing_resume_checkpoint(self, tmp_path):
        config = _write(tmp_path, 'seq.toml', SEQ_CONFIG)
        assert cli.main(['train', config, '--resume', str(tmp_path / 'nope.ckpt'), '--out', str(tmp_path / 'o'),
                         '-q']) == 5


    def test_malformed_external_dataset(self, tmp_path, capsys):
        data = tmp_path / 'ext.jsonl'
        data.write_text('{"src": [2, 3], "tgt": [2, 3]}\nnot json\n', encoding='utf-8')
        model, train_section = SEQ_CONFIG.split('[task]')[0], SEQ_CONFIG[SEQ_CONFIG.index('[train]'):]
        config = _write(tmp_path, 'ext.toml', f'{model}[task]\nkind = "external"\npath = "{data}"\n\n{train_section}')
        assert cli.main(['train', config, '--out', str(tmp_path / 'o'), '-q']) == 2
        assert f"{data}:2:" in capsys.readouterr().err


# ============ ANALYZE ============

class TestAnalyze:
    def test_cka_against_itself(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'seq')
        out = str(tmp_path / 'reports' / 'cka.csv')
        assert cli.main(['analyze', 'cka', ckpt, '--samples', '4', '--out', out]) == 0
        for path in (out, str(tmp_path / 'reports' / 'cka_decoder.csv')):
            values = pd.read_csv(path).iloc[:, 1:].to_numpy()
            assert values.shape == (3, 3)
            assert np.allclose(np.diag(values), 1.0, atol=1e-8)

    def test_cka_two_models_json(self, tmp_path):
        a = _trained_checkpoint(tmp_path, VIT_CONFIG, 'a')
        b = _trained_checkpoint(tmp_path, VIT_CONFIG.replace('levels = 2', 'levels = 3'), 'b')
        out = str(tmp_path / 'cka.json')
        assert cli.main(['analyze', 'cka', a, b, '--samples', '6', '--format', 'json', '--out', out]) == 0
        payload = json.load(open(out, encoding='utf-8'))
        assert payload['models'] == ['final', 'final']
        assert np.asarray(payload['values']).shape == (3, 4)

    def test_mad_matches_library(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, VIT_CONFIG, 'vit')
        out = str(tmp_path / 'mad.json')
        assert cli.main(['analyze', 'mad', ckpt, '--images', '6', '--format', 'json', '--out', out]) == 0
        values = np.asarray(json.load(open(out, encoding='utf-8'))['values'])
        geometry = PatchGeometry(2, 4)
        assert values.shape == (2, 2)
        assert np.all(values >= 0) and np.all(values <= geometry.diameter + 1e-9)

        model, _, _ = load_checkpoint(ckpt)
        images = generate_task(TaskSpec(kind='shapes_classify', classes=3, image_size=8, n_train=0, n_eval=6),
                               'eval').inputs
        expected = attention_distance_report(capture_traces(model, images).encoder, geometry).values
        assert np.allclose(values, expected, rtol=1e-8)

    def test_report_path_from_config(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, VIT_CONFIG, 'vit')
        out = tmp_path / 'reports' / 'mad_from_config.json'
        config = _write(tmp_path, 'mad.toml', f'[analysis]\nkind = "mad"\nimages = 3\nformat = "json"\nout = "{out}"\n')
        assert cli.main(['analyze', 'mad', ckpt, '--config', config]) == 0
        assert np.asarray(json.load(open(out, encoding='utf-8'))['values']).shape == (2, 2)

    def test_mad_needs_patch_model(self, tmp_path):
        ckpt = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'seq')
        assert cli.main(['analyze', 'mad', ckpt, '--images', '2', '--out', str(tmp_path / 'm.csv')]) == 4

    def test_cka_mixed_modes(self, tmp_path):
        seq = _trained_checkpoint(tmp_path, SEQ_CONFIG, 'seq')
        vit = _trained_checkpoint(tmp_path, VIT_CONFIG, 'vit')
        assert cli.main(['analyze', 'cka', seq, vit, '--out', str(tmp_path / 'c.csv')]) == 4

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(['analyze', 'cka', str(tmp_path / 'missing.ckpt'), '--out', str(tmp_path / 'c.csv')]) == 5

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / 'bad.ckpt'
        bad.write_bytes(b'RFTC\x00')
        assert cli.main(['analyze', 'mad', str(bad), '--out', str(tmp_path / 'm.csv')]) == 5

    def test_manifest_not_json(self, tmp_path):
        bad = tmp_path / 'bad.ckpt'
        bad.write_bytes(b'RFTC' + (3).to_bytes(8, 'little') + b'{{{')
        assert cli.main(['analyze', 'cka', str(bad), '--out', str(tmp_path / 'c.csv')]) == 5


def test_subcommand_required():
    with pytest.raises(SystemExit):
        cli.main([])
