#!/usr/bin/env python3
"""
End-to-end tests: configuration, checkpoints, metrics export, the sweep ledger,
the experiment runner and the command line
"""

import importlib
import json
import struct
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

import expt
from src.checkpoint import (FORMAT_VERSION, checkpoint_name, decode_tensors, encode_tensors, load_checkpoint,
                            save_checkpoint)
from src.config import load_config, parse_override, worker_count
from src.database import SweepLedger, cell_id
from src.errors import (BadMagicError, ConfigError, CrcMismatchError, InputValidationError, PersistenceError,
                        SweepConflictError, VersionMismatchError)
from src.evaluation import EvalReport
from src.exporter import (METRICS_COLUMNS, MetricsRow, ResultExporter, aggregate_metrics, emit_metrics,
                          format_mean_std, load_report)
from src.model import ExPTConfig, ExPTModel
from src.nncore import OptimizerState
from src.runner import ExperimentRunner, kernel_kind, required_models


def micro_values(output_dir):
    return {
        'run.output_dir': str(output_dir),
        'run.checkpoint_every': 1,
        'run.workers': 1,
        'generator.dimension': 2,
        'generator.points_per_function': 12,
        'generator.context_size': 5,
        'model.encoder.layers': 1,
        'model.encoder.dim': 8,
        'model.encoder.heads': 2,
        'model.vae.enc_layers': 2,
        'model.vae.dec_layers': 2,
        'model.vae.hidden': 16,
        'model.vae.latent': 3,
        'train.iterations': 2,
        'train.batch_functions': 2,
        'train.warmup': 1,
        'train.anneal': 1,
        'eval.q': 4,
        'eval.few_shot': 'poorest',
        'eval.few_shot_fraction': 0.05,
        'eval.reference_size': 200,
        'eval.task_lengthscale': 1.0,
        'eval.ascent_steps': 3,
        'baselines.ensemble.size': 2,
        'baselines.ensemble.hidden': 8,
        'baselines.ensemble.epochs': 5,
    }


def micro_config(tmp_path, **extra):
    values = micro_values(tmp_path / 'runs')
    values.update(extra)
    return load_config(overrides=values)


def write_micro_toml(tmp_path, **extra):
    values = micro_values(tmp_path / 'runs')
    values.update(extra)
    path = tmp_path / 'micro.toml'
    path.write_text(''.join(f"{key} = {json.dumps(value)}\n" for key, value in values.items()))
    return path


def metrics_row(seed, median, task='gp-matern52', generator_hash='g' * 64):
    return MetricsRow(run_id='run-test', task=task, kernel_kind=kernel_kind(task), seed=seed, checkpoint_step=2,
                      q=4, score_median=median, score_max=median + 0.1, score_mean=median, few_shot_best=0.2,
                      wall_time_s=0.5, generator_hash=generator_hash)


# --- configuration ------------------------------------------------------------

def test_defaults_hash_is_stable():
    assert load_config().config_hash == load_config().config_hash
    assert len(load_config().config_hash) == 64


def test_hash_ignores_output_location_and_workers():
    base = load_config()
    moved = load_config(overrides={'run.output_dir': '/tmp/elsewhere', 'run.workers': 3})
    assert base.config_hash == moved.config_hash
    assert base.config_hash != load_config(overrides={'train.iterations': 5}).config_hash


def test_generator_hash_only_tracks_generator_keys():
    base = load_config()
    assert base.generator_hash == load_config(overrides={'eval.q': 7}).generator_hash
    assert base.generator_hash != load_config(overrides={'generator.kernel': 'cosine'}).generator_hash


def test_unknown_key_and_type_mismatch():
    with pytest.raises(ConfigError) as excinfo:
        load_config(overrides=['train.iteratons=5'])
    assert excinfo.value.key == 'train.iteratons'
    with pytest.raises(ConfigError):
        load_config(overrides=['train.iterations="many"'])
    with pytest.raises(ConfigError):
        load_config(overrides=['model.encoder.heads=3'])


def test_parse_override_values():
    assert parse_override('eval.q=32') == ('eval.q', 32)
    assert parse_override('generator.kernel=cosine') == ('generator.kernel', 'cosine')
    assert parse_override('eval.tasks=["gp-rbf", "sphere"]') == ('eval.tasks', ['gp-rbf', 'sphere'])
    with pytest.raises(ConfigError):
        parse_override('no-equals-sign')


def test_preset_then_file_then_overrides(tmp_path):
    path = tmp_path / 'run.toml'
    path.write_text('[train]\niterations = 40\n\n[eval]\nq = 16\n')
    config = load_config(path, overrides=['eval.q=8'], preset='desk-micro')
    assert config['generator.dimension'] == 8
    assert config['train.iterations'] == 40
    assert config['eval.q'] == 8


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(preset='no-such-preset')
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.toml')


def test_toml_parser_falls_back_to_tomli(monkeypatch, tmp_path):
    tomli = pytest.importorskip('tomli')
    import src.config as config_module
    monkeypatch.setitem(sys.modules, 'tomllib', None)
    try:
        reloaded = importlib.reload(config_module)
        assert reloaded.tomllib is tomli
        path = tmp_path / 'run.toml'
        path.write_text('[eval]\nq = 16\n')
        assert reloaded.load_config(path)['eval.q'] == 16
    finally:
        monkeypatch.undo()
        importlib.reload(config_module)


def test_sweep_parameter_validation():
    with pytest.raises(ConfigError):
        load_config(overrides={'sweep.param': 'generator.nothing', 'sweep.values': [1]})
    with pytest.raises(ConfigError):
        load_config(overrides={'sweep.param': 'generator.kernel'})
    with pytest.raises(ConfigError):
        load_config(overrides={'sweep.param': 'train.iterations', 'sweep.values': ['ten']})


def test_worker_count_is_capped_by_environment(monkeypatch):
    monkeypatch.setenv('EXPT_THREADS', '2')
    assert worker_count(load_config(overrides={'run.workers': 8})) == 2
    monkeypatch.setenv('EXPT_THREADS', 'lots')
    with pytest.raises(ConfigError):
        worker_count(load_config())


def test_typed_views_follow_the_values():
    config = load_config(overrides={'generator.dimension': 4, 'eval.y_star': 1.5})
    assert config.generator_config().dimension == 4
    assert config.model_config().d_x == 4
    assert config.eval_config().y_star == 1.5
    assert load_config().eval_config().y_star is None
    assert config.ensemble_config('grad-asc').size == 1
    assert load_config().eval_config().tnp_ed_step_size == 0.1
    assert load_config(overrides={'eval.tnp_ed_step_size': 0.3}).eval_config().tnp_ed_step_size == 0.3


# --- checkpoints --------------------------------------------------------------

def tiny_expt():
    return ExPTModel(ExPTConfig(d_x=2, layers=1, dim=8, heads=2, vae_enc_layers=1, vae_dec_layers=1,
                                vae_hidden=8, latent=2), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    model = tiny_expt()
    params = model.parameters()
    state = OptimizerState.for_parameters(params, lr=1e-3)
    state.t = 7
    state.m[0] += 0.25
    path = save_checkpoint(model, state, tmp_path / checkpoint_name('expt', 7, 'ab' * 32),
                           metadata={'step': 7, 'config_hash': 'ab' * 32})
    assert path.name == 'expt-step7-abababab.expt'
    loaded = load_checkpoint(path)
    assert loaded.step == 7
    assert loaded.config_hash == 'ab' * 32
    assert loaded.model.kind == 'expt'
    for name, value in model.state_dict().items():
        assert np.array_equal(loaded.model.state_dict()[name], value)
    assert loaded.optimizer.t == 7
    assert loaded.optimizer.lr == pytest.approx(1e-3)
    assert np.array_equal(loaded.optimizer.m[0], state.m[0])
    assert not list(tmp_path.glob('*.part'))


def test_encoded_layout():
    blob = encode_tensors({'w': np.arange(3, dtype=np.float32)})
    assert blob[:4] == b'EXPT'
    assert struct.unpack_from('<II', blob, 4) == (FORMAT_VERSION, 1)
    assert decode_tensors(blob)['w'].tolist() == [0.0, 1.0, 2.0]


def test_corrupted_checkpoints(tmp_path):
    blob = bytearray(encode_tensors({'w': np.ones((2, 2), dtype=np.float64)}))
    flipped = bytearray(blob)
    flipped[20] ^= 0x01
    with pytest.raises(CrcMismatchError):
        decode_tensors(bytes(flipped))
    with pytest.raises(BadMagicError):
        decode_tensors(b'NOPE' + bytes(blob[4:]))
    newer = bytearray(blob)
    newer[4:8] = struct.pack('<I', FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatchError):
        decode_tensors(bytes(newer))
    with pytest.raises(CrcMismatchError):
        decode_tensors(bytes(blob[:-3]))
    with pytest.raises(PersistenceError):
        load_checkpoint(tmp_path / 'absent.expt')


@pytest.mark.parametrize('length', [0, 2, 3, 4, 7])
def test_checkpoint_truncated_inside_the_header(length):
    blob = encode_tensors({'w': np.ones(2, dtype=np.float32)})
    with pytest.raises(CrcMismatchError):
        decode_tensors(blob[:length])


def test_short_foreign_file_has_bad_magic():
    with pytest.raises(BadMagicError):
        decode_tensors(b'PK')


def test_unsupported_dtype_is_rejected():
    with pytest.raises(PersistenceError):
        encode_tensors({'ids': np.arange(3, dtype=np.int64)})


# --- metrics and reports ------------------------------------------------------

def test_emit_metrics_writes_header_once(tmp_path):
    path = tmp_path / 'metrics.csv'
    emit_metrics([metrics_row(0, 0.6)], path)
    emit_metrics([metrics_row(1, 0.64), metrics_row(2, 0.62)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == ','.join(METRICS_COLUMNS)
    assert len(lines) == 4
    assert not (tmp_path / 'metrics.csv.tmp').exists()


def test_emit_metrics_rejects_bad_rows_and_headers(tmp_path):
    with pytest.raises(InputValidationError):
        emit_metrics([metrics_row(0, float('nan'))], tmp_path / 'metrics.csv')
    foreign = tmp_path / 'foreign.csv'
    foreign.write_text('a,b\n1,2\n')
    with pytest.raises(PersistenceError):
        emit_metrics([metrics_row(0, 0.5)], foreign)


def test_format_mean_std():
    assert format_mean_std([0.60, 0.64, 0.62]) == '0.620 ± 0.016'
    assert format_mean_std([0.5]) == '0.500 ± 0.000'


def test_aggregate_across_seeds(tmp_path):
    path = tmp_path / 'metrics.csv'
    emit_metrics([metrics_row(0, 0.60), metrics_row(1, 0.64), metrics_row(2, 0.62),
                  metrics_row(0, 0.30, task='gp-cosine')], path)
    table = aggregate_metrics(path)
    matern = table[table['task'] == 'gp-matern52'].iloc[0]
    assert matern['score_median'] == '0.620 ± 0.016'
    assert matern['seeds'] == 3
    assert table[table['task'] == 'gp-cosine'].iloc[0]['seeds'] == 1


def test_aggregate_refuses_mixed_generators(tmp_path):
    path = tmp_path / 'metrics.csv'
    emit_metrics([metrics_row(0, 0.6), metrics_row(1, 0.7, generator_hash='h' * 64)], path)
    with pytest.raises(InputValidationError):
        aggregate_metrics(path)
    assert len(aggregate_metrics(path, force=True)) == 1
    with pytest.raises(PersistenceError):
        aggregate_metrics(tmp_path / 'none.csv')


def test_aggregate_keeps_sweep_arms_apart(tmp_path):
    path = tmp_path / 'metrics.csv'
    rows = []
    for value, median, generator_hash in (('rbf', 0.6, 'g' * 64), ('cosine', 0.2, 'h' * 64)):
        for seed in (0, 1):
            row = metrics_row(seed, median + 0.02 * seed, generator_hash=generator_hash)
            row.sweep_param, row.sweep_value = 'generator.kernel', value
            rows.append(row)
    emit_metrics(rows, path)
    table = aggregate_metrics(path)
    assert len(table) == 2
    assert table['sweep_value'].tolist() == ['cosine', 'rbf']
    assert table['score_median'].tolist() == ['0.210 ± 0.010', '0.610 ± 0.010']
    assert set(table['seeds']) == {2}


def test_report_and_loss_files(tmp_path):
    exporter = ResultExporter(tmp_path, 'cd' * 32)
    report = EvalReport([1.0, 2.0], [0.1, 0.2], 0.1, 0.2, 0.15, 0.05, seed=1, checkpoint_step=10,
                        task='table:data/x.csv', method='expt')
    path = exporter.write_report(report, extra={'run_id': 'r'})
    assert path.name == 'report-table_data_x.csv-expt-simultaneous-step10-cdcdcdcd.json'
    assert load_report(path) == report
    assert json.loads(path.read_text())['run_id'] == 'r'

    curve = pd.read_csv(exporter.write_training_loss('expt', [4.0, 2.0, 3.0], window=2))
    assert curve['step'].tolist() == [1, 2, 3]
    assert curve['smoothed'].tolist() == [4.0, 3.0, 2.5]


# --- sweep ledger -------------------------------------------------------------

def test_ledger_cell_lifecycle(tmp_path):
    ledger = SweepLedger(tmp_path / 'ledger.sqlite', 'a' * 64)
    cell = cell_id('rbf', 0, 'gp-linear', 'expt')
    ledger.upsert_cell(cell, 0, 'gp-linear', 'expt', 'rbf', 'running')
    assert not ledger.is_completed(cell)
    ledger.upsert_cell(cell, 0, 'gp-linear', 'expt', 'rbf', 'completed', metrics=[{'score_median': 0.5}])
    record = ledger.get_cell(cell)
    assert record['status'] == 'completed'
    assert record['started_at'] is not None and record['finished_at'] is not None
    assert record['metrics'] == [{'score_median': 0.5}]
    assert record['param_value'] == 'rbf'
    stats = ledger.get_statistics()
    assert stats['completed'] == 1 and stats['total_cells'] == 1
    ledger.close()

    reopened = SweepLedger(tmp_path / 'ledger.sqlite', 'a' * 64)
    assert reopened.completed_cells() == {cell}
    reopened.close()


def test_ledger_belongs_to_one_sweep(tmp_path):
    SweepLedger(tmp_path / 'ledger.sqlite', 'a' * 64).close()
    with pytest.raises(SweepConflictError):
        SweepLedger(tmp_path / 'ledger.sqlite', 'b' * 64)
    taken = SweepLedger(tmp_path / 'ledger.sqlite', 'b' * 64, force=True)
    assert taken.get_statistics()['total_cells'] == 0
    with pytest.raises(ValueError):
        taken.upsert_cell('x', 0, 't', 'm', status='paused')
    taken.close()


# --- runner -------------------------------------------------------------------

def test_required_models_and_kernel_kinds():
    assert required_models(['grad-mean', 'tnp-ed', 'expt', 'tnp-ed']) == ['tnp-ed', 'expt']
    assert kernel_kind('gp-periodic') == 'periodic'
    assert kernel_kind('table:data.csv') == 'table'


def test_pretrain_writes_checkpoints_and_loss_curve(tmp_path):
    config = micro_config(tmp_path)
    runner = ExperimentRunner(config, quiet=True)
    trained = runner.pretrain_models()
    checkpoints = sorted(p.name for p in (runner.run_dir / 'checkpoints').iterdir())
    assert checkpoints == [f"expt-step1-{config.short_hash}.expt", f"expt-step2-{config.short_hash}.expt"]
    assert [t.step for t in trained['expt']] == [2]
    assert (runner.run_dir / f"training_loss-expt-{config.short_hash}.csv").exists()
    loaded = load_checkpoint(trained['expt'][0].path)
    assert loaded.metadata['generator_hash'] == config.generator_hash


def test_identical_seeds_give_identical_checkpoints(tmp_path):
    first = ExperimentRunner(load_config(overrides=micro_values(tmp_path / 'a')), quiet=True)
    second = ExperimentRunner(load_config(overrides=micro_values(tmp_path / 'b')), quiet=True)
    a = first.pretrain_models()['expt'][0].path
    b = second.pretrain_models()['expt'][0].path
    assert a.name == b.name
    assert a.read_bytes() == b.read_bytes()


def test_evaluate_needs_checkpoints_for_model_methods(tmp_path):
    runner = ExperimentRunner(micro_config(tmp_path), quiet=True)
    with pytest.raises(ConfigError):
        runner.evaluate({}, ['gp-linear'], ['expt'])


def test_every_method_faces_the_same_few_shot_set(tmp_path):
    runner = ExperimentRunner(micro_config(tmp_path), quiet=True)
    rows = runner.run_adapt([], ['gp-linear'], ['grad-asc', 'grad-mean'])
    assert [r.method for r in rows] == ['grad-asc', 'grad-mean']
    assert rows[0].few_shot_best == rows[1].few_shot_best
    assert all(r.checkpoint_step == 0 for r in rows)
    reports = sorted((runner.run_dir / 'reports').glob('*.json'))
    assert len(reports) == 2
    assert all(json.loads(p.read_text())['oracle_calls'] == 4 for p in reports)


def test_sweep_emits_one_row_per_seed_and_task(tmp_path):
    config = micro_config(tmp_path)
    rows = ExperimentRunner(config, quiet=True).run_sweep()
    assert len(rows) == 12
    assert sorted({(r.seed, r.kernel_kind) for r in rows}) == sorted(
        (seed, kind) for seed in (0, 1, 2) for kind in ('matern52', 'linear', 'cosine', 'periodic'))
    metrics = pd.read_csv(config.output_dir / config.run_id / 'metrics.csv')
    assert len(metrics) == 12

    resumed = ExperimentRunner(config, quiet=True)
    assert resumed.run_sweep() == []
    assert resumed.stats['cells_skipped'] == 12
    assert len(pd.read_csv(config.output_dir / config.run_id / 'metrics.csv')) == 12

    table = resumed.run_report()
    assert set(table['seeds']) == {3}
    assert len(table) == 4


def test_sweep_over_a_parameter(tmp_path):
    config = micro_config(tmp_path, **{'sweep.param': 'generator.kernel', 'sweep.values': ['rbf', 'cosine'],
                                       'sweep.seeds': [0], 'eval.tasks': ['gp-rbf']})
    runner = ExperimentRunner(config, quiet=True)
    assert runner.sweep_units() == [('rbf', 0), ('cosine', 0)]
    rows = runner.run_sweep()
    assert len(rows) == 2
    assert len({r.generator_hash for r in rows}) == 2
    assert sorted(r.sweep_value for r in rows) == ['cosine', 'rbf']
    table = runner.run_report()
    assert len(table) == 2
    assert set(table['sweep_param']) == {'generator.kernel'}


def test_sweep_arms_are_reported_separately(tmp_path):
    config = micro_config(tmp_path, **{'sweep.param': 'eval.match_scale', 'sweep.values': [1.0, 50.0],
                                       'sweep.seeds': [0, 1], 'eval.tasks': ['gp-rbf'], 'eval.methods': ['expt']})
    runner = ExperimentRunner(config, quiet=True)
    rows = runner.run_sweep()
    assert len(rows) == 4
    assert sorted({(r.sweep_param, r.sweep_value) for r in rows}) == [('eval.match_scale', '1.0'),
                                                                     ('eval.match_scale', '50.0')]

    table = runner.run_report()
    assert len(table) == 2
    assert table['sweep_value'].tolist() == ['1.0', '50.0']
    assert set(table['seeds']) == {2}

    summary_files = list(runner.run_dir.glob('sweep-summary-*.json'))
    assert [p.name for p in summary_files] == [f"sweep-summary-{config.short_hash}.json"]
    summary = json.loads(summary_files[0].read_text())
    assert summary['sweep_param'] == 'eval.match_scale'
    assert summary['ledger']['completed'] == 4
    assert summary['ledger']['total_cells'] == 4
    assert summary['errors'] == []


# --- command line -------------------------------------------------------------

def test_adapt_without_checkpoint_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        expt.main(['adapt', '--method', 'expt', '--task', 'gp-rbf'])
    assert excinfo.value.code == 2
    config = write_micro_toml(tmp_path)
    with pytest.raises(SystemExit) as excinfo:
        expt.main(['adapt', '--config', str(config)])
    assert excinfo.value.code == 2


def test_cli_exit_codes(tmp_path, capsys):
    assert expt.main(['pretrain', '--set', 'model.encoder.heads=3', '-q']) == 2
    assert 'ConfigError' in capsys.readouterr().err
    assert expt.main(['report', '--metrics', str(tmp_path / 'none.csv'), '-q']) == 4


def test_cli_pretrain_adapt_report(tmp_path):
    config = write_micro_toml(tmp_path)
    assert expt.main(['pretrain', '--config', str(config), '-q']) == 0
    checkpoint = sorted((tmp_path / 'runs').glob('run-*/checkpoints/expt-step2-*.expt'))[0]
    assert expt.main(['adapt', '--config', str(config), '--checkpoint', str(checkpoint),
                      '--task', 'gp-rbf', '-q']) == 0
    assert expt.main(['sequential', '--config', str(config), '--checkpoint', str(checkpoint),
                      '--task', 'gp-rbf', '-q']) == 0
    metrics = pd.read_csv(checkpoint.parent.parent / 'metrics.csv')
    assert metrics['mode'].tolist() == ['simultaneous', 'sequential']
    output = tmp_path / 'table.csv'
    assert expt.main(['report', '--config', str(config), '--output', str(output), '-q']) == 0
    assert len(pd.read_csv(output)) == 2
