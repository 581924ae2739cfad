#!/usr/bin/env python3
"""
Tests for oracles, few-shot selection, scoring and the adaptation drivers
"""

import json
import sys
import tracemalloc
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.baselines import EnsembleConfig
from src.dataset_api import DatasetClient
from src.errors import CandidateOutOfBoxError, ConfigError, DatasetFetchError, InputValidationError, ShapeError
from src.evaluation import (BelowPercentile, EvalConfig, ExptMethod, FewShotDataset, GradAscentMethod,
                            OracleMetadata, PoorestFraction, RandomFraction, build_report, build_task_oracle,
                            evaluate_candidates, lower_median, make_few_shot, normalize_score, run_adaptation,
                            run_sequential, selection_from_config, sequential_rollout, task_rng)
from src.model import ExPTConfig, ExPTModel


def small_eval(**overrides):
    values = dict(q=8, reference_size=300, task_lengthscale=1.0)
    values.update(overrides)
    return EvalConfig(**values)


def quick_grad_method(variant='grad-mean'):
    config = EnsembleConfig.for_method(variant, size=2, hidden=16, epochs=20)
    return GradAscentMethod(variant, config, steps=5, step_size=0.05, verbose=False)


# --- scoring ------------------------------------------------------------------

def test_normalize_score_is_not_clipped():
    meta = OracleMetadata(y_min=0.0, y_max=10.0, y_star=10.0, box=(-1.0, 1.0), d=2)
    assert normalize_score(7.5, meta) == pytest.approx(0.75)
    assert normalize_score(12.0, meta) == pytest.approx(1.2)
    assert np.allclose(normalize_score(np.array([-5.0, 5.0]), meta), [-0.5, 0.5])


def test_oracle_metadata_needs_a_range():
    with pytest.raises(InputValidationError):
        OracleMetadata(y_min=1.0, y_max=1.0, y_star=1.0, box=(-1.0, 1.0), d=1)


def test_lower_median():
    assert lower_median(np.array([0.9, 0.1, 0.5, 0.3])) == 0.3
    assert lower_median(np.array([0.2, 0.7, 0.4])) == 0.4
    assert lower_median(np.array([0.6])) == 0.6


def test_build_report_statistics():
    meta = OracleMetadata(y_min=0.0, y_max=4.0, y_star=4.0, box=(-1.0, 1.0), d=1)
    few_shot = FewShotDataset(np.zeros((2, 1)), [1.0, 2.0])
    report = build_report(np.array([4.0, 0.0, 2.0, 1.0]), meta, few_shot, seed=3, task='sphere')
    assert report.scores_norm == [1.0, 0.0, 0.5, 0.25]
    assert report.median == 0.25
    assert report.max == 1.0
    assert report.mean == pytest.approx(0.4375)
    assert report.few_shot_best_norm == 0.5
    assert report.q == 4
    assert report.to_dict()['task'] == 'sphere'


# --- oracles ------------------------------------------------------------------

def test_gp_oracle_is_reproducible_per_task_and_seed():
    config = small_eval()
    a = build_task_oracle('gp-rbf', config, d=2, seed=0)
    b = build_task_oracle('gp-rbf', config, d=2, seed=0)
    c = build_task_oracle('gp-rbf', config, d=2, seed=1)
    assert np.array_equal(a.reference_y, b.reference_y)
    assert not np.array_equal(a.reference_y, c.reference_y)
    assert a.y_star == a.metadata.y_max == a.reference_y.max()


def test_gp_oracle_nearest_lookup():
    oracle = build_task_oracle('gp-matern52', small_eval(), d=2, seed=0)
    assert np.array_equal(oracle.evaluate(oracle.reference_x[:5]), oracle.reference_y[:5])
    assert oracle.calls == 5


def test_gp_oracle_posterior_mean_is_smooth():
    oracle = build_task_oracle('gp-rbf', small_eval(interpolation='posterior-mean', reference_size=100),
                               d=2, seed=0)
    x = np.array([[0.0, 0.0], [1e-4, 0.0]])
    values = oracle.evaluate(x)
    assert values.shape == (2,)
    assert abs(values[0] - values[1]) < 1e-2


@pytest.mark.parametrize('task', ['gp-rbf', 'gp-matern52'])
def test_gp_oracle_keeps_one_kernel_sized_buffer(task):
    config = small_eval(reference_size=2000)
    kernel_bytes = 2000 * 2000 * 8
    tracemalloc.start()
    try:
        oracle = build_task_oracle(task, config, d=3, seed=0)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert oracle.reference_y.shape == (2000,)
    assert np.all(np.isfinite(oracle.reference_y))
    assert peak < 1.6 * kernel_bytes


def test_oracle_rejects_out_of_box_and_bad_shapes():
    oracle = build_task_oracle('sphere', small_eval(), d=2, seed=0)
    with pytest.raises(CandidateOutOfBoxError):
        oracle.evaluate(np.array([[0.0, 3.5]]))
    with pytest.raises(ShapeError):
        oracle.evaluate(np.zeros((2, 3)))
    assert oracle.calls == 0


@pytest.mark.parametrize('task', ['sphere', 'ackley', 'rastrigin'])
def test_analytic_optimum(task):
    oracle = build_task_oracle(task, small_eval(), d=3, seed=0)
    assert oracle.y_star == 0.0
    assert oracle.evaluate(np.zeros((1, 3)))[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(oracle.reference_y <= 1e-12)


def test_evaluate_candidates_spends_one_call_per_design():
    oracle = build_task_oracle('sphere', small_eval(), d=2, seed=0)
    few_shot = FewShotDataset(np.array([[2.0, 2.0]]), [-8.0])
    report = evaluate_candidates(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]), oracle, few_shot, task='sphere')
    assert oracle.calls == 3
    assert report.scores_raw == pytest.approx([0.0, -1.0, -2.0])
    assert report.max == pytest.approx(normalize_score(0.0, oracle))
    assert report.median == pytest.approx(normalize_score(-1.0, oracle))
    assert report.few_shot_best_norm == pytest.approx(normalize_score(-8.0, oracle))
    assert report.q == 3 and report.task == 'sphere'
    with pytest.raises(InputValidationError):
        evaluate_candidates(np.zeros((0, 2)), oracle)
    assert oracle.calls == 3


def test_unknown_task():
    with pytest.raises(ConfigError):
        EvalConfig(tasks=('gp-unknown',))


def test_task_rng_is_stable():
    assert task_rng('gp-rbf', 4).integers(1 << 30) == task_rng('gp-rbf', 4).integers(1 << 30)
    assert task_rng('gp-rbf', 4).integers(1 << 30) != task_rng('gp-cosine', 4).integers(1 << 30)


# --- table datasets -----------------------------------------------------------

def write_table(directory: Path, sidecar=None):
    rng = np.random.default_rng(0)
    frame = pd.DataFrame(rng.uniform(0, 1, size=(50, 2)), columns=['x_0', 'x_1'])
    frame['y'] = frame['x_0'] - frame['x_1']
    path = directory / 'designs.csv'
    frame.to_csv(path, index=False)
    if sidecar is not None:
        (directory / 'designs.json').write_text(json.dumps(sidecar))
    return path, frame


def test_table_oracle_from_csv(tmp_path):
    path, frame = write_table(tmp_path)
    oracle = build_task_oracle(f"table:{path}", small_eval(), d=2, seed=0)
    assert oracle.metadata.y_max == pytest.approx(frame['y'].max())
    assert oracle.y_star == pytest.approx(frame['y'].max())
    row = frame[['x_0', 'x_1']].to_numpy()[7:8]
    assert oracle.evaluate(row)[0] == pytest.approx(frame['y'].iloc[7])


def test_table_sidecar_overrides_metadata(tmp_path):
    path, _ = write_table(tmp_path, {'y_min': -2.0, 'y_max': 2.0, 'y_star': 1.5, 'box': [0.0, 1.0]})
    oracle = build_task_oracle(f"table:{path}", small_eval(), d=2, seed=0)
    assert (oracle.metadata.y_min, oracle.metadata.y_max, oracle.y_star) == (-2.0, 2.0, 1.5)
    assert oracle.box == (0.0, 1.0)


def test_table_dimension_mismatch(tmp_path):
    path, _ = write_table(tmp_path)
    with pytest.raises(ShapeError):
        build_task_oracle(f"table:{path}", small_eval(), d=3, seed=0)


def test_table_errors(tmp_path):
    with pytest.raises(DatasetFetchError):
        DatasetClient().load_table(str(tmp_path / 'missing.csv'))
    bad = tmp_path / 'bad.csv'
    pd.DataFrame({'a': [1.0], 'y': [2.0]}).to_csv(bad, index=False)
    with pytest.raises(InputValidationError):
        DatasetClient().load_table(str(bad))


class FakeResponse:
    def __init__(self, status_code, content=b''):
        self.status_code = status_code
        self.content = content


class FakeSession:
    def __init__(self, responses):
        self.responses = responses
        self.requested = []

    def get(self, url, timeout=None):
        self.requested.append(url)
        return self.responses.get(url, FakeResponse(404))


def test_remote_table_is_downloaded_once(tmp_path):
    csv = b"x_0,y\n0.0,1.0\n1.0,3.0\n"
    session = FakeSession({'https://example.org/data/t.csv': FakeResponse(200, csv)})
    client = DatasetClient(cache_dir=str(tmp_path), session=session)
    x, y, metadata = client.load_table('https://example.org/data/t.csv')
    assert x.shape == (2, 1) and y.tolist() == [1.0, 3.0]
    assert metadata == {}
    client.load_table('https://example.org/data/t.csv')
    assert session.requested.count('https://example.org/data/t.csv') == 1


def test_remote_failure(tmp_path):
    client = DatasetClient(cache_dir=str(tmp_path), session=FakeSession({}))
    with pytest.raises(DatasetFetchError):
        client.load_table('https://example.org/missing.csv')


# --- few-shot selection -------------------------------------------------------

def test_random_fraction_size_and_uniqueness():
    x = np.arange(1000.0).reshape(-1, 1)
    few_shot = make_few_shot(x, x[:, 0], RandomFraction(0.01), np.random.default_rng(0))
    assert few_shot.n == 10
    assert len(np.unique(few_shot.x)) == 10


def test_poorest_fraction_takes_lowest_values():
    y = np.random.default_rng(1).permutation(200).astype(float)
    few_shot = make_few_shot(y.reshape(-1, 1), y, PoorestFraction(0.05), np.random.default_rng(0))
    assert sorted(few_shot.y.tolist()) == list(range(10))


def test_below_percentile():
    y = np.arange(1000.0)
    few_shot = make_few_shot(y.reshape(-1, 1), y, BelowPercentile(count=50, percentile=20.0),
                             np.random.default_rng(2))
    assert few_shot.n == 50
    assert np.all(few_shot.y < np.percentile(y, 20.0))
    with pytest.raises(InputValidationError):
        make_few_shot(y.reshape(-1, 1), y, BelowPercentile(count=500, percentile=20.0), np.random.default_rng(2))


def test_selection_is_reproducible():
    y = np.random.default_rng(3).normal(size=500)
    a = make_few_shot(y.reshape(-1, 1), y, RandomFraction(0.02), np.random.default_rng(8))
    b = make_few_shot(y.reshape(-1, 1), y, RandomFraction(0.02), np.random.default_rng(8))
    assert np.array_equal(a.x, b.x)


def test_selection_from_config():
    assert selection_from_config(small_eval(few_shot='random', few_shot_fraction=0.1)) == RandomFraction(0.1)
    assert selection_from_config(small_eval(few_shot='poorest')) == PoorestFraction(0.01)
    assert selection_from_config(small_eval()) == BelowPercentile(100, 20.0)


def test_few_shot_dataset_validation_and_append():
    with pytest.raises(InputValidationError):
        FewShotDataset(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ShapeError):
        FewShotDataset(np.zeros((3, 2)), np.zeros(2))
    grown = FewShotDataset(np.zeros((2, 2)), [1.0, 2.0]).append(np.ones((1, 2)), np.array([5.0]))
    assert grown.n == 3 and grown.y.tolist() == [1.0, 2.0, 5.0]


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(q=0)
    with pytest.raises(ConfigError):
        EvalConfig(methods=('random-search',))
    with pytest.raises(ConfigError):
        EvalConfig(interpolation='cubic')


# --- adaptation drivers -------------------------------------------------------

def sphere_problem(q=6):
    oracle = build_task_oracle('sphere', small_eval(q=q), d=2, seed=0)
    few_shot = make_few_shot(oracle.reference_x, oracle.reference_y, PoorestFraction(0.1),
                             np.random.default_rng(0))
    return oracle, few_shot


def test_simultaneous_adaptation_spends_exactly_q_calls():
    oracle, few_shot = sphere_problem()
    report = run_adaptation(quick_grad_method(), few_shot, oracle, 6, np.random.default_rng(0), seed=0)
    assert oracle.calls == 6
    assert report.q == 6 and len(report.scores_norm) == 6
    assert (report.method, report.mode) == ('grad-mean', 'simultaneous')
    assert report.wall_time_s > 0


def test_sequential_adaptation_spends_exactly_q_calls():
    oracle, few_shot = sphere_problem()
    report = run_sequential(few_shot, oracle, 3, quick_grad_method('grad-asc'), np.random.default_rng(0))
    assert oracle.calls == 3
    assert report.mode == 'sequential'
    assert report.method == 'grad-asc'
    assert len(report.scores_raw) == 3


def test_expt_method_proposals_stay_in_box():
    oracle, few_shot = sphere_problem()
    model = ExPTModel(ExPTConfig(d_x=2, layers=1, dim=8, heads=2, dropout=0.0, vae_enc_layers=1,
                                 vae_dec_layers=1, vae_hidden=8, latent=2), np.random.default_rng(0)).eval()
    report = run_adaptation(ExptMethod(model), few_shot, oracle, 5, np.random.default_rng(1))
    assert oracle.calls == 5
    assert report.method == 'expt'
    sequential = run_sequential(few_shot, oracle, 2, model, np.random.default_rng(1))
    assert sequential.method == 'expt' and oracle.calls == 7


def tiny_expt_method():
    model = ExPTModel(ExPTConfig(d_x=2, layers=1, dim=8, heads=2, dropout=0.0, vae_enc_layers=1,
                                 vae_dec_layers=1, vae_hidden=8, latent=2), np.random.default_rng(0)).eval()
    return ExptMethod(model)


def test_sequential_rollout_grows_the_context():
    oracle, few_shot = sphere_problem()
    candidates, scores, context = sequential_rollout(few_shot, oracle, 4, tiny_expt_method(),
                                                     np.random.default_rng(2))
    assert candidates.shape == (4, 2) and scores.shape == (4,)
    assert len(context.y) == len(few_shot.y) + 4
    assert np.array_equal(context.x[-4:], candidates)
    assert np.array_equal(context.y[-4:], scores)


def test_single_step_sequential_matches_simultaneous():
    method = tiny_expt_method()
    oracle, few_shot = sphere_problem()
    simultaneous = run_adaptation(method, few_shot, oracle, 1, np.random.default_rng(3))
    oracle, few_shot = sphere_problem()
    sequential = run_sequential(few_shot, oracle, 1, method, np.random.default_rng(3))
    assert sequential.scores_raw == simultaneous.scores_raw
    assert sequential.median == simultaneous.median


def test_unknown_gradient_variant():
    with pytest.raises(ConfigError):
        GradAscentMethod('grad-max')
