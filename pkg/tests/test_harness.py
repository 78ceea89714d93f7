import struct

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from gantrace.config import DatasetSpec, load_config, synthesize_dataset, trace_fingerprint
from gantrace.datasets import (
    dataset_checksum,
    glyph_templates,
    load_idx_images,
    make_digit_images,
    read_idx,
    sample_normal2d,
)
from gantrace.experiments import (
    critical_set,
    jaccard_critical,
    kendall_tau,
    permutation_test_tau,
    select_harmful,
    sign_test_greater,
)
from gantrace.influence import InfluenceTable
from gantrace.metrics import MetricSpec


# -- datasets ---------------------------------------------------------------------

def test_normal2d_moments_at_scale():
    data = sample_normal2d(100_000, np.random.default_rng(0))
    assert np.abs(data.mean(axis=0) - 1.0).max() < 0.02
    cov = np.cov(data, rowvar=False)
    assert abs(cov[0, 1] - 0.8) < 0.02
    assert abs(cov[0, 0] - 1.0) < 0.02


def test_normal2d_deterministic():
    a = sample_normal2d(100, np.random.default_rng(1))
    b = sample_normal2d(100, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_digit_images_shape_range_and_labels():
    data, labels = make_digit_images(50, n_classes=4, noise=0.15,
                                     rng=np.random.default_rng(2))
    assert data.shape == (50, 64)
    assert labels.shape == (50,) and labels.max() < 4
    assert np.all(np.abs(data) < 1.0)
    templates = glyph_templates(4)
    # Rendered images stay closest to their own template.
    dists = np.linalg.norm(data[:, None, :] - templates[None, :, :], axis=2)
    assert (dists.argmin(axis=1) == labels).mean() > 0.95


def write_idx(path, array):
    array = np.asarray(array)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    path.write_bytes(header + array.astype(np.uint8).tobytes())


def test_idx_roundtrip_and_downsampling(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=5).astype(np.uint8)
    write_idx(tmp_path / "imgs.idx", images)
    write_idx(tmp_path / "labels.idx", labels)
    assert np.array_equal(read_idx(tmp_path / "imgs.idx"), images)
    data, got_labels = load_idx_images(tmp_path / "imgs.idx", tmp_path / "labels.idx", side=8)
    assert data.shape == (5, 64)
    assert np.all(np.abs(data) <= 0.999)
    assert np.array_equal(got_labels, labels)


def test_idx_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02\x03\x04rest")
    with pytest.raises(ValueError, match="magic"):
        read_idx(tmp_path / "bad.idx")


def test_dataset_checksum_sensitivity():
    data = sample_normal2d(10, np.random.default_rng(4))
    other = data.copy()
    other[3, 1] += 1e-12
    assert dataset_checksum(data) != dataset_checksum(other)
    assert dataset_checksum(data) == dataset_checksum(data.copy())


# -- rank statistics ----------------------------------------------------------------

def test_kendall_tau_identical_orders():
    scores = np.array([0.3, -1.2, 2.2, 0.9])
    assert kendall_tau(scores, scores) == 1.0


def test_kendall_tau_reversed_orders():
    a = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert kendall_tau(a, -a) == pytest.approx(-1.0, abs=1e-14)


def brute_force_tau_b(a, b):
    n = len(a)
    concordant = discordant = ties_a = ties_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            da, db = a[i] - a[j], b[i] - b[j]
            if da == 0 and db == 0:
                ties_a += 1
                ties_b += 1
            elif da == 0:
                ties_a += 1
            elif db == 0:
                ties_b += 1
            elif da * db > 0:
                concordant += 1
            else:
                discordant += 1
    pairs = n * (n - 1) / 2
    denom = np.sqrt((pairs - ties_a) * (pairs - ties_b))
    return (concordant - discordant) / denom


@hyp_settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=-3, max_value=3), min_size=4, max_size=12),
       st.lists(st.integers(min_value=-3, max_value=3), min_size=4, max_size=12))
def test_kendall_tau_matches_pair_counting_with_ties(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n], dtype=float), np.array(b[:n], dtype=float)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return  # undefined: no untied pairs on one side
    assert kendall_tau(a, b) == pytest.approx(brute_force_tau_b(a, b), rel=1e-12)


def test_jaccard_identical_scores():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal(40)
    assert jaccard_critical(scores, scores.copy(), m=10) == 1.0


def test_jaccard_disjoint_critical_sets():
    est = np.concatenate([np.arange(20, 40), np.zeros(20) + 0.5])
    true = np.concatenate([np.zeros(20) + 0.5, np.arange(20, 40)])
    # Estimated extremes live in the first 20 positions, true extremes in
    # the last 20: the critical sets cannot overlap.
    est = np.concatenate([np.linspace(-5, 5, 20), np.full(20, 0.1)])
    true = np.concatenate([np.full(20, 0.1), np.linspace(-5, 5, 20)])
    assert jaccard_critical(est, true, m=10) == 0.0


def test_jaccard_matches_set_arithmetic():
    rng = np.random.default_rng(6)
    est, true = rng.standard_normal(30), rng.standard_normal(30)
    a, b = critical_set(est, 5), critical_set(true, 5)
    assert jaccard_critical(est, true, m=5) == len(a & b) / len(a | b)


def test_critical_set_tie_break_is_deterministic():
    scores = np.zeros(10)
    assert critical_set(scores, m=2) == {0, 1}  # lowest indices win both sides


def test_permutation_test_detects_perfect_agreement():
    rng = np.random.default_rng(7)
    truth = rng.standard_normal(50)
    result = permutation_test_tau(truth, truth, n_permutations=300,
                                  rng=np.random.default_rng(8))
    assert result.observed == 1.0
    assert result.observed > result.threshold
    assert result.p_value < 0.05


def test_sign_test_values():
    assert sign_test_greater([1.0, 2.0, 0.5, 0.1, 3.0]) == pytest.approx(0.03125)
    assert sign_test_greater([1.0, -2.0, 0.5, 0.1, 3.0]) > 0.05
    assert sign_test_greater([0.0, 0.0]) == 1.0


# -- harmful selection ----------------------------------------------------------------

def make_table(scores):
    return InfluenceTable(metric_name="all",
                          scores={i: float(s) for i, s in enumerate(scores)},
                          k_epochs=1, query_fingerprint="x")


def test_select_harmful_positive_rule_for_likelihood():
    table = make_table([3.0, -1.0, 2.0])
    chosen = select_harmful(table, MetricSpec("all"), 2)
    assert set(chosen) == {0, 2}


def test_select_harmful_negative_rule_for_fid():
    table = make_table([3.0, -1.0, 2.0])
    chosen = select_harmful(table, MetricSpec("fid"), 1)
    assert set(chosen) == {1}


def test_select_harmful_empty_request():
    table = make_table([3.0, -1.0, 2.0])
    assert len(select_harmful(table, MetricSpec("all"), 0)) == 0


def test_select_harmful_truncates_with_warning():
    table = make_table([3.0, -1.0, -2.0])
    with pytest.warns(RuntimeWarning, match="qualify"):
        chosen = select_harmful(table, MetricSpec("all"), 3)
    assert set(chosen) == {0}


def test_select_harmful_invariant_under_positive_rescaling():
    rng = np.random.default_rng(9)
    scores = rng.standard_normal(25)
    a = select_harmful(make_table(scores), MetricSpec("all"), 8)
    b = select_harmful(make_table(scores * 7.3), MetricSpec("all"), 8)
    assert np.array_equal(a, b)


# -- configuration ---------------------------------------------------------------------

CONFIG_TEXT = """
[dataset]
kind = normal2d
n_train = 120

[architecture]
latent_dim = 4
hidden_gen = 6
hidden_disc = 8
l2_rate = 1e-3

[training]
epochs = 2
batch_size = 30
lr_gen = 1e-3
lr_disc = 1e-3
seed = 5

[evaluation]
metrics = all
n_reference = 80
n_test = 80

[influence]
k_epochs = 1,2
n_targets = 10
n_permutations = 200

[cleansing]
n_harmful = 10,20
methods = influence,random
n_seeds = 2

[output]
directory = runs
"""


def test_config_roundtrip(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEXT)
    config = load_config(path)
    assert config.dataset.n_train == 120
    assert config.architecture.data_dim == 2
    assert config.training.batch_size == 30
    assert config.k_epochs == (1, 2)
    assert config.n_harmful == (10, 20)
    assert config.methods == ("influence", "random")

    override = load_config(path, overrides={"training.seed": "9"})
    assert override.training.seed == 9


def test_config_fingerprint_tracks_training_inputs(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEXT)
    config = load_config(path)
    data, _ = synthesize_dataset(config.dataset, np.random.default_rng(0))
    base = trace_fingerprint(config, dataset_checksum(data))
    assert base == trace_fingerprint(config, dataset_checksum(data))
    other = load_config(path, overrides={"training.lr_gen": "2e-3"})
    assert trace_fingerprint(other, dataset_checksum(data)) != base
    # Evaluation-side settings do not change the trace identity.
    eval_changed = load_config(path, overrides={"evaluation.n_reference": "999"})
    assert trace_fingerprint(eval_changed, dataset_checksum(data)) == base


def test_missing_config_file_raises():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/config.ini")


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(kind="bogus")
    with pytest.raises(ValueError):
        DatasetSpec(n_train=0)
