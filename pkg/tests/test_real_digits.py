"""Small real-data smoke run on the 8x8 handwritten digits bundled with
scikit-learn. Stands in for the MNIST acceptance run when MNIST is absent;
skipped when scikit-learn is not installed."""
import numpy as np
import pytest

from drcil.datastream import split_b0, to_samples
from drcil.pipelines import PipelineConfig, run_experiment

# Oracle run before freezing (seeds 0..2): MAF+DRC Last 0.8905, 0.9035, 0.8887.
DIGITS_LAST_MIN = 0.85


def test_maf_drc_on_digits():
    datasets = pytest.importorskip("sklearn.datasets")
    X, y = datasets.load_digits(return_X_y=True)
    samples = to_samples(X / 16.0, y)
    lasts = []
    for seed in range(3):
        stream = split_b0(samples, 10, 5, seed, test_fraction=0.3)
        cfg = PipelineConfig.desk(kind="MAF", hidden=(128,), feature_dim=64, seed=seed)
        lasts.append(run_experiment(stream, cfg).last_accuracy)
    assert np.mean(lasts) >= DIGITS_LAST_MIN, lasts
