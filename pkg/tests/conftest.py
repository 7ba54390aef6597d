import numpy as np
import pytest

import mixedim as mx


def make_grouped_y(group_means, within_pattern):
    """Deterministic grouped responses: one mean per group plus a shared
    within-group deviation pattern (which must sum to zero)."""
    parts = [m + within_pattern for m in group_means]
    return np.concatenate(parts)


@pytest.fixture(scope="session")
def design_a_exact():
    """Design-A data crafted so REML lands exactly on (1, 1) with ybar = 0.

    Group means give a between sum of squares of 28 (MSB = 7 = 6*1 + 1) and
    the within pattern gives a residual sum of squares of 25 (MSW = 1).
    """
    t = np.sqrt(7.0 / 3.0)
    s = np.sqrt(25.0 / 30.0)
    means = np.array([t, -t, 0.0, 0.0, 0.0])
    pattern = s * np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    y = make_grouped_y(means, pattern)
    labels = np.repeat(np.arange(5), 6)
    return mx.Dataset.random_intercept(y, labels)


@pytest.fixture(scope="session")
def design_a_stats(design_a_exact):
    spectrum = mx.spectral_summary(design_a_exact)
    return mx.sufficient_stats(design_a_exact, spectrum)


@pytest.fixture()
def rng():
    return np.random.default_rng(20250811)


def simulated_stats(design="A", sa2=1.0, se2=1.0, seed=0, rep=0):
    """One simulated dataset with its sufficient statistics and targets."""
    cfg = mx.StudyConfig(design=design, sigma_alpha2=sa2, sigma_eps2=se2, seed=seed)
    dataset, theta, y_star = mx.generate_dataset(cfg, rep)
    spectrum = mx.spectral_summary(dataset)
    return dataset, mx.sufficient_stats(dataset, spectrum), theta, y_star
