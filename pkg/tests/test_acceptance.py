"""End-to-end acceptance criteria; each test prints one PASS/FAIL line.

Criteria 7-9 share one trained experiment (several minutes on a desktop CPU).
"""
import pytest

from loctomo import acceptance as acc

from .conftest import ACCEPTANCE_LINES


def _check(result):
    line = result.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert result.passed, line


@pytest.fixture(scope="module")
def experiment():
    return acc.learning_experiment()


def test_01_locality():
    _check(acc.criterion_locality())


def test_02_fbp_sanity():
    _check(acc.criterion_fbp())


def test_03_gradients():
    _check(acc.criterion_gradients())


def test_04_homogeneity():
    _check(acc.criterion_homogeneity())


def test_05_permutation_invariance():
    _check(acc.criterion_permutation())


def test_06_fbp_witness():
    _check(acc.criterion_witness())


@pytest.mark.slow
def test_07_learning_gain(experiment):
    _check(acc.criterion_learning_gain(experiment))


@pytest.mark.slow
def test_08_wavelet_mode(experiment):
    _check(acc.criterion_wavelet(experiment))


@pytest.mark.slow
def test_09_variable_tilt_count(experiment):
    _check(acc.criterion_tilt_drop(experiment))


def test_10_fsc_suite():
    _check(acc.criterion_fsc())


def test_11_io():
    _check(acc.criterion_io())
