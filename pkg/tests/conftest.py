"""Shared corpora and trained models for the test suite.

Two scales are built once per session: a small corpus and short training
run for mechanical behavior, and a full-scale corpus and default-length
training run backing the statistical bounds. Building the full model
takes a few minutes; only test files that request it pay that cost.
"""

import pytest

from facedetail.corpus import build_corpus
from facedetail.model import FitConfig, fit, load_training_set

SMALL_RES = 64
SMALL_SUBJECTS = 40
SMALL_EXPR = 6
SMALL_D = 16

FULL_RES = 64
FULL_SUBJECTS = 500
FULL_EXPR = 12
FULL_D = 64


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("small_corpus")
    build_corpus(path, n_subjects=SMALL_SUBJECTS, expressions_per_subject=SMALL_EXPR,
                 resolution=SMALL_RES, seed=11)
    return path


@pytest.fixture(scope="session")
def small_train(small_corpus_dir):
    return load_training_set(small_corpus_dir, "train")


@pytest.fixture(scope="session")
def small_test(small_corpus_dir):
    return load_training_set(small_corpus_dir, "test")


@pytest.fixture(scope="session")
def small_model(small_corpus_dir):
    return fit(small_corpus_dir,
               FitConfig(d=SMALL_D, steps=80, checkpoint_every=20, seed=3))


@pytest.fixture(scope="session")
def full_corpus_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("full_corpus")
    build_corpus(path, n_subjects=FULL_SUBJECTS, expressions_per_subject=FULL_EXPR,
                 resolution=FULL_RES, seed=0)
    return path


@pytest.fixture(scope="session")
def full_train(full_corpus_dir):
    return load_training_set(full_corpus_dir, "train")


@pytest.fixture(scope="session")
def full_test(full_corpus_dir):
    return load_training_set(full_corpus_dir, "test")


@pytest.fixture(scope="session")
def full_agepairs(full_corpus_dir):
    return load_training_set(full_corpus_dir, "agepair")


@pytest.fixture(scope="session")
def full_model(full_corpus_dir):
    return fit(full_corpus_dir, FitConfig(d=FULL_D, seed=0))
