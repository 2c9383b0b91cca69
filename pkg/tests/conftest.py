"""Shared fixtures: a small synthetic world reused across module tests."""

import numpy as np
import pytest

from cotrec import data, synth
from cotrec.cotstore import (
    CoTStore,
    SyntheticCoTProvider,
    build_cot_records,
    sample_subset,
)
from cotrec.textenc import make_encoder

TEXT_DIM = 32


@pytest.fixture(scope="session")
def tiny_world():
    """Interactions, split, vocab for a 60-user synthetic log."""
    config = synth.SynthConfig(n_users=60, n_items=40, n_groups=3,
                               n_categories=4, events_min=5,
                               events_mean=7.0, seed=101)
    interactions = synth.generate(config)
    split, vocab, dropped = data.build_splits(interactions)
    split = data.sample_negatives(split, vocab, seed=13)
    return interactions, split, vocab, dropped


@pytest.fixture(scope="session")
def tiny_encoder():
    return make_encoder("synthetic", seed=0, dim=TEXT_DIM)


@pytest.fixture(scope="session")
def tiny_store(tiny_world, tiny_encoder):
    _, split, vocab, _ = tiny_world
    subset = sample_subset(split.train, 0.5, seed=5)
    provider = SyntheticCoTProvider(seed=3, signal=0.7, dim=TEXT_DIM)
    records = build_cot_records(subset, provider, tiny_encoder)
    return CoTStore(records)
