"""Shared fixtures: the trained edge net and the 64x64 phantom data."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest
from hypothesis import settings

from tomomip.datasets import PhantomSpec, generate_phantom
from tomomip.edgenet import (EdgeNet, TrainConfig, corpus_training_set, max_output,
                             synthetic_corpus, train_edge_net)
from tomomip.projector import build_geometry, build_radon_matrix

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

TRAIN_CFG = TrainConfig()


def _train_default_net():
    samples = corpus_training_set(synthetic_corpus(48, seed=0), omega=255.0, seed=0)
    net, report = train_edge_net(samples, TRAIN_CFG)
    max_output(net)
    net.meta["max_target"] = report.max_target
    return net


@pytest.fixture(scope="session")
def trained_net(request):
    """Default-corpus net with its u_bar, cached across sessions by config hash."""
    key = hashlib.sha256(json.dumps(TRAIN_CFG.__dict__, sort_keys=True,
                                    default=str).encode()).hexdigest()[:16]
    cache = getattr(request.config, "cache", None)
    if cache is None:  # cache plugin disabled
        return _train_default_net()
    path = cache.mkdir("tomomip") / f"net-{key}.edgenet.json"
    if path.exists():
        return EdgeNet.load(path)
    net = _train_default_net()
    net.save(path)
    return net


@pytest.fixture(scope="session")
def full_setup():
    """64x64 phantom with its 180-angle operator."""
    truth = generate_phantom(PhantomSpec(side=64))
    geom = build_geometry(180, 0.0, 64)
    R = build_radon_matrix(geom)
    return truth, geom, R


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one PASS/FAIL line; all lines are
    printed in the terminal summary."""

    def report(n, ok, detail):
        ACCEPTANCE_LINES.append(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
