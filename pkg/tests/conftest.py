"""Shared fixtures for the test suite."""

import pytest


@pytest.fixture(scope="session")
def task_cache(tmp_path_factory):
    """On-disk subgoal-sequence cache shared by every test in the session.

    Sequences are generated lazily on first use and reloaded from disk by
    any later test that asks for the same task and spec.
    """
    return tmp_path_factory.mktemp("task-cache")
