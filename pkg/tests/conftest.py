"""Shared fixtures: a session-wide cache of full experiment runs.

The acceptance suite and a few harness tests need 25-round runs at the
default configuration across methods and seeds. Runs are memoized by
config so nothing is recomputed, and batches are warmed up in parallel
worker processes (each run is single-threaded and deterministic).
"""

from concurrent.futures import ProcessPoolExecutor

import pytest

from fedalign.harness import ExperimentConfig, run_experiment


def _run(cfg: ExperimentConfig):
    return run_experiment(cfg)


class RunCache:
    def __init__(self):
        self._runs = {}

    def get(self, **overrides):
        cfg = ExperimentConfig(**overrides)
        if cfg not in self._runs:
            self._runs[cfg] = run_experiment(cfg)
        return self._runs[cfg]

    def warm(self, configs):
        """Compute any missing runs for the given override dicts in parallel."""
        missing = [
            ExperimentConfig(**kw) for kw in configs
            if ExperimentConfig(**kw) not in self._runs
        ]
        if not missing:
            return
        with ProcessPoolExecutor(max_workers=min(8, len(missing))) as ex:
            for cfg, res in zip(missing, ex.map(_run, missing)):
                self._runs[cfg] = res


@pytest.fixture(scope="session")
def run_cache():
    return RunCache()
