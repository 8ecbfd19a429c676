"""Recompute every frozen regression fixture used by the test suite.

Prints Python literals ready to paste; nothing is written to the tests.
"""
import numpy as np

from roughflow.harness.config import ExperimentConfig
from roughflow.harness.experiments import ldp_experiment, wong_zakai_experiment
from roughflow.rough_lift import brownian_rough_path, sample_brownian
from roughflow.tensor_algebra import rp_distance


def show(name, values):
    print(f"{name} = {[float(v) for v in values]!r}")


def main():
    w = sample_brownian(1, 1.0, 14, 42)
    paths = {m: brownian_rough_path(w, m) for m in range(6, 14)}
    show("CAUCHY_TREND", [rp_distance(paths[m], paths[m + 1]) for m in range(6, 13)])
    table = wong_zakai_experiment(ExperimentConfig())
    show("WZ_EXPONENTIAL", table.column("sol_sup_dist"))
    show("WZ_FOLIATED", table.column("foliated_sup_dist"))
    show("LDP_SEED7", ldp_experiment(ExperimentConfig(seed=7))["q"])
    print("# roundtrip column:", np.array2string(table.column("roundtrip"), precision=3))


if __name__ == "__main__":
    main()
