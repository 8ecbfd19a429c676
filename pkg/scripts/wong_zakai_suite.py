"""Wong-Zakai tables for the whole test-field suite at one seed.

Prints one table per field and whether the solution sup-distances strictly
decrease; ``--json`` writes the tables for use as regression fixtures.
"""
import argparse
import time

import numpy as np

from roughflow.harness import io
from roughflow.harness.experiments import suite_configs, wong_zakai_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--json", help="write all tables to this file")
    args = ap.parse_args(argv)
    tables = {}
    for cfg in suite_configs(args.seed):
        t0 = time.perf_counter()
        table = wong_zakai_experiment(cfg, foliated=False)
        key = f"{cfg.fields}_d{cfg.d}"
        tables[key] = {
            "sol_sup_dist": table.column("sol_sup_dist").tolist(),
            "driver_sup_dist": table.column("driver_sup_dist").tolist(),
            "decreasing": table.strictly_decreasing(),
        }
        print(f"{key:16s} decreasing={table.strictly_decreasing()!s:5s} ({time.perf_counter() - t0:.1f}s)")
        print("   sol   ", np.array2string(table.column("sol_sup_dist"), precision=6))
        print("   driver", np.array2string(table.column("driver_sup_dist"), precision=6))
    if args.json:
        io.write_json(tables, args.json)


if __name__ == "__main__":
    main()
