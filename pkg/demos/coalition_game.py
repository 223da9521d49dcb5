"""Coalition game on the two-cluster layout.

Builds the user correlation matrix, runs altruistic switch dynamics from
the grand coalition and checks the result against full enumeration.

    python demos/coalition_game.py
"""

import numpy as np

from cffl import coalition as co
from cffl import metrics, pipeline
from cffl.config import load_config

cfg = load_config("configs/desk.yaml")
prep = pipeline.prepare(cfg)
corr = metrics.correlation_matrix(prep.split.train)
np.set_printoptions(precision=2, suppress=True)
print("channel correlation between users:\n", corr)

oracle = co.SurrogateOracle(corr)
settings = co.GameSettings()
start = co.CoalitionPartition.grand(prep.n_users, 2)
final, trace = co.switch_dynamics(start, oracle, settings)
for t in trace:
    print(f"step {t.step}: user {t.user} moves {t.source} -> {t.target}, potential {t.potential:.4f}")
print("terminal partition:", final.assignment)

report = co.brute_force_stability(oracle, settings, prep.n_users, 2)
print(f"{len(report.stable)} stable partitions out of {3 ** prep.n_users}")
print("terminal partition stable:", final.assignment in report.stable)
print("potential maximizer:", report.argmax, f"(potential {report.potentials[report.argmax]:.4f})")
