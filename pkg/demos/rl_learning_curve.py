"""DQN and Qmix coalition selection against the correlation surrogate.

Prints the reward averaged over 200-epoch windows and the best partition
each learner visited.

    python demos/rl_learning_curve.py
"""

from cffl import coalition as co
from cffl import drl, metrics, pipeline
from cffl.config import RLConfig, load_config

cfg = load_config("configs/desk.yaml")
prep = pipeline.prepare(cfg)
env = drl.SurrogateEnvironment(co.SurrogateOracle(metrics.correlation_matrix(prep.split.train)))

for backend in ("dqn", "qmix"):
    history = drl.run_cffl(env, prep.n_users, 3, RLConfig(epochs=2000), backend, seed=0)
    r = history.rewards()
    windows = " ".join(f"{r[i:i + 200].mean():.3f}" for i in range(0, len(r), 200))
    best = max(history.records, key=lambda rec: rec.reward)
    print(f"{backend}: windowed reward {windows}")
    print(f"{backend}: best partition {best.action} with reward {best.reward:.4f}")
