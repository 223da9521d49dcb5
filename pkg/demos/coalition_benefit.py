"""Coalition FL versus one FL group over all users.

Two latent channel clusters make a single shared model a poor fit. The
correlation-guided partition trains one model per cluster instead.

    python demos/coalition_benefit.py
"""

import numpy as np

from cffl import coalition as co
from cffl import metrics, pipeline
from cffl.config import config_from_dict

cfg = config_from_dict({
    "scenario": {"samples_per_user": 240, "test_fraction": 1 / 6, "server_fraction": 1 / 6, "snr_db": 0.0},
    "estimator": {"channels": 8, "local_conv_layers": 1, "shared_layers": 0},
    "fl": {"rounds": 150, "learning_rate": 0.005},
})
prep = pipeline.prepare(cfg)
part = co.correlation_partition(metrics.correlation_matrix(prep.split.train))
init = pipeline.initial_model(cfg, prep)
print("partition:", part.assignment)

for name, p in (("coalitions", part), ("single group", co.CoalitionPartition.grand(prep.n_users))):
    errors = pipeline.evaluate(pipeline.train_partition(cfg, prep, p, init=init), prep)
    mean = float(np.mean(list(errors.values())))
    print(f"{name:>12}: mean NMSE {mean:.4f} ({pipeline.nmse_db(mean):.2f} dB)")
