"""Train a narrow network on a small synthetic corpus and score every condition.

The full-size 500 + 500 run lives in the acceptance suite; this one uses
a reduced corpus and model so it finishes in a few seconds.

Run: python3 demos/03_train_and_evaluate.py
"""

import logging

from mgaa.experiment import ExperimentConfig, run_experiment
from mgaa.model import ModelConfig
from mgaa.train import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ExperimentConfig(
    n_real=60,
    n_fake=60,
    model=ModelConfig(cfeb_channels=(8, 8, 16), window_set=(3, 5), hidden_dims=(32, 16)),
    train=TrainConfig(batch_size=16, max_epochs=4, early_stop_patience=2),
)
result = run_experiment(cfg, progress=logging.info)

print()
for cond, value in result.report.condition_eers().items():
    print(f"{cond}: EER {value:.3f}" if value is not None else f"{cond}: n/a")
print(f"average over C1..C5: {result.report.average:.3f}")
print(f"EER non-decreasing from C1 to C5: {result.report.monotone_trend()}")
