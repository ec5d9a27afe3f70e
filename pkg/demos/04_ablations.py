"""Parameter counts of the ten structural variants, plus a one-epoch smoke run.

Run: python3 demos/04_ablations.py
"""

from mgaa.experiment import run_ablations, toy_features
from mgaa.model import ABLATIONS, MGAANet, ablation_config

LABELS = {
    "a": "no attention module",
    "b": "global branch only",
    "c": "local branches only",
    "d": "attention after block 1 only",
    "e": "attention after block 3 only",
    "f": "equal-weight fusion",
    "g": "windows 3, 5",
    "h": "windows 3, 5, 7",
    "i": "windows 3, 5, 7, 9, 11",
    "j": "full model",
}

full = MGAANet(ablation_config("j")).n_params
for letter in ABLATIONS:
    n = MGAANet(ablation_config(letter)).n_params
    print(f"({letter}) {LABELS[letter]:30s} {n:>10,}  ({n - full:+,})")

x, y = toy_features(16, seed=0)
for letter, (_, res) in run_ablations(x, y, letters="adj").items():
    print(f"({letter}) one epoch, train loss {res.history[-1].train_loss:.3f}")
