"""Extract the three cepstral front ends from one synthetic utterance.

Run: python3 demos/01_features.py
"""

import numpy as np

from mgaa.features import FeatureKind, extract
from mgaa.synthetic import make_segment

seg = make_segment(label=0, rng=np.random.default_rng(0))
print(f"segment: {seg.samples.size} samples at 16 kHz")

for kind in FeatureKind:
    feat = extract(seg, kind)
    static = feat.data[0, :20]
    print(f"{kind.name:5s} tensor {feat.data.shape}  c0 mean {static[0].mean():8.2f}  c1..c19 std {static[1:].std():6.2f}")
