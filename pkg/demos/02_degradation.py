"""Show how packet loss and the mu-law stand-in codec change a signal.

Run: python3 demos/02_degradation.py
"""

import math

import numpy as np

from mgaa.degrade import CodecId, DegradationSpec, degrade, gilbert_elliott_for_plr
from mgaa.synthetic import make_segment

seg = make_segment(label=1, rng=np.random.default_rng(1))
n_frames = seg.samples.size // 320


def lost_fraction(samples):
    frames = samples[: n_frames * 320].reshape(n_frames, 320)
    return float(np.mean(~frames.any(axis=1)))


for plr in (0.0, 0.01, 0.05, 0.10, 0.20):
    for name, model in (("bernoulli", None), ("gilbert-elliott", gilbert_elliott_for_plr(plr))):
        kw = {} if model is None else {"loss_model": model}
        out = degrade(seg, DegradationSpec(CodecId.MULAW_STANDIN, plr, seed=7, **kw))
        print(f"PLR {plr:4.0%} {name:15s} silent frames {lost_fraction(out.samples):6.1%}")

clean = degrade(seg, DegradationSpec(CodecId.MULAW_STANDIN, 0.0))
err = seg.samples - clean.samples
print(f"mu-law round trip SNR on this utterance: {10 * math.log10(np.sum(seg.samples**2) / np.sum(err**2)):.1f} dB")
