"""Attention and embedding diagnostics on a briefly trained encoder.

Mean attention distance and NMI per layer, channel-embedding clusters,
and a log-linear scaling fit. Run: python3 demos/04_diagnostics.py [steps]
"""
import sys

import numpy as np

from comet_eeg.diagnostics import attention_distance, attention_nmi, attention_stack, channel_similarity, fit_scaling
from comet_eeg.signals import SynthConfig, synth_eeg
from comet_eeg.train import TrainConfig, run_pretrain

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 56
cfg = SynthConfig(seed=0)
samples = synth_eeg(cfg, 500)

# the combined loss next to reconstruction alone (lam=0)
for label, lam in (("combined", 1.0), ("reconstruction only", 0.0)):
    state, _ = run_pretrain(samples, TrainConfig(seed=0, lam=lam), max_steps=steps)
    stack = attention_stack(state, samples[:32])
    print(f"{label:20s} distance per layer {np.round(attention_distance(stack), 3).tolist()}, "
          f"NMI per layer {np.round(attention_nmi(stack), 4).tolist()}")

ids = state.channel_ids(samples[0].channel_names)
clusters = channel_similarity(state.params["enc.chan"][ids], n_clusters=4)
print("channel clusters:", dict(zip(samples[0].channel_names, clusters.labels.tolist())))

sizes = np.array([5e6, 2e7, 5e7, 1.5e8])
fit = fit_scaling(sizes, 0.013 * np.log(sizes) + 0.568 + np.array([0.004, -0.003, 0.002, -0.002]))
print(f"scaling fit: slope {fit.slope:.4f}, intercept {fit.intercept:.4f}, R^2 {fit.r2:.3f}")
