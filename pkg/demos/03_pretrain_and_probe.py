"""Pre-train a small encoder, then linear-probe it against a random one.

The default step budget is small so the script finishes in about a minute;
pass a larger number (e.g. 560 = 20 epochs) for the full run.
Run: python3 demos/03_pretrain_and_probe.py [steps]
"""
import sys

import numpy as np

from comet_eeg.model import ModelState
from comet_eeg.probe import linear_probe
from comet_eeg.signals import SynthConfig, synth_downstream, synth_eeg
from comet_eeg.train import TrainConfig, run_pretrain

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 84
cfg = SynthConfig(seed=0)
tcfg = TrainConfig(seed=0)

state, log = run_pretrain(synth_eeg(cfg, 500), tcfg, max_steps=steps)
print(f"{len(log.records)} steps in {log.wall_time:.0f}s")
for epoch, (rec, con) in enumerate(zip(log.epoch_means("L_R"), log.epoch_means("L_C")), start=1):
    print(f"epoch {epoch:2d}  L_R {rec:8.3f}  L_C {con:6.3f}")

samples, labels = synth_downstream(SynthConfig(seed=100), n_classes=4)
split = int(0.7 * len(labels))
train, test = (samples[:split], labels[:split]), (samples[split:], labels[split:])

_, pretrained = linear_probe(state, *train, *test, seed=0)
random_state = ModelState.initialize(tcfg.model, cfg.vocabulary(), seed=0)
_, random = linear_probe(random_state, *train, *test, seed=0)
for name, rep in (("pretrained", pretrained), ("random", random)):
    print(f"{name:10s} balanced acc {rep.balanced_accuracy:.3f}  kappa {rep.kappa:.3f}  F1 {rep.f1_weighted:.3f}")
