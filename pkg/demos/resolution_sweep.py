"""Briefly adversarially train a micro isotropic ConvNeXt at 32 px, then evaluate it at several test resolutions.

The micro ViT presets accept the same resolutions (positional embeddings are
interpolated) but train much more slowly on this toy data.
"""
import math

from robustlab.arch import build, preset_spec
from robustlab.data import synth_blobs
from robustlab.sweep import resolution_sweep
from robustlab.threat import ThreatModel
from robustlab.train import TrainConfig, adv_train

data = synth_blobs(200, 3, 32, margin=200, seed=1)
train, val = data.split_off(60, seed=1)
model = build(preset_spec("micro-isotropic-convnext", num_classes=3), seed=1)
cfg = TrainConfig(epochs=20, warmup_peak_epoch=2, batch_size=20, attack_steps=1,
                  tm=ThreatModel(math.inf, 4 / 255), eval_size=32, eval_iters=2, seed=1)
trained = adv_train(model, train, cfg, val).model

for tm in (ThreatModel(math.inf, 8 / 255), ThreatModel(2, 0.5)):
    report = resolution_sweep(trained, val, [16, 24, 32, 40, 48, 60], tm, scale_l2=True, ce_iters=5)
    print(report.to_csv())
