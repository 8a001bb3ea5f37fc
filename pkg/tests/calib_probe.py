"""Scratch calibration probe (not a test): attack potency vs epsilon."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from avrobust import attacks as atk
from avrobust import metrics as mx
from avrobust import pipeline
from avrobust.config import ExperimentConfig


def probe(label, ds_over, train_over, clips=(400, 150), eps_list=(0.05, 0.1, 0.3),
          attack_steps=100):
    t0 = time.time()
    over = {"train_clips": clips[0], "eval_clips": clips[1]}
    over.update(ds_over)
    config = ExperimentConfig().with_overrides(dataset=over, train=train_over)
    train = pipeline.generate_dataset(config.dataset, "train")
    evals = pipeline.generate_dataset(config.dataset, "eval")
    print(f"[{label}] synth {time.time()-t0:.0f}s feats mean {train.audio.mean():.2f} "
          f"std {train.audio.std():.2f}", flush=True)
    model, result = pipeline.train_in_memory(config, train)
    print(f"[{label}] train {time.time()-t0:.0f}s loss "
          f"{result.loss_curve[0][1]:.3f}->{result.loss_curve[-1][1]:.3f}", flush=True)
    clean = mx.evaluate(model, evals.audio, evals.labels)
    print(f"[{label}] clean mAP={clean.map:.3f} AUC={clean.auc:.3f}", flush=True)
    for eps in eps_list:
        cfg = atk.AttackConfig(norm="l2", epsilon=eps, alpha=eps / 25.0,
                               steps=attack_steps, batch_size=32, seed=0)
        pert = atk.train_universal_perturbation(model, train.audio, train.labels, cfg)
        att = mx.evaluate(model, evals.audio, evals.labels, perturbation=pert)
        print(f"[{label}] eps={eps}: mAP={att.map:.3f} ratio={att.map/clean.map:.2f} "
              f"({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    if which == "a":
        probe("snrA", {"noise_floor": 0.1, "amp_lo": 0.015, "amp_hi": 0.05,
                       "dur_lo": 0.6, "dur_hi": 2.0},
              {"epochs": 10})
    elif which == "b":
        probe("snrB", {"noise_floor": 0.15, "amp_lo": 0.01, "amp_hi": 0.03,
                       "dur_lo": 0.5, "dur_hi": 1.5},
              {"epochs": 10})
    elif which == "c":
        probe("snrC", {"noise_floor": 0.1, "amp_lo": 0.02, "amp_hi": 0.08,
                       "dur_lo": 0.8, "dur_hi": 2.5},
              {"epochs": 10})
