"""
GRPO post-training on a noisy circle
====================================

A base model pretrained on noisy circle points is fine-tuned to put its samples
back on the unit circle. A second run rewards only closeness to a noisy reference
and shows the reward being gamed, then a weighted mix of three rewards reins it in.
Takes about a minute.
"""

import numpy as np

from flowgrpo import harness as H

# 1. the clean-density reward alone
cfg = H.load_config("preset:circle_loglik")
base, _ = H.pretrain(cfg)
result, _ = H.run_grpo(cfg, base.clone())
ll = np.array(result.eval_log.column("loglik"))
steps = result.eval_log.steps
for i in range(0, len(ll), 50):
    print(f"step {steps[i]:>3}: held-out loglik {ll[max(0, i - 12):i + 13].mean():+.4f} (smoothed)")
print(f"closed {(ll[-1] - ll[0]) / -ll[0]:.0%} of the gap to the on-circle maximum")

# 2. optimizing fidelity to a noisy reference drags samples off the circle
cfg = H.load_config("preset:circle_fidelity")
base, _ = H.pretrain(cfg)
arms = {
    "fidelity only": cfg,
    "multi-reward": H.load_config("preset:circle_multi"),
}
for name, arm_cfg in arms.items():
    ev = H.run_grpo(arm_cfg, base.clone())[0].eval_log
    print(f"{name:>14}: loglik {ev.column('loglik')[0]:+.4f} -> {ev.last('loglik'):+.4f}, "
          f"fidelity {ev.column('fidelity')[0]:+.4f} -> {ev.last('fidelity'):+.4f}")
