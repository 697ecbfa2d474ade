"""Flow-matching conditional generation with GRPO post-training, at desk scale.

Submodules: ``autodiff`` (reverse-mode gradients), ``model`` (velocity MLP and
checkpoints), ``flow_matching``, ``samplers`` (ODE/SDE stepping and
trajectories), ``grpo``, ``rewards``, ``tasks`` and ``harness``/``cli``.
"""
__version__ = "0.1.0"
