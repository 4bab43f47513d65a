"""Robustness-oriented vision models, attacks and adversarial training on numpy."""
from .arch import ModelSpec, Model, build, forward, preset_spec
from .threat import ThreatModel, project
from .attacks import AttackConfig, apgd_attack, pgd_attack, evaluate_robust_accuracy

__version__ = "0.1.0"
__all__ = [
    "ModelSpec", "Model", "build", "forward", "preset_spec",
    "ThreatModel", "project",
    "AttackConfig", "apgd_attack", "pgd_attack", "evaluate_robust_accuracy",
]
