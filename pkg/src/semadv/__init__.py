"""Semantic-attribute adversarial example generation with toy diffusion models.

The package trains small diffusion denoisers on procedural shape data, learns
per-attribute semantic edit functions in the denoiser's bottleneck, optimizes
per-timestep attribute weights into natural adversarial images, and evaluates
the results against classifiers, distribution metrics, and input-level
defenses. Everything runs on a CPU in minutes.

Submodules group by role: diffusion math (`schedule`), denoiser (`unet`),
sampling (`sampler`), data (`data`), encoders/classifiers, semantic attributes
(`semantic`, `trainer`, `losses`), the attack engine (`attack`), phase-marker
calibration (`calibrate`), evaluation (`metrics`, `defenses`, `imaging`), and
orchestration (`config`, `runner`, `cli`).
"""

from semadv.schedule import (
    DegenerateStepError,
    NoiseSchedule,
    StepDecomposition,
    build_cosine_schedule,
    build_linear_schedule,
    ddim_step,
    decompose_step,
    forward_diffuse,
    predict_x0,
    sigma_t,
)

__all__ = [
    "DegenerateStepError",
    "NoiseSchedule",
    "StepDecomposition",
    "build_cosine_schedule",
    "build_linear_schedule",
    "ddim_step",
    "decompose_step",
    "forward_diffuse",
    "predict_x0",
    "sigma_t",
]
