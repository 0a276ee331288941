"""Cross-embodiment grasp-lift training stack.

Subpackages follow the pipeline: ``autodiff`` (gradient engine), ``morphology``
(shared action space and embodiment sampling), ``env`` (analytic grasp-lift
environment), ``policy`` (history-conditioned transformer and baselines),
``training`` (PPO + in-process all-reduce), ``distill`` (teacher-to-student
regression), ``evaluate`` and ``cli`` (experiment tooling).
"""

__version__ = "0.1.0"
