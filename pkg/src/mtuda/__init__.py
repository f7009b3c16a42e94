"""Multi-target adversarial domain adaptation for semantic segmentation on synthetic scenes.

Modules: ``tensor`` (autodiff), ``nets``, ``losses``, ``synth`` (datasets),
``taxonomy``, ``trainers``, ``metrics``, ``pseudo_label``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
