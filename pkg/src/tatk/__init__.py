"""Toolkit for generating and evaluating transferable adversarial examples.

Subpackages are intentionally flat: ``tensor`` (autodiff engine), ``nn``
(models and training), ``data`` (datasets and PPM I/O), ``transforms``
(local-mixing input pipeline), ``losses`` (attack objective), ``attack``
(iterative generation), ``evaluation`` (transfer matrices and sweeps),
``config``/``cli`` (experiment wiring).
"""

__version__ = "0.1.0"
