"""HiFANet: point-cloud semantics from pose-noisy multi-view 2D observations.

Modules:

* :mod:`hifanet.geometry` -- poses, projection, bag-of-frames, patches
* :mod:`hifanet.numerics` -- a small reverse-mode autodiff on numpy
* :mod:`hifanet.attention` -- the patch / instance / inter-point blocks
* :mod:`hifanet.baselines` -- label voting, AvgPool_FC and ablations
* :mod:`hifanet.training` -- loss, SGD, metrics and the training loop
* :mod:`hifanet.datagen` -- synthetic scenes and the dataset file format
* :mod:`hifanet.experiments` -- the comparison benchmark and noise sweep
* :mod:`hifanet.cli` -- the ``hifanet`` command
"""

__version__ = "0.1.0"
