"""Backdoored prompt learning for a desk-scale two-tower image-text model.

Subpackages and modules:

* ``numerics``: reverse-mode tensors, optimisers, finite-difference oracle
* ``synthcorpus``: procedural image/class-name corpus with splits and shifts
* ``twotower``: the frozen image/text encoders and contrastive pre-training
* ``promptengine``: context generator and static context learners
* ``attack``: trigger warm-up and joint prompt/trigger optimisation
* ``evalsuite``: ACC, ASR, H, PSNR/SSIM, similarity and retrieval metrics
* ``defensesuite``: trigger reconstruction and channel Lipschitz pruning
* ``harness``: configs, run artifacts and the ``promptdoor`` CLI
"""

__version__ = "0.1.0"
