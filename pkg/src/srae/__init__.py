"""Split-representation auto-encoder (SRAE) on a small numpy autodiff core.

Modules:

* ``srae.diffcore`` -- operator graph, reverse-mode gradients, finite-difference checks
* ``srae.model``    -- encoder trunk and streams, decoder, latent discriminators
* ``srae.losses``   -- perceptual, cross-entropy, entropy and KL objectives
* ``srae.data``     -- synthetic two-style shapes, PGM/PPM directories, balanced batches
* ``srae.training`` -- the four-update training step, loop, metrics and checkpoints
* ``srae.tasks``    -- translation, content search, domain probes, encoding export
* ``srae.cli``      -- the ``srae`` command
"""

__version__ = "0.1.0"
