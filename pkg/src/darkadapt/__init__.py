"""Adapting a bright-domain face detector to unlabeled dark images.

The package is organized around four pixel-level states of the data:
raw dark images, their brightened versions, bright images, and
synthetically degraded bright images. Pixel pipelines (``enhance``,
``degrade``) build the intermediate states; self-supervised losses
(``jigsaw``, ``contrastive``) pull their features together while the
detector keeps training on labeled bright data.
"""

__version__ = "0.1.0"

from darkadapt.data import Domain, Image, GroundTruthBox  # noqa: F401
