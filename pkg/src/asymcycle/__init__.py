"""Asymmetric unpaired image-to-image translation.

A strict dense-fusion generator ``G`` (X -> Y) and a relaxed residual generator
``F`` (Y -> X) are trained against two patch discriminators with least-squares
adversarial losses, a dual-consistency loss (deep-feature consistency of the
cycle reconstruction plus edge-semantic consistency of the translation) and an
identity loss.
"""

__version__ = "0.1.0"
