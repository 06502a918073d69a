"""Multi-level image-text alignment at desk scale.

Toy dual encoders trained with a stack of alignment objectives: a global
sigmoid-contrastive loss over summary and long captions, learnable local
token calibration, word-patch reconstruction, and subcaption-aggregated
patch alignment. Everything is numpy with hand-written backward passes
verified by finite differences.
"""

__version__ = "0.1.0"
