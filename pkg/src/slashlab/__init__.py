"""Desk-scale laboratory for slot-based object discovery.

Core pieces: a minimal tape autodiff (``autodiff``), the slot-attention
model with attention refinement and point guidance (``model``), a sprite
scene generator with weak annotation sampling (``data``), segmentation
metrics (``metrics``), the training harness (``training``), and a CLI
(``cli``).
"""

__version__ = "0.1.0"
