"""Source-free few-shot domain adaptation for object detection.

Adapts a source-trained two-stage detector to a new imaging domain
using only k labeled target images: resolution-aware copy-paste
augmentation for rare classes, mean-teacher self-training with KL
consistency, and category-aware feature alignment.
"""

__version__ = "0.1.0"
