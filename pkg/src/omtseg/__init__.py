"""Desk-scale open-vocabulary panoptic segmentation.

A from-scratch stack: a minimal reverse-mode tensor engine, a multiway
vision-language fusion encoder with a convolutional spatial-prior adapter,
category prompting with trainable slot deltas, a query-based segmentation
head, set-prediction training, and panoptic evaluation.
"""

__version__ = "0.1.0"
