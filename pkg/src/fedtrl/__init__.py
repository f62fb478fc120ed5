"""Desk-scale simulator of federated time-series pretraining with
sub-domain adversarial training, prototype alignment and domain-aware
aggregation."""

import torch

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
