"""Small-data compression workbench.

Magnitude pruning, knowledge distillation, and post-training int8
quantization for small transformer token-classification models, with an
entity-level F1 / latency / size evaluation harness and a CLI that composes
the workflows.
"""

__version__ = "0.1.0"
