"""Generator + segmentor training with multi-stage backpropagation on synthetic layered-tissue phantoms."""

__version__ = "0.1.0"
