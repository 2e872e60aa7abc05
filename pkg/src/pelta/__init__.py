"""Enclave shielding of input-adjacent gradients, gradient attacks, and the
experiment harness that measures how much the shield blunts them."""

__version__ = "0.1.0"
