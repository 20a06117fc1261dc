"""Explicitly constructed transformers that unroll gradient descent on the score objective."""

from .layout import Layout
from .net import (
    UnrolledNet,
    build_relu_net,
    build_softmax_net,
    decode,
    encode,
    evaluate,
    net_size_report,
)

__all__ = ["Layout", "UnrolledNet", "build_relu_net", "build_softmax_net", "decode", "encode",
           "evaluate", "net_size_report"]
