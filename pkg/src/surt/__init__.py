"""Streaming unmixing and recognition transducer, desk scale.

Library layout: `numcore`/`autograd` hold the tensor, optimizer, and tape
machinery; `transducer` the lattice loss and decoding; `dualpath` chunking
and sparse attention patterns; `model` the two-channel network; `losses`
session-level assignment losses; `simulator` the synthetic session corpus;
`scoring` the best-assignment WER; `trainer` the training loop; `cli` the
command-line workflow.
"""

__version__ = "0.1.0"
