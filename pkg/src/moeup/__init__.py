"""moeup: dense-to-MoE checkpoint surgery, a toy trainable MoE LM, and analysis tools.

The package is organized as one module per concern:

- ``numerics``: seeded substreams, Box-Muller sampling, softmax / top-k kernels
- ``config``: architectural hyperparameters (:class:`moeup.config.ModelConfig`)
- ``checkpoint``: named-tensor archive with a JSON manifest and a raw blob
- ``model``: SwiGLU FFN, sparse MoE layer, and a toy decoder-only LM with
  hand-written backward passes
- ``upcycle``: all dense-to-MoE construction methods (naive copy, random-noise,
  statistics-matched partial re-initialization, branch merging, fine-grained
  and shared-expert variants)
- ``accounting``: parameter and FLOPs accounting
- ``trainer``: AdamW training loop with cosine schedule and load-balancing loss
- ``corpus``: procedurally generated multi-domain token corpus
- ``analysis``: routing statistics, retained-overlap reports, catch-up curves
- ``cli``: the ``moeup`` command-line entry point
"""

__version__ = "0.1.0"
