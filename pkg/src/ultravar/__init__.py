"""Scale-by-scale autoregressive generation for fUS-style images.

Subpackages cover the tensor/autodiff core, the multi-scale residual
tokenizer, the next-scale transformer, the output refinement module, the
synthetic dataset generator, quality metrics, the downstream augmentation
benchmark, and the command-line pipeline.
"""

__version__ = "0.1.0"
