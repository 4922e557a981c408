"""Toy-scale NMT engine with mention-focused cross-attention.

The package is organized as a pipeline of file-composable stages:

- ``tensor``: dense-array reverse-mode autodiff engine (numpy-backed)
- ``textproc``: BPE subwords, vocab, POS-to-mention tags
- ``model``: baseline transformer encoder-decoder
- ``mention``: mention-masked cross-attention extension and joint loss
- ``train``: Adam + inverse-sqrt schedule, checkpointing, warm start
- ``decoding``: greedy/beam translation and teacher-forced scoring
- ``evaluation``: BLEU, pronoun-translation accuracy, contrastive accuracy
- ``synth``: synthetic pronoun-agreement task generator
- ``cli``: the ``mention-nmt`` command line front end
"""

__version__ = "0.1.0"
