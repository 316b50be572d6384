"""Contrastive masked EEG pre-training at desk scale.

Subpackages map onto the pipeline: ``signals`` (preprocessing and synthetic
data), ``model`` (tokenizer, encoder, decoder, momentum encoder), ``augment``
(mirror-scale views), ``objectives``, ``train``, ``probe`` and
``diagnostics``, all built on the reverse-mode engine in ``diffengine``.
"""

__version__ = "0.1.0"
