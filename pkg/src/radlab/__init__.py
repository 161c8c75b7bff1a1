"""Desk-scale laboratory for staged adaptation of encoder-decoder summarizers.

Modules: ``tensor`` (autodiff core), ``tokenizer``, ``corpus``, ``denoise``,
``model``, ``train``, ``checkpoint``, ``decode``, ``metrics``, ``report``,
``experiment`` and ``cli``.
"""

__version__ = "0.1.0"
