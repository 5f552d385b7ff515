"""Articulated hand tracking from depth sequences.

A skinned triangle mesh driven by a twist-parameterized skeleton is
registered to preprocessed depth frames by minimizing a four-term objective:
bidirectional surface alignment, a self-collision penalty, and a salient
(fingertip) detection consistency term.
"""

__version__ = "0.1.0"
