"""mixpretrain: a desk-scale image-text pre-training workbench.

Builds cross-modal and object-aware training tasks from annotation corpora,
trains a miniature encoder-decoder transformer on equal-weight task mixtures,
and evaluates generated text with open-vocabulary exact match and CIDEr.
"""

import os

__version__ = "0.1.0"


def bundled_lexicon_path():
    """Path of the lexicon TSV covering the synthetic object vocabulary."""
    return os.path.join(os.path.dirname(__file__), "data", "synthetic_lexicon.tsv")


def load_bundled_lexicon():
    from .corpus import build_lexicon

    with open(bundled_lexicon_path()) as f:
        return build_lexicon(f)
