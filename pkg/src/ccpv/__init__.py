"""Cross-chirality palmprint verification.

Enroll one palm, verify with either palm: an embedding network trained with
a chirality-consistency contrastive loss, matched with a flip-based
four-distance rule.
"""

__version__ = "0.1.0"
