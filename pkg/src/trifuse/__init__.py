"""trifuse: desk-scale trimodal regression workbench.

Text, acoustic and visual feature streams are fused through reparameterized
modality encoders, a gated fusion block and a residual shift into the text
stream. Training balances the modality encoders with performance-driven
gradient modulation and a conflict-aware penalty, on top of a five-term
objective with a moment-matching statistical regularizer.
"""

__version__ = "0.1.0"
