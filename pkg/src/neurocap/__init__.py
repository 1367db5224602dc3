"""neurocap: brain-to-text decoding pipeline on synthetic tri-modal data.

Masked-voxel pretraining, contrastive fMRI/image/text alignment, caption
generation through a cross-attention decoder, prompt-based QA, and an
oracle-checked caption metric suite, all on a small numpy autodiff core.
"""

__version__ = "0.1.0"
