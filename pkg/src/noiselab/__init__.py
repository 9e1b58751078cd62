"""noiselab: unpaired image denoising via guided noise imitation.

The pipeline synthesizes noisy corpora, pretrains a background-consistency
filter network and a noise-level estimator, trains a guided noise generator
adversarially, and uses the generated noisy/clean pairs to supervise a
denoising U-Net.
"""

__version__ = "0.1.0"
