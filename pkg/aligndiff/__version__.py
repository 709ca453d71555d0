# pylint: skip-file
__title__ = "aligndiff"
__description__ = "Similarity-aligned latent diffusion on a verifiable synthetic tissue corpus"
__version__ = "0.1.0"
__url__ = ("https://github.com/aligndiff/aligndiff",)
__author__ = "aligndiff developers"
__license__ = "MIT"
