"""Few-shot GAN adaptation with cross-domain distance consistency and anchor-relaxed realism."""
__version__ = "0.1.0"
