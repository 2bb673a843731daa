"""GAN-based COVID-19 chest X-ray augmentation with EMA teachers and transfer learning."""

__version__ = "0.1.0"
