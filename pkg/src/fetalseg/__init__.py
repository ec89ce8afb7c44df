"""Fetal-brain ultrasound segmentation: Inception U-Net, ultrasound augmentation,
Dice training harness and device-variance embeddings."""

__version__ = "0.1.0"
