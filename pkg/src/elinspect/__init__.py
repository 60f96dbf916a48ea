"""Defect inspection of electroluminescence solar-cell images.

Anomaly detection with a GAN-based reconstruction model, automatic
pixel-wise labeling from its residual maps, and supervised U-Net
segmentation trained on those labels.
"""

__version__ = "0.1.0"
