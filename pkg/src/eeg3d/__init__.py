"""EEG-conditioned 3D object reconstruction.

Stage A trains an EEG encoder (masked reconstruction + temporal-transformer
classification) whose fused latent codes condition a small latent diffusion
model. Stage B distills that diffusion prior into a radiance field, with an
EEG/text/image alignment loss and a content/style color loss.
"""

__version__ = "0.1.0"
