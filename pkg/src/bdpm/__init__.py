"""Binary diffusion over bit-plane image representations.

Images are losslessly decomposed into binary bit-planes, corrupted by
XOR with Bernoulli masks under a quadratic flip-probability schedule,
and restored by a small convolutional denoiser trained with a
plane-weighted binary cross-entropy loss.  Conditioning covers 4x
super-resolution and rectangle-mask inpainting.
"""

from bdpm.bitplanes import BitPlanes, decompose, recompose
from bdpm.noise import NoiseSchedule, apply_noise, sample_noise

__all__ = [
    "BitPlanes",
    "decompose",
    "recompose",
    "NoiseSchedule",
    "apply_noise",
    "sample_noise",
]

__version__ = "0.1.0"
