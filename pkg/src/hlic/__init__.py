"""Online distortion-loss adaptation for rate-distortion trainees.

A policy over the log-weights of an MSE / MS-SSIM distortion loss is trained
with PPO while a population of compression trainees learns under the sampled
weights; every trajectory window the best trainee is broadcast to the rest.
"""

__version__ = "0.1.0"
