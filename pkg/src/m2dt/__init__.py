"""Multi-scene video diffusion building blocks at desk scale.

Segment attention masks and their grouped evaluation, a zero-terminal-SNR
v-prediction diffusion core, a small functional transformer, two-stage
training with a segment-level loss mask, and joint or auto-regressive
sampling on a synthetic prototype task.
"""

__version__ = "0.1.0"
