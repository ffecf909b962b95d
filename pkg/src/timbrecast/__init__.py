"""Zero-shot voice conversion at desk scale: a single-codebook codec for
content tokens, multi-scale timbre conditioning, and a waveform diffusion
model sampled with dual classifier-free guidance."""

__version__ = "0.1.0"
