"""Image generation in a 1D binary latent space.

A transformer tokenizer encodes images into k tokens of c binary bits each;
Bernoulli-diffusion and autoregressive generators model those bits, with
classifier-free guidance and multi-resolution decoding.
"""

__version__ = "0.1.0"
