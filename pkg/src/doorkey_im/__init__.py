"""A2C on DoorKey with VAE-novelty and LLM-judged intrinsic rewards."""

__version__ = "0.1.0"
