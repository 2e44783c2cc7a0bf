"""Event-guided motion deblurring with image-configured spiking neurons."""

__version__ = "0.1.0"
