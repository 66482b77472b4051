"""Turn image-classifier heads into detector heads for categories without box labels."""

__version__ = "0.1.0"
