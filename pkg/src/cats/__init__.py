"""CATS: complementary CNN and transformer encoders for volumetric segmentation."""

__version__ = "0.1.0"
