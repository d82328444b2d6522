"""Tomographic RF imaging of human-sized obstructions from monostatic RFID reads.

The package couples a synthetic RFID channel simulator with two image
reconstruction backends (a regularized analytical inverse solver and a deep
regression ensemble), plus the preprocessing, multi-person windowing and
popularity-tracking stages needed to turn raw tag reads into per-category
browsing scores.
"""

__version__ = "0.1.0"
