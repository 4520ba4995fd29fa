"""Standard plenoptic camera optics with an explicit exit pupil."""

__version__ = "0.1.0"
