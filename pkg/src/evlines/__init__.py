"""Line segment detection from a motion-blurred frame fused with its event stream."""

__version__ = "0.1.0"
