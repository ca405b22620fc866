"""No-reference point cloud quality prediction from multi-view color/depth
renders, aligned against learnable quality-level prompts."""

__version__ = "0.1.0"
