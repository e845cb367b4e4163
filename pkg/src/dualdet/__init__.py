"""Few-shot shape detector with dual task-specific feature paths.

A query image and a masked support set are encoded along separate
classification and regression paths, fused by four learned scalar
weights, aggregated pairwise, and decoded by per-task detection heads.
Training runs in two phases (base classes, then K-shot fine-tuning on a
synthetic shapes world) on a small reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
