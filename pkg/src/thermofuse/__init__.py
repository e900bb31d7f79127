"""Multimodal thermal encoder pipeline for green-part quality prediction.

Subpackages:
    autodiff    - minimal reverse-mode tensor engine (dense, conv3d, VAE losses, Adam)
    synthbed    - deterministic synthetic print-bucket generator with planted quality oracle
    preprocess  - undistortion, ROI cropping, orientation normalization, tabular cleaning, splits
    models      - AE / 3D-VAE reconstruction models and the fusion predictor variants
    evalreport  - metrics (ADP, % error, Pearson) and report/figure emission
    cli         - command-line pipeline and on-disk formats (voxel blobs, manifests, checkpoints)
"""

__version__ = "0.1.0"
