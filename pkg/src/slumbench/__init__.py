"""slumbench: dual-task evaluation pipeline for pixel-embedding slum mapping.

Library layout (one module per subsystem):
    grid       raster primitives, 3x3 block partition, BIF container
    labels     sub-pixel mask aggregation and density diagnostics
    features   category blocks, combination codes, robust scaling
    splits     random/spatial protocols and strategy corpus assembly
    models     the classifier/regressor zoo behind one contract
    metrics    pixel metrics, R^2 decomposition, rankings, Wilcoxon
    spatial    Queen weights, Moran's I, LISA, SSIM, area error
    dims       PCA ablation, saturation points, Shapley attribution
    synth      deterministic synthetic world generator
    pipeline   manifest-driven experiment grid + full-scene inference
    report     plot-ready CSV/JSON table emission
    cli        the `slumbench` command
"""

__version__ = "0.1.0"
