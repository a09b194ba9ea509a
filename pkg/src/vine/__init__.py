"""Few-shot segmentation at desk scale, end to end on a gradient tape.

Subpackage map:

- :mod:`vine.tensor`    dense float64 tensors + reverse-mode tape
- :mod:`vine.geometry`  corner-perturbed homographies, bilinear warping
- :mod:`vine.graphs`    spatial KNN graph, star / fully connected view graphs
- :mod:`vine.gat`       multi-head graph attention layer
- :mod:`vine.svga`      spatial-view alignment and prototype consistency
- :mod:`vine.dfm`       discriminative foreground modulation
- :mod:`vine.vrp`       visual reference prompts and the mask decoder head
- :mod:`vine.episodes`  synthetic episode generator and metrics
- :mod:`vine.trainer`   encoders, parameter registry, Adam, training loop
- :mod:`vine.config`    flat key=value configuration with documented defaults
- :mod:`vine.cli`       command-line entry point (``vine <subcommand>``)
"""

__version__ = "0.1.0"
