"""Multi-camera dense SLAM back-end on synthetic sequences.

Modules: ``geometry`` (Lie groups, rig calibration), ``synth`` (scenes,
frames, priors, correspondences), ``mcba`` (rig bundle adjustment),
``jdsa`` (depth-scale alignment), ``gsmap`` (Gaussian map),
``rasterizer`` (differentiable splatting and map optimization),
``pipeline`` (online and offline stages), ``evalkit`` (metrics) and
``cli``.
"""

__version__ = "0.1.0"
