"""navfuse: factor-graph multi-sensor fusion with online reference-frame alignment.

Submodules:
    geometry     SO(3)/SE(3) primitives, Jacobians, retraction
    measurements typed measurement records, JSONL log I/O, replay
    imu          bias model, preintegration, propagation
    factors      noise models, robust kernels, all factor types
    graph        state bookkeeping, holistic factor creation, keyframe handling
    solver       Levenberg-Marquardt on manifolds, marginals, marginalization
    estimator    online fixed-lag smoother and offline batch refinement
    sim          deterministic scenario generator
    evaluation   trajectory metrics (ATE/ARE, RTE/RRE, smoothness), alignment
    cli          command-line interface
"""

__version__ = "0.1.0"
