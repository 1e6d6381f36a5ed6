"""RIS-assisted user localization with closed-loop 1-bit uplink power control.

Library layout:

    channel    geometry, Ricean fading, the per-frame observation model
    nn         dense/LSTM kernel, flat parameter vectors, BPTT, Adam
    agents     sensing policy, power control and estimator networks
    rollout    the T-frame episode loop, controllers, datasets, evaluation
    cosyne     cooperative synapse neuroevolution under a power budget
    pipeline   three-stage training and sweeps
    baselines  fingerprinting, supervised FF, uniform-power reference
    config     presets, YAML parsing, validation, seed derivation
    cli        the `risloc` experiment front-end
"""

__version__ = "0.1.0"
