"""Latent data assimilation on spherical fields.

Library layout:

- ``sphere``      -- real spherical harmonics, Legendre recurrences, quadrature
- ``autodiff``    -- reverse-mode tape, parameter vectors, Adam/SGD steps
- ``sinr``        -- harmonic-filter neural field decoder/encoder
- ``dynamics``    -- latent surrogate models (neural ODE, gated residual)
- ``training``    -- losses and the two-stage training procedure
- ``uncertainty`` -- model-error MLE and latent background covariance
- ``filters``     -- ensemble Kalman filter family and the cycle loop
- ``ltsr``        -- binary tensor container used for checkpoints/datasets
- ``datasets``    -- grids, synthetic data, jet initial conditions
- ``metrics``     -- latitude-weighted RMSE and prediction curves
- ``experiment``  -- configuration sweeps and result tables
- ``plots``       -- figure rendering for the CLI report paths
"""

__version__ = "0.1.0"
