"""streamvi: online variational inference for state-space models.

The package provides, bottom up:

- ``gaussian``: natural-parameter Gaussian algebra (the currency of the
  variational family);
- ``models``: generative state-space models with transition/emission
  log-densities and their parameter gradients;
- ``variational``: the amortized backward-factorized variational family;
- ``tape`` / ``gradients``: reverse-mode differentiation of the scalar
  quantities the estimators need, plus a finite-difference verifier;
- ``engine``: particle clouds, self-normalized importance weights, and
  the per-step ELBO/gradient estimators;
- ``oracle``: Kalman filter/smoother references for the linear-Gaussian
  case;
- ``optimizer``: gradient-difference stochastic-approximation updates;
- ``harness``: the streaming learn/evaluate experiment driver;
- ``cli``: subcommands wrapping the harness.
"""

__version__ = "0.1.0"
