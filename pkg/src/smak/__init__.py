"""smak: spatial-momentum adversarial attack kit.

Submodules:
  tensor      - float64 tensors + tape-based reverse-mode differentiation
  models      - small CNN classifiers: specs, init, training, checkpoints
  transforms  - padding/resize/kernel transforms used by the attacks
  attacks     - the momentum FGSM attack family
  harness     - eval-set selection, transfer matrices, cosine traces, sweeps
  data        - IDX dataset IO and the synthetic digit-glyph dataset
  config      - run-config file parsing
  cli         - command-line entry point
  plotting    - figure rendering for CLI reports

Kept import-light on purpose: `import smak` must not pull in numpy, so the
CLI can pin BLAS thread counts before numeric code loads.
"""

__version__ = "0.1.0"
