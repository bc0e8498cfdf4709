"""Free energy difference estimation via learned stochastic transport.

Subpackage map:

* ``numcore``     dense math, reverse-mode engine, Adam, checkpoints
* ``systems``     closed-form energies with analytic gradients
* ``sampling``    Langevin endpoint sampling and sample files
* ``interpolant`` bridge schedules, losses, pairing, training
* ``transport``   discretized controlled dynamics and path works
* ``estimators``  one- and two-sided estimators, bounds, reweighting
* ``cli``         config-driven pipeline stages
"""

__version__ = "0.1.0"
