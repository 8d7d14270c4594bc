"""Numerical laboratory for deep residual attention networks, their exact
adjoint gradient flow, and the matching mean-field particle dynamics.

Submodules
----------
linalg     dense kernels, the three norms, column-stacking vectorization
encoders   attention / MLP encoders, derivatives, growth-bound probes
model      discrete depth-L width-M network: forward, adjoint, gradients
meanfield  sliced particle distributions, continuous ODE, particle flow
flow       gradient-flow training of the discrete ensemble
transport  exact empirical optimal-transport distances
data       synthetic in-context-learning sequence datasets
harness    CLI and experiment programs
"""

__version__ = "0.1.0"
