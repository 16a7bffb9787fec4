"""Multi-output temporal fusion transformer for parametric dynamical systems.

Pure numpy: a small reverse-mode autodiff engine, the network layers,
block-masked interpretable attention, data handling, benchmark generators,
training, evaluation and a command-line front end.
"""

__version__ = "0.1.0"
