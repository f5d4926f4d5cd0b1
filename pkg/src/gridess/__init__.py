"""Transient-stability simulation with energy-storage models at three fidelity levels.

Subpackages split along functional lines: DAE numerics, network and machine
models, the converter (VSC) front end shared by all storage devices, the four
detailed device models, the generalized reduced form derived from them, the
simplified injection model, and the scenario runner that ties a 9-bus test
grid to any of the variants.
"""

__version__ = "0.1.0"
