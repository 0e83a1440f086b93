"""Terrain-aware adaptive control toolkit.

Offline: meta-learn a state- and terrain-dependent control-influence basis
from logged driving data. Online: composite adaptive tracking control for
tracked (skid-steer) and car-like (Ackermann) ground vehicles. A closed-loop
terrain simulator with fault injection ties the two together.
"""

__version__ = "0.1.0"
