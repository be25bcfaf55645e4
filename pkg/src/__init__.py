"""
crn-hierarchy

Mass-action reaction networks with detailed balance, simulated across the
hierarchy of reaction-rate equations, chemical master equations, Liouville
transport, Fokker–Planck approximations and hybrid couplings.
"""

__version__ = "0.1.0"
