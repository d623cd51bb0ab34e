"""Hybrid recurrent state-space world model with cuboid masking, latent
reconstruction and a bisimulation-style similarity objective, plus
executable checks of the supporting theory on tabular MDPs."""

__version__ = "0.1.0"
