"""Dynamic 3D Gaussian 4D rendering, fitting and evaluation."""
