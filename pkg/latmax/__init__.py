"""Peak height distributions of discrete local maxima in lattice random fields."""

__version__ = "1.0.0"
