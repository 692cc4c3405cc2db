"""Source-free domain adaptation of a micro BEV detector via iterative
pseudo-labels and an uncertainty-aware mean teacher, on synthetic scenes."""

__version__ = "0.1.0"
