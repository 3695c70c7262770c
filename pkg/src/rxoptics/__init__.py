"""Ray tracing and design optimisation for prescription-embedded AR eyewear."""

__version__ = "0.1.0"
