"""Accuracy-robustness uncertainty lab: attacks, conjugates, neural packets, spectra."""
