"""EEG ERP representation learning: beta-VAE, SCAN grounding, LPP baseline and UDR model selection."""

__version__ = "0.1.0"
