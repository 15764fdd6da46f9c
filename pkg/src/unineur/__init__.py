"""EEG- and text-conditioned rectified-flow DiT on a small numpy autodiff core."""
__version__ = "0.1.0"
