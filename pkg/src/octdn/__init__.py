"""Speckle denoising toolkit for OCT-style grayscale images.

Train a residual CNN to predict the speckle component of a noisy B-scan and
subtract it.  Ground truth comes from registering and averaging repeated
scans; synthetic speckled phantoms let everything run without scanner data.
Classical baselines (median, non-local means) and PSNR/SSIM metrics are
included for comparison.

Submodules are imported lazily so that the command-line front end can pin
thread counts before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "nn", "model", "train", "dataprep", "eval", "cli", "errors",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib
        mod = importlib.import_module(f".{name}", __name__)
        globals()[name] = mod
        return mod
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
