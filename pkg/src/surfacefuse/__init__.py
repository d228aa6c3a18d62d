"""Desk-scale sequence-to-sequence toolkit with encoder layer fusion.

A minimal encoder-decoder transformer on a hand-rolled autograd core, plus
fine-grained layer attention, surface fusion of the encoder embedding layer
into the output distribution, and the diagnostics that go with them
(attention heatmaps, layer-masking sweeps, singular-value spectra, aligned
embedding cosines).

Submodules import lazily so the CLI can cap BLAS worker threads (via
SURFACEFUSE_THREADS) before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Rng": ".tensor",
    "Tensor": ".tensor",
    "grad_check": ".tensor",
    "no_grad": ".tensor",
    "ModelConfig": ".model",
    "Seq2Seq": ".model",
    "LayerOutputs": ".model",
    "FusionConfig": ".surface",
    "TrainConfig": ".training",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(_EXPORTS[name], __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
