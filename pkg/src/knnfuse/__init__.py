"""knnfuse: fuse a k-NN classifier over frozen feature vectors with a softmax head.

The toolkit covers the full pipeline: feature-bank I/O and preprocessing,
exact k-NN retrieval with temperature-scaled posteriors, training a linear
(or small MLP) classifier whose per-sample loss is reweighted by leave-one-out
k-NN confidence, test-time interpolation of both posteriors, hyperparameter
grid search, and evaluation/report generation.

Submodules are imported lazily so that the CLI can configure BLAS threading
before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "errors",
    "featurestore",
    "knn",
    "parametric",
    "fusion",
    "tuning",
    "evalreport",
    "figures",
    "manifest",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
