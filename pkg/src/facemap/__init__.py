"""facemap: textured 3D face scans to attribute maps, deep features,
fused linear-SVM expression scores and gradient saliency maps.

The numerical core is organized as small numpy modules:

- ``tensor``: float64 tensors, least squares, 2x2 eigenvalues, FTNSR1 files
- ``scan``: scan parsing, pose normalization, raster projection
- ``attrmaps``: normal maps and the shape-index map
- ``cnn``: minimal convolutional engine with input gradients
- ``svm``: linear SVM via dual coordinate descent, one-vs-rest
- ``evaluation``: subject-disjoint protocols, sum-rule fusion, reports
- ``saliency``: expression scores and input-gradient saliency
- ``synth``: analytic test surfaces and the six-class benchmark
- ``cli``: the ``facemap`` command
"""

__version__ = "0.1.0"

from .errors import FacemapError  # noqa: F401
