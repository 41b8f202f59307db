"""Per-expression saliency: score function, input gradients, rendering.

The score of an expression sums, over attribute maps, the trained SVM
decision value of that map's deep feature. Its gradient with respect to
each map is pulled back through the network, the channel replication
(summed) and the bilinear resize (exact adjoint) onto the original map
grid; the six map gradients are summed first and the absolute value is
taken once. The result, rescaled to [0, 1] by its maximum, is the
saliency map. Rendering blends the texture map toward a dark blue
background with saliency as the per-pixel weight.
"""

from __future__ import annotations

import numpy as np

from . import cnn
from .attrmaps import MAP_KINDS, AttributeMapSet, single_channel
from .errors import DimMismatch
from .imageops import resize_bilinear_adjoint

BACKGROUND_RGB = (0.0, 0.0, 0.35)


def _check_models(models, net):
    dim = net.tap_dim()
    for kind, model in models.items():
        if model.w.size != dim:
            raise DimMismatch(
                f"model for map {kind!r} has dim {model.w.size}, tap dim {dim}"
            )


def expression_score(maps: AttributeMapSet, models: dict, net: cnn.NetModel,
                     map_kinds=None) -> float:
    """Fused decision value for one expression on one scan.

    ``models`` maps attribute-map kind to that kind's LinearModel for the
    expression. Equals summing single-sample score matrices across maps.
    """
    kinds = tuple(map_kinds) if map_kinds is not None else tuple(models)
    _check_models({k: models[k] for k in kinds}, net)
    total = 0.0
    for kind in kinds:
        feat = cnn.extract_feature(net, single_channel(maps, kind)).ravel()
        total += float(models[kind].w @ feat) + models[kind].bias
    return total


def saliency_map(maps: AttributeMapSet, models: dict, net: cnn.NetModel,
                 map_kinds=None) -> np.ndarray:
    """Saliency of one scan for one expression, in [0, 1] on the map grid."""
    kinds = tuple(map_kinds) if map_kinds is not None else tuple(models)
    _check_models({k: models[k] for k in kinds}, net)
    m, n = maps.mask.shape
    total = np.zeros((m, n))
    for kind in kinds:
        amap = single_channel(maps, kind)
        image = cnn.prepare_input(net, amap)
        g = cnn.input_gradient(net, image, models[kind].w)
        g = g.sum(axis=2)                      # undo channel replication
        total += resize_bilinear_adjoint(g, m, n)
    total *= maps.mask
    sal = np.abs(total)
    peak = sal.max()
    if peak > 0.0:
        sal = sal / peak
    return sal


def render(saliency, texture, background=BACKGROUND_RGB) -> np.ndarray:
    """Blend texture toward the background weighted by saliency."""
    s = np.asarray(saliency, dtype=np.float64)
    tex = np.asarray(texture, dtype=np.float64)
    if tex.shape[:2] != s.shape:
        raise DimMismatch(f"texture {tex.shape} vs saliency {s.shape}")
    bg = np.asarray(background, dtype=np.float64)
    return s[:, :, None] * tex + (1.0 - s[:, :, None]) * bg


__all__ = ["BACKGROUND_RGB", "expression_score", "saliency_map", "render",
           "MAP_KINDS"]
