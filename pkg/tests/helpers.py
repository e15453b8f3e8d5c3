"""Hand-built models and grids with exactly known behavior."""

from __future__ import annotations

import numpy as np

from csslab.datagen import FeatureGrid
from csslab.model import Backbone, ClassifierBlock, Dims, SegModel


def grid_of(features, labels) -> FeatureGrid:
    return FeatureGrid(
        features=np.asarray(features, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.uint16),
    )


def identity_model(strategy: str = "dft") -> SegModel:
    """Backbone whose embedding equals the 2-dim input exactly, any input.

    ReLU splits each coordinate into positive and negative parts and the
    second layer recombines them, so embed((a, b)) == (a, b) with no rounding.
    """
    backbone = Backbone(
        W1=np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]),
        b1=np.zeros(4),
        W2=np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]]),
        b2=np.zeros(2),
    )
    return SegModel(
        dims=Dims(feat_dim=2, hidden=4, embed=2), strategy=strategy, backbone=backbone
    )


def add_block(model: SegModel, step: int, class_ids, W, b=None) -> SegModel:
    """Append a classifier block with given rows and mark the step reached."""
    ids = tuple(class_ids)
    model.blocks.append(
        ClassifierBlock(
            step=step,
            class_ids=ids,
            W=np.asarray(W, dtype=np.float64),
            b=np.zeros(len(ids)) if b is None else np.asarray(b, dtype=np.float64),
        )
    )
    model.current_step = max(model.current_step, step)
    return model
