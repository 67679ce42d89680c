"""Containers passed between the encoder, the losses and the evaluator."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureBatch:
    """Encoded features of one batch, one sample per column.

    ``comp`` indexes the training composition list (seen pairs). The
    ``cache`` dict is private to the encoder's backward pass.
    """

    fc: np.ndarray
    fa: np.ndarray
    fo: np.ndarray
    attr: np.ndarray
    obj: np.ndarray
    comp: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self):
        return self.fc.shape[1]


@dataclass
class ClassEmbeddings:
    """Unit-norm class embeddings for the three branches, one per column."""

    attr: np.ndarray
    obj: np.ndarray
    comp: np.ndarray
    pairs: list = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)
