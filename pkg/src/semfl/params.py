"""Flat parameter vectors with a layer-shape manifest."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ParamVector:
    """All model parameters flattened in manifest order.

    ``manifest`` is a tuple of ``(name, shape)`` pairs; ``values`` is one
    contiguous float64 array whose length equals the manifest total.
    """

    values: np.ndarray
    manifest: tuple
    round: int = 0
    _offsets: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.manifest = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.manifest)
        total = manifest_size(self.manifest)
        if self.values.shape != (total,):
            raise ContractError(f"parameter length {self.values.size} != manifest total {total}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("parameter vector has non-finite entries")

    def __len__(self):
        return self.values.size

    @property
    def offsets(self):
        if self._offsets is None:
            off, start = {}, 0
            for name, shape in self.manifest:
                n = math.prod(shape)
                off[name] = (start, start + n, shape)
                start += n
            self._offsets = off
        return self._offsets

    def view(self, name):
        start, stop, shape = self.offsets[name]
        return self.values[start:stop].reshape(shape)

    def views(self):
        return {name: self.view(name) for name, _ in self.manifest}

    def copy(self, round=None):
        return ParamVector(self.values.copy(), self.manifest, self.round if round is None else round)

    def with_values(self, values, round=None):
        return ParamVector(values, self.manifest, self.round if round is None else round)

    def flatten_grads(self, grads):
        """Concatenate a name->array gradient map in manifest order.

        Per-sample maps (leading batch axis) give a [B, P] matrix.
        """
        first = grads[self.manifest[0][0]]
        per_sample = first.ndim == len(self.manifest[0][1]) + 1
        if per_sample:
            b = first.shape[0]
            return np.concatenate([grads[n].reshape(b, -1) for n, _ in self.manifest], axis=1)
        return np.concatenate([grads[n].reshape(-1) for n, _ in self.manifest])


def manifest_size(manifest):
    return sum(math.prod(shape) for _, shape in manifest)


def check_same_manifest(vectors):
    ref = vectors[0].manifest
    for v in vectors[1:]:
        if v.manifest != ref:
            raise ContractError("parameter manifests differ")
