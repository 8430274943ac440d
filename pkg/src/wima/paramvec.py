"""Flat parameter vectors with a named-segment layout.

Every aggregator in the package works on :class:`ParamVector` values: a
dense float64 array plus a :class:`ParamLayout` that names contiguous
segments and tags each one as ``"classifier"`` or ``"feature_extractor"``.

Reductions over several vectors are always performed left to right in the
order given, so results are reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, DimensionError, UsageError

CLASSIFIER = "classifier"
FEATURE_EXTRACTOR = "feature_extractor"
ROLES = (CLASSIFIER, FEATURE_EXTRACTOR)


@dataclass(frozen=True)
class Segment:
    name: str
    length: int
    role: str = FEATURE_EXTRACTOR


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple[Segment, ...]
    total_len: int = field(init=False)
    _offsets: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        segments = tuple(self.segments)
        if not segments:
            raise UsageError("layout needs at least one segment")
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise UsageError(f"duplicate segment names in {names}")
        offsets = {}
        start = 0
        for seg in segments:
            if seg.length < 1:
                raise UsageError(f"segment {seg.name!r} has non-positive length")
            if seg.role not in ROLES:
                raise UsageError(f"segment {seg.name!r} has unknown role {seg.role!r}")
            offsets[seg.name] = (start, start + seg.length)
            start += seg.length
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "total_len", start)
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def of(cls, *segments: tuple[str, int, str]) -> "ParamLayout":
        return cls(tuple(Segment(*s) for s in segments))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)

    def slice(self, name: str) -> slice:
        try:
            start, stop = self._offsets[name]
        except KeyError:
            raise UsageError(f"unknown segment {name!r}; layout has {list(self.names)}") from None
        return slice(start, stop)

    def names_with_role(self, role: str) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments if s.role == role)

    def to_dict(self) -> dict:
        return {"segments": [[s.name, s.length, s.role] for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamLayout":
        return cls(tuple(Segment(str(n), int(l), str(r)) for n, l, r in d["segments"]))


@dataclass(frozen=True)
class SegmentMask:
    """A set of segment names selecting part of a layout."""

    included: frozenset[str]

    def __init__(self, included: Iterable[str] = ()):
        object.__setattr__(self, "included", frozenset(included))

    @classmethod
    def all(cls, layout: ParamLayout) -> "SegmentMask":
        return cls(layout.names)

    @classmethod
    def none(cls) -> "SegmentMask":
        return cls(())

    @classmethod
    def by_role(cls, layout: ParamLayout, role: str) -> "SegmentMask":
        return cls(layout.names_with_role(role))

    def validate(self, layout: ParamLayout) -> None:
        unknown = sorted(self.included - set(layout.names))
        if unknown:
            raise UsageError(f"mask names unknown segments {unknown}; layout has {list(layout.names)}")


class ParamVector:
    """Immutable float64 vector tied to a layout.

    The underlying array is marked read-only; operations return new vectors.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: ParamLayout, *, copy: bool = True):
        arr = np.array(values, dtype=np.float64, copy=copy)
        if arr.ndim != 1 or arr.shape[0] != layout.total_len:
            raise DimensionError(
                f"vector of shape {arr.shape} does not match layout of length {layout.total_len}"
            )
        arr.setflags(write=False)
        self.values = arr
        self.layout = layout

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(np.zeros(layout.total_len), layout, copy=False)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector({self.values!r}, segments={list(self.layout.names)})"

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice(name)]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def bit_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and np.array_equal(
            self.values.view(np.uint64), other.values.view(np.uint64)
        )

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_same_layout(self, other)
        return ParamVector(self.values - other.values, self.layout, copy=False)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_same_layout(self, other)
        return ParamVector(self.values + other.values, self.layout, copy=False)

    def scale(self, a: float) -> "ParamVector":
        return ParamVector(a * self.values, self.layout, copy=False)


def _check_same_layout(x: ParamVector, y: ParamVector) -> None:
    if x.layout is not y.layout and x.layout != y.layout:
        raise DimensionError(
            f"layout mismatch: {list(x.layout.names)}/{x.layout.total_len} vs "
            f"{list(y.layout.names)}/{y.layout.total_len}"
        )


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y``."""
    _check_same_layout(x, y)
    return ParamVector(a * x.values + y.values, x.layout, copy=False)


def weighted_mean(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Weighted average ``sum_i (w_i / sum(w)) * v_i``.

    Weights are normalised first, then accumulated sequentially in list order.
    """
    if len(vectors) == 0:
        raise UsageError("weighted_mean of an empty list")
    if len(vectors) != len(weights):
        raise UsageError(f"{len(vectors)} vectors but {len(weights)} weights")
    total = 0.0
    for w in weights:
        if not w >= 0:
            raise UsageError(f"negative or NaN weight {w}")
        total += float(w)
    if total <= 0.0:
        raise UsageError("weights sum to zero")
    layout = vectors[0].layout
    acc = np.zeros(layout.total_len)
    for v, w in zip(vectors, weights):
        _check_same_layout(vectors[0], v)
        acc += (float(w) / total) * v.values
    return ParamVector(acc, layout, copy=False)


def masked_blend(base: ParamVector, overlay: ParamVector, mask: SegmentMask) -> ParamVector:
    """Take ``overlay`` on the masked segments and ``base`` everywhere else."""
    _check_same_layout(base, overlay)
    mask.validate(base.layout)
    out = base.values.copy()
    for name in mask.included:
        sl = base.layout.slice(name)
        out[sl] = overlay.values[sl]
    return ParamVector(out, base.layout, copy=False)


def save_params(path: str | Path, vec: ParamVector) -> None:
    """Write ``vec`` to an ``.npz`` file; :func:`load_params` restores it exactly."""
    layout_json = json.dumps(vec.layout.to_dict())
    with open(path, "wb") as fh:
        np.savez(fh, values=vec.values, layout=np.array(layout_json))


def load_params(path: str | Path) -> ParamVector:
    try:
        with np.load(path, allow_pickle=False) as data:
            layout = ParamLayout.from_dict(json.loads(str(data["layout"])))
            return ParamVector(data["values"], layout)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a parameter checkpoint ({exc})") from exc
