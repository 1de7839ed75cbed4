"""Pose-accuracy metrics and reporting.

add: mean distance between model points under predicted vs true pose.
add_s: closest-point variant for symmetric objects, exhaustive O(m^2).
auc: exact area under the accuracy-vs-threshold step curve, x100.
report: per-object table routing symmetric objects to the closest-point
metric, with an unweighted mean row.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .pose import RigidTransform

DEFAULT_AUC_MAX = 0.1  # meters; the customary reporting cap
DEFAULT_THRESHOLD = 0.02  # meters; the "<2cm" accuracy convention


class AxisSymmetry:
    """Continuous rotational symmetry about an axis through a center point."""

    __slots__ = ("axis", "center")

    def __init__(self, axis, center=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("AxisSymmetry: zero axis")
        self.axis = axis / n
        self.center = np.asarray(center, dtype=np.float64)


class DiscreteSymmetry:
    """A finite set of non-identity rigid transforms mapping the model onto itself."""

    __slots__ = ("transforms",)

    def __init__(self, transforms):
        self.transforms = list(transforms)
        if not self.transforms:
            raise ValueError("DiscreteSymmetry: empty transform list")


class ObjectModel:
    """Surface point samples in meters plus a symmetry descriptor.

    ``resolution`` is the sampling-resolution bound in meters (the largest
    distance a symmetry-preserving motion can move any sample away from the
    set); generators fill it in. Discrete symmetries are verified against
    the point set at construction.
    """

    def __init__(self, points, symmetry=None, resolution=0.0, colors=None,
                 object_id=None, symmetry_tol=1e-9):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 3:
            raise ValueError("ObjectModel needs an (m, 3) array with m >= 3")
        if not np.all(np.isfinite(points)):
            raise ValueError("ObjectModel: non-finite points")
        self.points = points
        self.symmetry = symmetry
        self.resolution = float(resolution)
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64)
        self.object_id = object_id
        if isinstance(symmetry, DiscreteSymmetry):
            tol = max(symmetry_tol, 2.0 * self.resolution)
            for t in symmetry.transforms:
                d = directed_hausdorff(t.apply(points), points)
                if d > tol:
                    raise ValueError(
                        f"declared symmetry moves the point set by {d:.2e} m (> {tol:.2e})"
                    )

    @property
    def m(self):
        return self.points.shape[0]

    @property
    def is_symmetric(self):
        return self.symmetry is not None


def directed_hausdorff(a, b):
    """max over a of the distance to the nearest point of b."""
    d2 = pairwise_sq_dists(a, b)
    return float(np.sqrt(np.maximum(d2.min(axis=1), 0.0)).max())


def pairwise_sq_dists(a, b):
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return aa + bb - 2.0 * (a @ b.T)


# ---------------------------------------------------------------------------
# distances


def add(model, pred, gt):
    """Mean distance between correspondingly transformed model points."""
    pa = pred.apply(model.points)
    pb = gt.apply(model.points)
    return float(np.linalg.norm(pa - pb, axis=1).mean())


def add_s(model, pred, gt):
    """Mean closest-point distance between the two transformed point sets.

    Exhaustive O(m^2) search; m stays small here, so no spatial index.
    """
    pa = pred.apply(model.points)
    pb = gt.apply(model.points)
    d2 = pairwise_sq_dists(pa, pb)
    return float(np.sqrt(np.maximum(d2.min(axis=1), 0.0)).mean())


def accuracy_below(distances, threshold):
    """Fraction of distances strictly below the threshold."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("accuracy_below: empty distance list")
    if threshold <= 0:
        raise ValueError("accuracy_below: threshold must be positive")
    return float((d < threshold).mean())


def auc(distances, max_threshold=DEFAULT_AUC_MAX):
    """Area under the accuracy-vs-threshold curve on [0, max], scaled to [0, 100].

    The empirical accuracy curve is a step function; its exact area is
    max - mean(clipped distances), so the closed form is
    100 * mean(1 - min(d, max)/max). No sampling involved.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("auc: empty distance list")
    if max_threshold <= 0:
        raise ValueError("auc: max_threshold must be positive")
    clipped = np.minimum(d, max_threshold)
    return float(100.0 * (1.0 - clipped / max_threshold).mean())


# ---------------------------------------------------------------------------
# evaluation records and the report table


@dataclass
class EvalRecord:
    """One scored evaluation: object, metric kind, distance in meters."""

    object_id: str
    kind: str  # "ADD" or "ADD-S"
    distance: float
    pred: RigidTransform | None = None
    gt: RigidTransform | None = None

    def __post_init__(self):
        if self.kind not in ("ADD", "ADD-S"):
            raise ValueError(f"EvalRecord kind must be ADD or ADD-S, got {self.kind!r}")
        if self.distance < 0:
            raise ValueError("EvalRecord distance must be >= 0")


def write_distance_dump(path, records):
    """One text line per record: object id, metric kind, exact float distance."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.object_id} {r.kind} {r.distance!r}\n")


def read_distance_dump(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            obj, kind, dist = line.split()
            records.append(EvalRecord(obj, kind, float(dist)))
    return records


@dataclass
class ReportTable:
    """Per-object AUC and below-threshold accuracy, plus the mean row."""

    rows: list = field(default_factory=list)  # (object_id, kind, count, auc, pct)
    threshold: float = DEFAULT_THRESHOLD
    auc_max: float = DEFAULT_AUC_MAX

    @property
    def mean_auc(self):
        return float(np.mean([r[3] for r in self.rows]))

    @property
    def mean_pct(self):
        return float(np.mean([r[4] for r in self.rows]))

    def to_text(self):
        cm = self.threshold * 100.0
        head = f"{'object':<14} {'metric':<6} {'n':>5} {'AUC':>8} {f'<{cm:g}cm%':>8}"
        lines = [head, "-" * len(head)]
        for obj, kind, n, a, p in self.rows:
            lines.append(f"{obj:<14} {kind:<6} {n:>5d} {a:>8.2f} {p:>8.2f}")
        lines.append(f"{'MEAN':<14} {'':<6} {'':>5} {self.mean_auc:>8.2f} {self.mean_pct:>8.2f}")
        return "\n".join(lines)

    def to_csv(self):
        out = io.StringIO()
        out.write("object,metric,count,auc,below_threshold_pct\n")
        for obj, kind, n, a, p in self.rows:
            out.write(f"{obj},{kind},{n},{a!r},{p!r}\n")
        out.write(f"MEAN,,,{self.mean_auc!r},{self.mean_pct!r}\n")
        return out.getvalue()


def report(records, symmetric_ids=(), threshold=DEFAULT_THRESHOLD, auc_max=DEFAULT_AUC_MAX):
    """Score every object: symmetric ones by ADD-S, the rest by ADD.

    Objects are ordered by id; the mean row is the unweighted mean over
    objects. Raises on symmetric ids that never appear in the records.
    """
    if not records:
        raise ValueError("report: no records")
    by_obj = {}
    for r in records:
        by_obj.setdefault(r.object_id, []).append(r)
    unknown = set(symmetric_ids) - set(by_obj)
    if unknown:
        raise ValueError(f"report: unknown object ids {sorted(unknown)}")
    table = ReportTable(threshold=threshold, auc_max=auc_max)
    for obj in sorted(by_obj):
        kind = "ADD-S" if obj in symmetric_ids else "ADD"
        dists = [r.distance for r in by_obj[obj] if r.kind == kind]
        if not dists:
            raise ValueError(f"report: no {kind} records for object {obj!r}")
        table.rows.append((
            obj, kind, len(dists),
            auc(dists, auc_max),
            100.0 * accuracy_below(dists, threshold),
        ))
    return table
