"""Synthetic models, scenes, and the pointwise feature encoders.

Models are surface point samples of three desk-scale shapes with exact
ground truth: a box (discrete 180-degree symmetries, sampled so the group
maps the set onto itself exactly), a cylinder (ring sampling with a known
angular resolution bound, continuous axis symmetry), and an asymmetric
L-prism. Color attributes are the model-frame coordinates normalized to
[0, 1] per axis: a deterministic texture proxy that travels with the point.

Scenes pose a model uniformly, cut a contiguous angular occlusion sector,
subsample the visible points, and optionally add isotropic noise. Every
output is a pure function of (config, seed).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .fusion import FeaturePair
from .metrics import AxisSymmetry, DiscreteSymmetry, ObjectModel
from .ops import MLP
from .pose import RigidTransform, random_rotation_quat

SCENE_MAGIC = b"CFPT"
SCENE_VERSION = 1
GEOM_SCALE = 10.0  # centered points are fed to the encoder in decimeters

DEFAULT_SHAPES = {
    "box": "box:0.09,0.06,0.12",
    "cylinder": "cylinder:0.04,0.12",
    "lshape": "lshape:0.12,0.08,0.04",
}


# ---------------------------------------------------------------------------
# model generators


def _color_attributes(points):
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span[span == 0] = 1.0
    return (points - lo) / span


def make_box(width, height, depth, m, seed, object_id="box"):
    """Box surface sample, exactly invariant under its 180-degree rotations.

    A base sample of m/4 points is replicated under {Rx180, Ry180, Rz180},
    so the symmetry check is exact; m must be divisible by 4.
    """
    if min(width, height, depth) <= 0:
        raise ValueError("box dimensions must be positive")
    if m < 4 or m % 4 != 0:
        raise ValueError(f"box sampling needs m divisible by 4, got {m}")
    rng = np.random.default_rng(seed)
    half = np.array([width, height, depth]) / 2.0
    # face areas: +-x, +-y, +-z
    areas = np.array([height * depth, width * depth, width * height])
    probs = areas / areas.sum()
    base = np.empty((m // 4, 3))
    for i in range(m // 4):
        axis = rng.choice(3, p=probs)
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = rng.uniform(-half, half)
        p[axis] = side * half[axis]
        base[i] = p
    flips = [np.array([1.0, -1.0, -1.0]), np.array([-1.0, 1.0, -1.0]), np.array([-1.0, -1.0, 1.0])]
    points = np.concatenate([base] + [base * f for f in flips], axis=0)
    sym = DiscreteSymmetry([
        RigidTransform.from_axis_angle((1, 0, 0), np.pi),
        RigidTransform.from_axis_angle((0, 1, 0), np.pi),
        RigidTransform.from_axis_angle((0, 0, 1), np.pi),
    ])
    resolution = float(np.sqrt(2.0 * areas.sum() * 2.0 / m))
    return ObjectModel(points, sym, resolution=resolution,
                       colors=_color_attributes(points), object_id=object_id)


def _ring(radius, z, count, phase):
    ang = phase + 2.0 * np.pi * np.arange(count) / count
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(count, z)], axis=1)


def make_cylinder(radius, height, m, seed, object_id="cylinder"):
    """Cylinder sampled as regular rings so any axis rotation stays near the set.

    The stored resolution is the largest chord between a rotated sample and
    its nearest same-ring neighbor: max over rings of 2 r sin(pi / (2 k)).
    """
    if radius <= 0 or height <= 0:
        raise ValueError("cylinder dimensions must be positive")
    if m < 12:
        raise ValueError("cylinder sampling needs m >= 12")
    rng = np.random.default_rng(seed)
    side_budget = int(round(m * height / (height + radius)))
    n_side = max(2, int(round(side_budget / 50)))
    k_side = side_budget // n_side
    side_counts = [k_side] * n_side
    side_counts[0] += side_budget - k_side * n_side
    cap_budget = m - side_budget
    per_cap = cap_budget // 2
    leftovers = cap_budget - 2 * per_cap
    rings = []
    for i, count in enumerate(side_counts):
        z = -height / 2 + height * (i + 0.5) / n_side
        rings.append((radius, z, count))
    # one ring per cap; too few points would wreck the chord bound, so tiny
    # budgets go to the axis instead, where rotation cannot move them
    for z_sign in (1.0, -1.0):
        if per_cap >= 6:
            rings.append((0.7 * radius, z_sign * height / 2, per_cap))
        else:
            leftovers += per_cap
    pts = [
        _ring(rho, z, count, rng.uniform(0, 2 * np.pi))
        for rho, z, count in rings
    ]
    # park any leftover budget on the axis, where rotation cannot move it
    for i in range(leftovers):
        z = height / 2 if i % 2 == 0 else -height / 2
        pts.append(np.array([[0.0, 0.0, z]]))
    points = np.concatenate(pts, axis=0)
    if points.shape[0] != m:
        raise AssertionError(f"cylinder layout produced {points.shape[0]} points, wanted {m}")
    resolution = max(
        2.0 * rho * np.sin(np.pi / (2.0 * count)) for rho, _, count in rings if count > 0
    )
    sym = AxisSymmetry((0.0, 0.0, 1.0))
    return ObjectModel(points, sym, resolution=float(resolution),
                       colors=_color_attributes(points), object_id=object_id)


def make_lshape(arm, leg, thickness, m, seed, object_id="lshape"):
    """L-prism (two fused boxes) with no symmetry, centered at its centroid."""
    if min(arm, leg, thickness) <= 0:
        raise ValueError("lshape dimensions must be positive")
    if arm <= thickness or leg <= thickness:
        raise ValueError("lshape arms must be longer than the thickness")
    if m < 3:
        raise ValueError("lshape needs m >= 3")
    rng = np.random.default_rng(seed)
    t = thickness
    # vertical arm occupies [0,t]x[0,t]x[0,arm]; the foot [0,leg]x[0,t]x[0,t]
    boxes = [
        (np.array([0.0, 0.0, 0.0]), np.array([t, t, arm])),
        (np.array([t, 0.0, 0.0]), np.array([leg - t, t, t])),
    ]
    areas = np.array([2 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]) for _, s in boxes])
    probs = areas / areas.sum()
    points = np.empty((m, 3))
    for i in range(m):
        lo, size = boxes[rng.choice(2, p=probs)]
        face_areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
        axis = rng.choice(3, p=face_areas / face_areas.sum())
        p = lo + rng.uniform(0, 1, 3) * size
        p[axis] = lo[axis] + (size[axis] if rng.random() < 0.5 else 0.0)
        points[i] = p
    points -= points.mean(axis=0)
    resolution = float(np.sqrt(2.0 * areas.sum() / m))
    return ObjectModel(points, None, resolution=resolution,
                       colors=_color_attributes(points), object_id=object_id)


def make_model(spec, m, seed, object_id=None):
    """Build a model from a text spec: box:w,h,d | cylinder:r,h | lshape:a,b,t."""
    if ":" not in spec:
        raise ValueError(f"model spec needs 'shape:dims', got {spec!r}")
    shape, dims = spec.split(":", 1)
    try:
        vals = [float(v) for v in dims.split(",")]
    except ValueError as e:
        raise ValueError(f"bad model dims in {spec!r}") from e
    oid = object_id or shape
    if shape == "box" and len(vals) == 3:
        return make_box(*vals, m, seed, object_id=oid)
    if shape == "cylinder" and len(vals) == 2:
        return make_cylinder(*vals, m, seed, object_id=oid)
    if shape == "lshape" and len(vals) == 3:
        return make_lshape(*vals, m, seed, object_id=oid)
    raise ValueError(f"unknown model spec {spec!r}")


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    """A posed, occluded, noisy view of one model with exact ground truth."""

    object_id: str
    gt: RigidTransform
    points: np.ndarray   # (N, 3) observed, meters
    colors: np.ndarray   # (N, 3) in [0, 1], per surviving model point
    model_indices: np.ndarray | None = None
    seed: int | None = None

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def centroid(self):
        return self.points.mean(axis=0)


def _occlude(points, fraction, rng):
    """Indices surviving removal of a contiguous angular sector.

    The sector is taken about a random axis: points are ranked by azimuth
    around it and the first floor(m * fraction) in angular order are cut,
    so the removed count is exact.
    """
    m = points.shape[0]
    drop = int(np.floor(m * fraction))
    if drop <= 0:
        return np.arange(m)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    az = np.arctan2(points @ e2, points @ e1)
    start = rng.uniform(0.0, 2.0 * np.pi)
    shifted = np.mod(az - start, 2.0 * np.pi)
    order = np.argsort(shifted, kind="stable")
    return np.sort(order[drop:])


def make_scene(model, occlusion=0.0, noise_sigma=0.0, seed=0, n_points=64,
               trans_range=0.15):
    """Pose, occlude, subsample, and perturb one model into a Scene.

    If the occlusion cut leaves fewer than 8 points the draw is retried with
    an incremented sub-seed, deterministically.
    """
    if not (0.0 <= occlusion <= 0.6):
        raise ValueError(f"occlusion must be in [0, 0.6], got {occlusion}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    for attempt in range(64):
        rng = np.random.default_rng((seed, attempt))
        quat = random_rotation_quat(rng)
        trans = rng.uniform(-trans_range, trans_range, 3)
        gt = RigidTransform(quat, trans)
        visible = _occlude(model.points, occlusion, rng)
        if visible.size >= 8:
            break
    else:
        raise ValueError("occlusion left fewer than 8 points in every retry")
    if n_points is not None and visible.size > n_points:
        visible = np.sort(rng.choice(visible, size=n_points, replace=False))
    observed = gt.apply(model.points[visible])
    if noise_sigma > 0:
        observed = observed + rng.normal(0.0, noise_sigma, observed.shape)
    return Scene(
        object_id=model.object_id or "object",
        gt=gt,
        points=observed,
        colors=model.colors[visible].copy(),
        model_indices=visible,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# encoders


class EncoderParams:
    """Pointwise color (3 -> d_rgb) and geometry (3 -> d_dep) encoders."""

    def __init__(self, d_rgb, d_dep, rng, hidden=64):
        self.d_rgb = d_rgb
        self.d_dep = d_dep
        self.hidden = hidden
        self.color = MLP([3, hidden, d_rgb], rng, "enc.color")
        self.geom = MLP([3, hidden, d_dep], rng, "enc.geom")

    def parameters(self):
        return self.color.parameters() + self.geom.parameters()

    def clone_shared(self):
        c = EncoderParams.__new__(EncoderParams)
        c.d_rgb, c.d_dep, c.hidden = self.d_rgb, self.d_dep, self.hidden
        c.color = self.color.clone_shared()
        c.geom = self.geom.clone_shared()
        return c


def encode_points_forward(points, colors, enc, center=True):
    """Encode raw points/colors into a FeaturePair (cached for backward).

    The geometry branch consumes centroid-centered points rescaled by a
    fixed constant; centering is skipped on the refiner path, where the
    offset of the re-expressed points is the signal.
    """
    pts = np.asarray(points, dtype=np.float64)
    if center:
        g_in = (pts - pts.mean(axis=0)) * GEOM_SCALE
    else:
        g_in = pts * GEOM_SCALE
    gfeat, gcache = enc.geom.forward(g_in)
    cfeat, ccache = enc.color.forward(np.asarray(colors, dtype=np.float64))
    return FeaturePair(cfeat, gfeat), (ccache, gcache)


def encode_points_backward(cache, enc, grad_color, grad_geom):
    ccache, gcache = cache
    enc.color.backward(ccache, grad_color)
    enc.geom.backward(gcache, grad_geom)


def encode(scene, enc):
    """FeaturePair for a scene: centered geometry plus color attributes."""
    pair, _ = encode_points_forward(scene.points, scene.colors, enc, center=True)
    return pair


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Models plus train/eval scene splits and the generating config echo."""

    models: dict
    train: list
    eval: list
    config: dict

    def symmetric_ids(self):
        return sorted(oid for oid, m in self.models.items() if m.is_symmetric)


def _scene_seed(base_seed, model_index, scene_index):
    return (int(base_seed) * 1_000_003 + model_index * 10_007 + scene_index) % (2**63)


def build_dataset(model_names=("box", "cylinder", "lshape"), scenes_per_model=250,
                  eval_fraction=0.2, occlusion=0.2, noise_sigma=0.0,
                  n_points=64, model_points=200, seed=0):
    """In-memory dataset: a pure function of this config tuple."""
    if scenes_per_model < 1:
        raise ValueError("scenes_per_model must be >= 1")
    if not (0.0 < eval_fraction < 1.0):
        raise ValueError("eval_fraction must lie in (0, 1)")
    models = {}
    train, evals = [], []
    n_eval = max(1, int(round(scenes_per_model * eval_fraction)))
    for mi, name in enumerate(model_names):
        spec = DEFAULT_SHAPES.get(name)
        if spec is None:
            raise ValueError(f"unknown model name {name!r}; choose from {sorted(DEFAULT_SHAPES)}")
        model = make_model(spec, model_points, seed + mi, object_id=name)
        models[name] = model
        for si in range(scenes_per_model):
            scene = make_scene(model, occlusion=occlusion, noise_sigma=noise_sigma,
                               seed=_scene_seed(seed, mi, si), n_points=n_points)
            (evals if si >= scenes_per_model - n_eval else train).append(scene)
    config = {
        "models": ",".join(model_names),
        "scenes_per_model": scenes_per_model,
        "eval_fraction": eval_fraction,
        "occlusion": occlusion,
        "noise": noise_sigma,
        "n_points": n_points,
        "model_points": model_points,
        "seed": seed,
    }
    return Dataset(models, train, evals, config)


def write_dataset(outdir, dataset):
    """Write scene records plus the manifest; byte-stable given the dataset."""
    os.makedirs(outdir, exist_ok=True)
    cfg = dataset.config
    records = []
    scenes = [(s, "train") for s in dataset.train] + [(s, "eval") for s in dataset.eval]
    # manifest order follows model id, then split, then seed for stability
    scenes.sort(key=lambda e: (e[0].object_id, e[1] == "eval", e[0].seed))
    for i, (scene, split) in enumerate(scenes):
        fname = f"scene_{i:06d}.cfs"
        save_scene(os.path.join(outdir, fname), scene,
                   cfg.get("occlusion", 0.0), cfg.get("noise", 0.0))
        records.append((fname, scene.object_id, split))
    lines = ["CFDATASET 1", "[config]"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    lines.append("[models]")
    for mi, name in enumerate(cfg["models"].split(",")):
        lines.append(f"{name} = {DEFAULT_SHAPES[name]} {cfg['model_points']} {int(cfg['seed']) + mi}")
    lines.append("[records]")
    lines += [f"{f} {oid} {split}" for f, oid, split in records]
    with open(os.path.join(outdir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return os.path.join(outdir, "manifest.txt")


def load_dataset(path):
    """Read a dataset directory back; models are rebuilt from their specs."""
    manifest = os.path.join(path, "manifest.txt")
    with open(manifest) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "CFDATASET 1":
        raise ValueError(f"bad manifest header in {manifest}")
    section = None
    config, model_lines, record_lines = {}, [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("["):
            section = ln.strip("[]")
        elif section == "config":
            k, v = (s.strip() for s in ln.split("=", 1))
            config[k] = v
        elif section == "models":
            model_lines.append(ln)
        elif section == "records":
            record_lines.append(ln)
    models = {}
    for ln in model_lines:
        name, rest = (s.strip() for s in ln.split("=", 1))
        spec, m, seed = rest.split()
        models[name] = make_model(spec, int(m), int(seed), object_id=name)
    train, evals = [], []
    for ln in record_lines:
        fname, oid, split = ln.split()
        scene = load_scene(os.path.join(path, fname))
        if scene.object_id != oid:
            raise ValueError(f"record {fname} claims model {scene.object_id}, manifest says {oid}")
        (train if split == "train" else evals).append(scene)
    return Dataset(models, train, evals, config)


# ---------------------------------------------------------------------------
# scene records on disk


def save_scene(path, scene, occlusion, noise_sigma):
    """Text preamble (config echo, seed, model id, pose) + f32 LE payload."""
    n = scene.n
    with open(path, "wb") as fh:
        head = (
            f"CFSCENE {SCENE_VERSION}\n"
            f"model {scene.object_id}\n"
            f"seed {scene.seed if scene.seed is not None else 0}\n"
            f"occlusion {occlusion!r}\n"
            f"noise {noise_sigma!r}\n"
            f"pose {scene.gt.to_text()}\n"
            f"DATA\n"
        )
        fh.write(head.encode("ascii"))
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<IIII", SCENE_VERSION, n, 3, 3))
        fh.write(scene.points.astype("<f4").tobytes())
        fh.write(scene.colors.astype("<f4").tobytes())


def load_scene(path):
    """Round-trip of save_scene; points/colors come back as float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"DATA\n"
    cut = blob.index(marker) + len(marker)
    meta = {}
    pose = None
    for line in blob[:cut].decode("ascii").splitlines():
        if line.startswith("pose "):
            pose = RigidTransform.from_text(line[5:])
        elif " " in line:
            k, v = line.split(" ", 1)
            meta[k] = v
    body = blob[cut:]
    if body[:4] != SCENE_MAGIC:
        raise ValueError(f"bad scene magic in {path}")
    version, n, pw, cw = struct.unpack("<IIII", body[4:20])
    if version != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {version}")
    off = 20
    pts = np.frombuffer(body, dtype="<f4", count=n * pw, offset=off).reshape(n, pw)
    off += n * pw * 4
    cols = np.frombuffer(body, dtype="<f4", count=n * cw, offset=off).reshape(n, cw)
    return Scene(
        object_id=meta["model"],
        gt=pose,
        points=pts.astype(np.float64),
        colors=cols.astype(np.float64),
        seed=int(meta.get("seed", 0)),
    )
