"""Rigid transforms on unit quaternions, the dense pose head, and refinement.

Quaternions are (w, x, y, z), kept unit-norm and sign-canonicalized
(w >= 0) inside RigidTransform. The dense head maps fused per-point
features to 8 raw outputs: 4 quaternion components, 3 translation
components, 1 confidence logit. The raw w component is shifted by +1
before normalization so an untrained head emits the identity rotation.
"""

from __future__ import annotations

import numpy as np

from .ops import MLP, sigmoid

QUAT_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_mul(a, b):
    """Hamilton product; R(a*b) = R(a) R(b)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q):
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_mats(quats):
    """Rotation matrices for a stack of unit quaternions, (N,4) -> (N,3,3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    m = np.empty((quats.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def rotate_many(quats, points):
    """Apply N unit quaternions to m shared points: (N,4), (m,3) -> (N,m,3)."""
    return np.einsum("nij,mj->nmi", quats_to_mats(quats), points)


def rotate_many_backward(quats, points, grad_out):
    """d(rotate_many)/d(quats), treating the four components as free.

    With q = (w, u) and rotated point F = (w^2 - u.u) x + 2 (u.x) u + 2 w (u x x):
      dF/dw . g = 2 [ w (x.g) + (u x x).g ]
      dF/du . g = 2 [ -u (x.g) + x (u.g) + (u.x) g + w (x x g) ]
    Valid at unit norm, where F equals the rotation; combined with the
    normalization backward it yields the exact composite gradient.
    """
    w = quats[:, 0]
    u = quats[:, 1:]
    g = grad_out
    x = points
    xg = np.einsum("mi,nmi->nm", x, g)        # x . g
    ug = np.einsum("ni,nmi->nm", u, g)        # u . g
    ux = u @ x.T                               # u . x
    cross_ux = np.cross(u[:, None, :], x[None, :, :])   # u x x, (N,m,3)
    cross_xg = np.cross(x[None, :, :], g)                 # x x g, (N,m,3)
    gw = 2.0 * (w * xg.sum(axis=1) + np.einsum("nmi,nmi->n", cross_ux, g))
    gu = 2.0 * (
        -u * xg.sum(axis=1)[:, None]
        + np.einsum("nm,mi->ni", ug, x)
        + np.einsum("nm,nmi->ni", ux, g)
        + w[:, None] * cross_xg.sum(axis=1)
    )
    out = np.empty_like(quats)
    out[:, 0] = gw
    out[:, 1:] = gu
    return out


def normalize_quats(raw):
    """Shift raw w by +1 and normalize each row with an epsilon guard."""
    p = raw.copy()
    p[:, 0] += 1.0
    n = np.linalg.norm(p, axis=1)
    s = n + QUAT_EPS
    q = p / s[:, None]
    return q, (p, n, s)


def normalize_quats_backward(cache, grad_q):
    p, n, s = cache
    n_safe = np.maximum(n, QUAT_EPS)
    pg = (p * grad_q).sum(axis=1)
    return grad_q / s[:, None] - p * (pg / (s * s * n_safe))[:, None]


def random_rotation_quat(rng):
    """Uniform random rotation via the subgroup-algorithm construction."""
    u1, u2, u3 = rng.random(3)
    a = np.sqrt(1.0 - u1)
    b = np.sqrt(u1)
    return np.array([
        b * np.cos(2 * np.pi * u3),
        a * np.sin(2 * np.pi * u2),
        a * np.cos(2 * np.pi * u2),
        b * np.sin(2 * np.pi * u3),
    ])


def random_transform(rng, trans_range=0.15):
    """Uniform rotation plus translation uniform in a centered box."""
    q = random_rotation_quat(rng)
    t = rng.uniform(-trans_range, trans_range, 3)
    return RigidTransform(q, t)


# ---------------------------------------------------------------------------
# rigid transforms


class RigidTransform:
    """Unit-quaternion rotation (w >= 0) plus translation in meters."""

    __slots__ = ("quat", "trans")

    def __init__(self, quat, trans):
        q = np.asarray(quat, dtype=np.float64)
        t = np.asarray(trans, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("RigidTransform expects a 4-quaternion and a 3-translation")
        n = np.linalg.norm(q)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError("RigidTransform: degenerate quaternion")
        q = q / n
        if q[0] < 0.0:
            q = -q
        self.quat = q
        self.trans = t.copy()

    @staticmethod
    def identity():
        return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle, trans=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return RigidTransform(q, np.asarray(trans, dtype=np.float64))

    def rotation_matrix(self):
        return quat_to_mat(self.quat)

    def apply(self, points):
        """Rotate then translate; accepts (3,) or (m, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.trans

    def compose(self, other):
        """self after other: (self o other).apply(x) = self.apply(other.apply(x))."""
        q = quat_mul(self.quat, other.quat)
        t = self.apply(other.trans)
        return RigidTransform(q, t)

    def inverse(self):
        qi = quat_conj(self.quat)
        return RigidTransform(qi, -(quat_to_mat(qi) @ self.trans))

    def to_text(self):
        """Seven numbers, w x y z tx ty tz, exact float64 round trip."""
        return " ".join(repr(float(v)) for v in np.concatenate([self.quat, self.trans]))

    @staticmethod
    def from_text(line):
        vals = [float(tok) for tok in line.split()]
        if len(vals) != 7:
            raise ValueError(f"pose line needs 7 numbers, got {len(vals)}")
        return RigidTransform(np.array(vals[:4]), np.array(vals[4:]))

    def __repr__(self):
        q = np.array2string(self.quat, precision=4, suppress_small=True)
        t = np.array2string(self.trans, precision=4, suppress_small=True)
        return f"RigidTransform(quat={q}, trans={t})"


def compose(a, b):
    return a.compose(b)


def apply(t, points):
    return t.apply(points)


# ---------------------------------------------------------------------------
# dense prediction head


class PoseHead:
    """Pointwise map from fused features to 8 raw outputs per point."""

    def __init__(self, d_in, rng, hidden=64, final_scale=0.0):
        self.d_in = d_in
        self.hidden = hidden
        self.mlp = MLP([d_in, hidden, hidden, 8], rng, "head", final_scale=final_scale)

    def parameters(self):
        return self.mlp.parameters()

    def clone_shared(self):
        c = PoseHead.__new__(PoseHead)
        c.d_in = self.d_in
        c.hidden = self.hidden
        c.mlp = self.mlp.clone_shared()
        return c


class DensePrediction:
    """Per-point pose hypotheses: unit quaternions, translations, confidences."""

    __slots__ = ("quats", "trans", "conf", "logits")

    def __init__(self, quats, trans, conf, logits=None):
        self.quats = quats
        self.trans = trans
        self.conf = conf
        self.logits = logits

    @property
    def n(self):
        return self.quats.shape[0]


def predict_dense_forward(fused, head, origin=None):
    """Run the head and map raw outputs to (quaternion, translation, confidence).

    ``origin`` is added to the raw translations (the scene centroid for the
    estimator; omitted for residual prediction, where zero raw output must
    mean the identity transform).
    """
    raw, mlp_cache = head.mlp.forward(fused)
    quats, qcache = normalize_quats(raw[:, :4])
    trans = raw[:, 4:7]
    if origin is not None:
        trans = trans + np.asarray(origin, dtype=np.float64)
    logits = raw[:, 7]
    conf = sigmoid(logits)
    pred = DensePrediction(quats, trans, conf, logits)
    return pred, (mlp_cache, qcache, raw.shape)


def predict_dense_backward(cache, head, grad_quats, grad_trans, grad_logits):
    """Map gradients on (quats, trans, logits) back through the head."""
    mlp_cache, qcache, raw_shape = cache
    graw = np.zeros(raw_shape)
    graw[:, :4] = normalize_quats_backward(qcache, grad_quats)
    graw[:, 4:7] = grad_trans
    graw[:, 7] = grad_logits
    return head.mlp.backward(mlp_cache, graw)


def predict_dense(fused, head, origin=None):
    pred, _ = predict_dense_forward(fused, head, origin)
    return pred


def select_best(pred):
    """Pose at the highest-confidence point; ties break to the lowest index."""
    if pred.n < 1:
        raise ValueError("select_best: empty prediction")
    i = int(np.argmax(pred.conf))
    return RigidTransform(pred.quats[i], pred.trans[i])


def refine(initial, k, residual_fn):
    """Compose k residual estimates onto the pose.

    ``residual_fn(current)`` returns the residual transform estimated in the
    frame of the current pose; current o residual equals the camera-frame
    residual applied on the left of the running composition. k = 0 returns
    the initial pose object unchanged.
    """
    if k < 0:
        raise ValueError(f"refine: k must be >= 0, got {k}")
    cur = initial
    for _ in range(k):
        cur = cur.compose(residual_fn(cur))
    return cur
