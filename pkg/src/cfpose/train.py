"""Confidence-weighted dense loss, training loops, ablation sweep, checkpoints.

The estimator maps a scene to per-point pose hypotheses and trains end to
end under L = mean_i(d_i c_i - w log c_i), where d_i is the mean
(closest-)point distance of hypothesis i against ground truth. The refiner
is a second network of the same shape that sees the observed points
re-expressed in the current estimate's frame and predicts a residual pose;
it trains only after the estimator's epoch-mean loss falls below the
trigger, at a decayed learning rate, with the estimator frozen.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .fusion import STRATEGIES, CorrelationParams, fuse_backward, fuse_forward
from .metrics import EvalRecord, add, add_s, report
from .ops import AdamState, adam_step
from .pose import (
    PoseHead,
    RigidTransform,
    predict_dense_backward,
    predict_dense_forward,
    refine,
    rotate_many,
    rotate_many_backward,
    select_best,
)
from .synth import EncoderParams, encode_points_backward, encode_points_forward


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, log=None):
        super().__init__(msg)
        self.log = log


class RefinerTriggerError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "fuse_v2"
    lr: float = 1e-4
    batch_size: int = 8
    refiner_batch_size: int = 4
    refiner_trigger: float = 0.016
    refiner_decay: float = 0.3
    conf_weight: float = 0.015
    epochs: int = 150
    refiner_epochs: int = 30
    refine_iters: int = 2
    seed: int = 0
    d: int = 32
    enc_hidden: int = 64
    head_hidden: int = 64
    loss_points: int = 64
    eval_every: int = 0  # 0: auto cadence, -1: never
    threads: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 < self.refiner_decay < 1.0):
            raise ValueError("refiner_decay must lie in (0, 1)")
        if self.refiner_trigger <= 0:
            raise ValueError("refiner_trigger must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.batch_size < 1 or self.refiner_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0 or self.refiner_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.conf_weight <= 0:
            raise ValueError("conf_weight must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        return self


@dataclass
class TrainLog:
    """Per-epoch records plus the config echo and final parameter checksum."""

    entries: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checksum: str = ""
    wallclock: float = 0.0

    @property
    def final_loss(self):
        return self.entries[-1]["loss"] if self.entries else float("nan")

    @property
    def min_loss(self):
        return min((e["loss"] for e in self.entries), default=float("nan"))


def write_train_log(path, log):
    """Line-delimited key=value records; config echo first, checksum last."""
    with open(path, "w") as fh:
        cfg = " ".join(f"{k}={log.config[k]}" for k in sorted(log.config))
        fh.write(f"config {cfg}\n")
        for e in log.entries:
            fh.write(" ".join(f"{k}={e[k]!r}" for k in e) + "\n")
        fh.write(f"final checksum={log.checksum} wallclock={log.wallclock:.3f}\n")


# ---------------------------------------------------------------------------
# the dense confidence-weighted loss


def dense_pose_loss(pred, src_points, tgt_points, symmetric, w):
    """Scalar loss over a dense prediction: mean_i(d_i c_i - w log c_i).

    d_i transforms ``src_points`` by hypothesis i and measures the mean
    distance to ``tgt_points`` — matched index-to-index for asymmetric
    objects, nearest-target otherwise. -log c is computed from the logits
    (softplus) so confidence saturation cannot produce infinities.
    """
    if w <= 0:
        raise ValueError("conf weight must be positive")
    y = rotate_many(pred.quats, src_points) + pred.trans[:, None, :]
    if symmetric:
        n, ms, _ = y.shape
        d2 = y.reshape(n * ms, 3) @ tgt_points.T  # becomes the squared-distance table
        d2 *= -2.0
        d2 += (y * y).sum(axis=2).reshape(n * ms, 1)
        d2 += (tgt_points * tgt_points).sum(axis=1)
        sel = np.argmin(d2, axis=1).reshape(n, ms)
        z = tgt_points[sel]
        diff = y - z
    else:
        diff = y - tgt_points
    dist = np.sqrt((diff * diff).sum(axis=2))
    d = dist.mean(axis=1)
    o = pred.logits
    # softplus(-o) = -log sigmoid(o), stable on both tails
    neglog_c = np.log1p(np.exp(-np.abs(o))) + np.maximum(-o, 0.0)
    loss = float((d * pred.conf + w * neglog_c).mean())
    return loss, (pred, src_points, diff, dist, d)


def dense_pose_loss_backward(cache, w, scale=1.0):
    """Gradients of the loss w.r.t. (quats, trans, logits), times ``scale``."""
    pred, src, diff, dist, d = cache
    n, m = dist.shape
    c = pred.conf
    gd = (scale / n) * c
    glog = (scale / n) * (1.0 - c) * (d * c - w)
    unit = diff / np.maximum(dist, 1e-12)[:, :, None]
    gy = unit * (gd / m)[:, None, None]
    gtrans = gy.sum(axis=1)
    gquats = rotate_many_backward(pred.quats, src, gy)
    return gquats, gtrans, glog


# ---------------------------------------------------------------------------
# the two networks


class _PoseNet:
    """Encoders + fusion + head; subclasses fix the input frame conventions."""

    kind = "net"
    center_input = True

    def __init__(self, strategy="fuse_v2", d=32, enc_hidden=64, head_hidden=64,
                 rng=None, head_final_scale=0.0):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.strategy = strategy
        self.d = d
        self.enc = EncoderParams(d, d, rng, hidden=enc_hidden)
        self.corr = CorrelationParams(d, rng)
        self.head = PoseHead(2 * d, rng, hidden=head_hidden, final_scale=head_final_scale)

    def parameters(self):
        return self.enc.parameters() + self.corr.parameters() + self.head.parameters()

    def forward(self, points, colors, origin=None):
        pair, enc_cache = encode_points_forward(points, colors, self.enc,
                                                center=self.center_input)
        fused, fuse_cache = fuse_forward(pair, self.corr, self.strategy)
        pred, head_cache = predict_dense_forward(fused, self.head, origin=origin)
        return pred, (enc_cache, fuse_cache, head_cache)

    def backward(self, cache, gquats, gtrans, glogits):
        enc_cache, fuse_cache, head_cache = cache
        gfused = predict_dense_backward(head_cache, self.head, gquats, gtrans, glogits)
        gc, gg = fuse_backward(fuse_cache, self.corr, gfused)
        encode_points_backward(enc_cache, self.enc, gc, gg)

    def hyper(self):
        return {
            "kind": self.kind,
            "strategy": self.strategy,
            "d": self.d,
            "enc_hidden": self.enc.hidden,
            "head_hidden": self.head.hidden,
        }

    def clone_shared(self):
        c = self.__class__.__new__(self.__class__)
        c.strategy = self.strategy
        c.d = self.d
        c.enc = self.enc.clone_shared()
        c.corr = self.corr.clone_shared()
        c.head = self.head.clone_shared()
        return c


class PoseEstimator(_PoseNet):
    """Dense pose hypotheses from an observed scene (camera frame)."""

    kind = "estimator"
    center_input = True

    def predict_scene(self, scene):
        pred, _ = self.forward(scene.points, scene.colors, origin=scene.centroid)
        return pred

    def predict(self, scene):
        return select_best(self.predict_scene(scene))


class PoseRefiner(_PoseNet):
    """Residual pose from points re-expressed in the current estimate's frame.

    No centroid centering and no translation origin: a zero raw output must
    mean the identity residual.
    """

    kind = "refiner"
    center_input = False

    def residual(self, scene, current):
        y = current.inverse().apply(scene.points)
        pred, _ = self.forward(y, scene.colors, origin=None)
        return select_best(pred)

    def refine_pose(self, scene, initial, iters):
        return refine(initial, iters, lambda cur: self.residual(scene, cur))


# ---------------------------------------------------------------------------
# loss-point subsets and batch plumbing


def loss_point_sets(dataset, loss_points):
    """Fixed strided subsample of each model cloud for the training loss."""
    sets = {}
    for oid, model in dataset.models.items():
        m = model.m
        k = min(loss_points, m)
        idx = np.linspace(0, m - 1, k).round().astype(int)
        sets[oid] = (model.points[np.unique(idx)], model.is_symmetric)
    return sets


def _scene_loss_cache(dataset, scenes, lsets):
    """Per-scene (source points, gt targets, symmetric, centroid), precomputed."""
    cache = {}
    for scene in scenes:
        src, sym = lsets[scene.object_id]
        cache[id(scene)] = (src, scene.gt.apply(src), sym, scene.points.mean(axis=0))
    return cache


def _run_batch(model, scenes, step_fn, threads):
    """Run per-scene forward/backward; merge gradients in scene order.

    Worker clones share parameter values but own their gradient buffers, so
    the threaded path accumulates exactly the same sums as the serial one.
    """
    scale = 1.0 / len(scenes)
    if threads <= 1 or len(scenes) == 1:
        return [step_fn(model, s, scale) for s in scenes]
    clones = [model.clone_shared() for _ in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        losses = list(pool.map(lambda job: step_fn(job[0], job[1], scale),
                               zip(clones, scenes)))
    for p, *worker_ps in zip(model.parameters(), *[c.parameters() for c in clones]):
        for wp in worker_ps:
            p.grad += wp.grad
    return losses


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _snapshot_due(epoch, epochs, eval_every):
    if eval_every < 0:
        return False
    cadence = eval_every if eval_every > 0 else max(1, epochs // 5)
    return (epoch + 1) % cadence == 0 or epoch + 1 == epochs


def checksum_params(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# evaluation


def routed_distance(model_obj, pose, gt):
    """ADD-S for symmetric objects, ADD otherwise."""
    return (add_s if model_obj.is_symmetric else add)(model_obj, pose, gt)


def evaluate(dataset, estimator, refiner=None, iters=2, split="eval", oracle=False):
    """Score every scene of a split; emits both metric kinds per scene."""
    scenes = dataset.eval if split == "eval" else dataset.train
    records = []
    for scene in scenes:
        model_obj = dataset.models[scene.object_id]
        if oracle:
            pose = scene.gt
        else:
            pose = estimator.predict(scene)
            if refiner is not None and iters > 0:
                pose = refiner.refine_pose(scene, pose, iters)
        records.append(EvalRecord(scene.object_id, "ADD",
                                  add(model_obj, pose, scene.gt),
                                  pred=pose, gt=scene.gt))
        records.append(EvalRecord(scene.object_id, "ADD-S",
                                  add_s(model_obj, pose, scene.gt),
                                  pred=pose, gt=scene.gt))
    return records


def _eval_snapshot(dataset, estimator):
    dists = []
    for scene in dataset.eval:
        model_obj = dataset.models[scene.object_id]
        dists.append(routed_distance(model_obj, estimator.predict(scene), scene.gt))
    if not dists:
        return {}
    from .metrics import auc
    return {"eval_add": float(np.mean(dists)), "eval_auc": auc(dists)}


# ---------------------------------------------------------------------------
# training loops


def train_estimator(dataset, config):
    """Train the dense estimator; deterministic given (dataset, config)."""
    config.validate()
    if not dataset.train:
        raise ValueError("train_estimator: empty training split")
    children = np.random.SeedSequence(config.seed).spawn(4)
    model = PoseEstimator(config.strategy, config.d, config.enc_hidden,
                          config.head_hidden, rng=np.random.default_rng(children[0]))
    shuffle_rng = np.random.default_rng(children[1])
    params = model.parameters()
    state = AdamState(params)
    lsets = loss_point_sets(dataset, config.loss_points)
    scache = _scene_loss_cache(dataset, dataset.train, lsets)
    w = config.conf_weight

    def step(net, scene, scale):
        src, tgt, sym, centroid = scache[id(scene)]
        pred, cache = net.forward(scene.points, scene.colors, origin=centroid)
        loss, lcache = dense_pose_loss(pred, src, tgt, sym, w)
        net.backward(cache, *dense_pose_loss_backward(lcache, w, scale))
        return loss

    log = TrainLog(config=asdict(config))
    t0 = time.perf_counter()
    n = len(dataset.train)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for chunk in _batches(order, config.batch_size):
            scenes = [dataset.train[i] for i in chunk]
            epoch_losses.extend(_run_batch(model, scenes, step, config.threads))
            adam_step(params, state, config.lr)
        mean_loss = float(np.mean(epoch_losses))
        entry = {"epoch": epoch + 1, "loss": mean_loss}
        if not np.isfinite(mean_loss):
            log.entries.append(entry)
            log.wallclock = time.perf_counter() - t0
            raise TrainingDiverged(
                f"estimator loss went non-finite at epoch {epoch + 1}", log)
        if _snapshot_due(epoch, config.epochs, config.eval_every):
            entry.update(_eval_snapshot(dataset, model))
        log.entries.append(entry)
    log.wallclock = time.perf_counter() - t0
    log.checksum = checksum_params(params)
    return model, log


def train_refiner(dataset, estimator, config, estimator_log):
    """Train the residual refiner after the estimator has converged.

    Refuses to start unless the estimator's epoch-mean loss fell below the
    trigger; runs at lr * decay with the estimator frozen.
    """
    config.validate()
    if not dataset.train:
        raise ValueError("train_refiner: empty training split")
    trigger = config.refiner_trigger
    reached = estimator_log is not None and estimator_log.min_loss < trigger
    if not reached:
        seen = estimator_log.min_loss if estimator_log is not None else float("nan")
        raise RefinerTriggerError(
            f"estimator loss never fell below the trigger {trigger} "
            f"(best epoch mean: {seen}); refusing to start refiner training")
    children = np.random.SeedSequence(config.seed).spawn(4)
    refiner = PoseRefiner(config.strategy, config.d, config.enc_hidden,
                          config.head_hidden, rng=np.random.default_rng(children[2]))
    shuffle_rng = np.random.default_rng(children[3])
    params = refiner.parameters()
    state = AdamState(params)
    lr = config.lr * config.refiner_decay
    lsets = loss_point_sets(dataset, config.loss_points)
    w = config.conf_weight
    iters = max(1, config.refine_iters)

    def step(net, scene, scale):
        src, sym = lsets[scene.object_id]
        cur = estimator.predict(scene)
        total = 0.0
        for _ in range(iters):
            y = cur.inverse().apply(scene.points)
            pred, cache = net.forward(y, scene.colors, origin=None)
            err_gt = cur.inverse().compose(scene.gt)
            loss, lcache = dense_pose_loss(pred, src, err_gt.apply(src), sym, w)
            net.backward(cache, *dense_pose_loss_backward(lcache, w, scale / iters))
            total += loss
            cur = cur.compose(select_best(pred))
        return total / iters

    log = TrainLog(config=asdict(config))
    t0 = time.perf_counter()
    n = len(dataset.train)
    for epoch in range(config.refiner_epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for chunk in _batches(order, config.refiner_batch_size):
            scenes = [dataset.train[i] for i in chunk]
            epoch_losses.extend(_run_batch(refiner, scenes, step, config.threads))
            adam_step(params, state, lr)
        mean_loss = float(np.mean(epoch_losses))
        entry = {"epoch": epoch + 1, "loss": mean_loss}
        if not np.isfinite(mean_loss):
            log.entries.append(entry)
            log.wallclock = time.perf_counter() - t0
            raise TrainingDiverged(
                f"refiner loss went non-finite at epoch {epoch + 1}", log)
        log.entries.append(entry)
    log.wallclock = time.perf_counter() - t0
    log.checksum = checksum_params(params)
    return refiner, log


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass
class AblationRun:
    strategy: str
    seed: int
    mean_auc: float
    mean_pct: float
    records: list


@dataclass
class AblationTable:
    runs: list = field(default_factory=list)

    def strategies(self):
        seen = []
        for r in self.runs:
            if r.strategy not in seen:
                seen.append(r.strategy)
        return seen

    def stats(self, strategy):
        aucs = [r.mean_auc for r in self.runs if r.strategy == strategy]
        pcts = [r.mean_pct for r in self.runs if r.strategy == strategy]
        return (float(np.mean(aucs)), float(np.std(aucs)),
                float(np.mean(pcts)), float(np.std(pcts)))

    def ordering_ok(self, winners=("fuse_v2", "fuse_v3"), baseline="concat"):
        """True when every winner's mean AUC is at least the baseline's."""
        present = self.strategies()
        if baseline not in present:
            return True
        base = self.stats(baseline)[0]
        return all(self.stats(w)[0] >= base for w in present if w in winners)

    def to_text(self):
        head = f"{'strategy':<12} {'AUC mean':>9} {'AUC sd':>8} {'<2cm mean':>10} {'<2cm sd':>8} {'seeds':>6}"
        lines = [head, "-" * len(head)]
        for s in self.strategies():
            am, asd, pm, psd = self.stats(s)
            k = sum(1 for r in self.runs if r.strategy == s)
            lines.append(f"{s:<12} {am:>9.2f} {asd:>8.2f} {pm:>10.2f} {psd:>8.2f} {k:>6d}")
        if not self.ordering_ok():
            lines.append("FLAG: sequential strategies did not both reach the concat baseline AUC")
        return "\n".join(lines)

    def to_csv(self):
        out = ["strategy,seed,mean_auc,below_threshold_pct"]
        for r in self.runs:
            out.append(f"{r.strategy},{r.seed},{r.mean_auc!r},{r.mean_pct!r}")
        return "\n".join(out) + "\n"


def ablate(dataset, strategies, seeds, config):
    """Train each (strategy, seed) pair on identical data and budgets."""
    if not strategies or not seeds:
        raise ValueError("ablate needs at least one strategy and one seed")
    table = AblationTable()
    sym_ids = dataset.symmetric_ids()
    for strat in strategies:
        for seed in seeds:
            cfg = replace(config, strategy=strat, seed=seed)
            model, _ = train_estimator(dataset, cfg)
            recs = evaluate(dataset, model)
            rep = report(recs, symmetric_ids=sym_ids)
            table.runs.append(AblationRun(strat, seed, rep.mean_auc, rep.mean_pct, recs))
    return table


# ---------------------------------------------------------------------------
# checkpoints


CKPT_MAGIC = "CFCKPT 1"


def save_checkpoint(path, model):
    """Versioned text header naming each tensor, then little-endian f64 data."""
    params = model.parameters()
    with open(path, "wb") as fh:
        lines = [CKPT_MAGIC]
        lines += [f"meta {k} {v}" for k, v in model.hyper().items()]
        for p in params:
            dims = " ".join(str(s) for s in p.value.shape)
            lines.append(f"param {p.name} {dims}")
        lines.append("DATA")
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the network named in the header and fill in its tensors."""
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"DATA\n"
    cut = blob.index(marker) + len(marker)
    header = blob[:cut].decode("ascii").splitlines()
    if header[0] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    meta = {}
    shapes = []
    for line in header[1:]:
        if line.startswith("meta "):
            _, k, v = line.split(" ", 2)
            meta[k] = v
        elif line.startswith("param "):
            parts = line.split()
            shapes.append((parts[1], tuple(int(s) for s in parts[2:])))
    cls = {"estimator": PoseEstimator, "refiner": PoseRefiner}[meta["kind"]]
    model = cls(meta["strategy"], int(meta["d"]), int(meta["enc_hidden"]),
                int(meta["head_hidden"]), rng=np.random.default_rng(0))
    params = model.parameters()
    if len(params) != len(shapes):
        raise ValueError("checkpoint parameter count mismatch")
    off = cut
    for p, (name, shape) in zip(params, shapes):
        if p.value.shape != shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: "
                             f"{shape} vs {p.value.shape}")
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        p.value[...] = vals.reshape(shape)
        off += count * 8
    return model
