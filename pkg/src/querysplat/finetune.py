"""Downstream transfer: frozen splat inference feeding a toy occupancy task.

The pre-trained model is run once, read-only, to produce decoded Gaussian
anchors and their final query features.  Anchors below an opacity threshold
are dropped; the survivors act as a sparse scene summary.  Task queries —
one per voxel center of a G^3 grid — pull information from their k nearest
anchors through a single-head local attention block, and a small head maps
each query to {empty, occupied} logits.  Only the interaction block, the
task queries, and the head train; the pre-trained parameters never change.

Anchor rows are the 11 decoded Gaussian parameters in the fixed order
[mu(3), scale(3), quat(4), opacity(1)].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from . import pretrain as pt
from .checkpoint import save_checkpoint
from .decoder import _init_mlp2, _mlp2

logger = logging.getLogger(__name__)

# Decoded anchor vector layout: [mu, scale, quat, opacity].
ANCHOR_PARAM_DIM = 11
_OPACITY_COL = 10


@dataclass
class TaskQuerySet:
    """Per-voxel task queries: fixed positions plus learnable features."""

    positions: np.ndarray  # (M, 3) world meters
    features: ad.Tensor  # (M, D_t)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(
                f"positions must be (M, 3), got {self.positions.shape}"
            )
        if not isinstance(self.features, ad.Tensor):
            self.features = ad.constant(np.asarray(self.features, dtype=np.float64))
        if (
            self.features.data.ndim != 2
            or self.features.data.shape[0] != self.positions.shape[0]
        ):
            raise ValueError(
                f"features {self.features.data.shape} do not match "
                f"{self.positions.shape[0]} positions"
            )


@dataclass
class InteractionConfig:
    """Knobs for the anchor-to-task-query attention block."""

    k: int = 8
    alpha_thresh: float = 0.05
    pe_hidden: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha_thresh <= 1.0:
            raise ValueError(
                f"alpha_thresh must be in [0, 1], got {self.alpha_thresh}"
            )
        if self.pe_hidden < 1:
            raise ValueError(f"pe_hidden must be >= 1, got {self.pe_hidden}")


@dataclass
class FrozenInference:
    """Detached product of one read-only pre-trained forward pass."""

    anchors: np.ndarray  # (N, 11) decoded [mu, scale, quat, opacity]
    features: np.ndarray  # (N, D) final query features


def infer_frozen(model, sample):
    """Run the pre-trained encoder + decoder on a sample, detached.

    The result is plain numpy: nothing downstream can backpropagate into
    the pre-trained parameters, which implements the freeze contract.
    """
    images = [sample.rgb[v] for v in range(sample.n_views)]
    pyramid = enc.encode(model.store, images)
    head, working = dec.decode(
        model.query_set(), pyramid, sample.cameras, model.decoder_cfg, model.store
    )
    anchors = np.concatenate(
        [head.mu.data, head.scale.data, head.quat.data, head.opacity.data[:, None]],
        axis=1,
    )
    return FrozenInference(anchors=anchors, features=working.features.data.copy())


def filter_by_opacity(gaussians, features, alpha_thresh):
    """Keep anchors with opacity >= alpha_thresh, preserving order.

    An empty result is returned as zero-row arrays; the interaction block
    treats that as its identity pass-through mode.
    """
    g = np.asarray(gaussians, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != ANCHOR_PARAM_DIM:
        raise ValueError(
            f"gaussians must be (N, {ANCHOR_PARAM_DIM}), got {g.shape}"
        )
    if f.ndim != 2 or f.shape[0] != g.shape[0]:
        raise ValueError(
            f"features {f.shape} do not match {g.shape[0]} gaussians"
        )
    keep = g[:, _OPACITY_COL] >= alpha_thresh
    return g[keep], f[keep]


def knn_neighbors(task_positions, anchor_positions, k):
    """Indices of the k nearest anchors per task position, shape (M, k).

    Euclidean distance; ties broken by ascending anchor index.  With fewer
    than k anchors, the nearest one's index repeats to fill the row.
    """
    tp = np.asarray(task_positions, dtype=np.float64)
    ap = np.asarray(anchor_positions, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if ap.ndim != 2 or ap.shape[0] == 0:
        raise ValueError("knn_neighbors requires at least one anchor")
    d2 = ((tp[:, None, :] - ap[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    n = ap.shape[0]
    if n >= k:
        return order[:, :k]
    fill = np.repeat(order[:, :1], k - n, axis=1)
    return np.concatenate([order, fill], axis=1)


def local_query_interaction(tq, anchors, anchor_features, cfg, store):
    """Update task queries from their k nearest anchors (one attention head).

    Query side is q_t + MLP(mu_t); key/value side is adapter(q_k) + MLP(g_k)
    with g_k the full 11-dim decoded anchor vector.  The attended value is
    projected and added residually to q_t.  Anchors and their features enter
    as constants, so gradients reach only the block's own parameters and the
    task queries.  With zero anchors the input is returned unchanged.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    anchor_features = np.asarray(anchor_features, dtype=np.float64)
    if anchors.shape[0] == 0:
        logger.warning(
            "no anchors passed the opacity filter; "
            "query interaction is an identity pass-through"
        )
        return tq

    adapter = store["task.interact.adapter.w"]
    if anchor_features.shape[1] != adapter.data.shape[0]:
        raise ValueError(
            f"anchor feature dim {anchor_features.shape[1]} does not match "
            f"the interaction adapter input dim {adapter.data.shape[0]}"
        )
    m, d_task = tq.features.data.shape
    neigh = knn_neighbors(tq.positions, anchors[:, :3], cfg.k)

    q = tq.features + _mlp2(store, "task.interact.pos", ad.constant(tq.positions))
    kv = ad.matmul(ad.constant(anchor_features), adapter) + _mlp2(
        store, "task.interact.gk", ad.constant(anchors)
    )
    kv_n = ad.gather(kv, neigh)  # (M, k, D_t)

    scores = ad.reduce_sum(
        ad.reshape(q, (m, 1, d_task)) * kv_n, axis=2
    ) * (1.0 / np.sqrt(d_task))
    weights = ad.softmax(scores, axis=1)
    attended = ad.reduce_sum(ad.reshape(weights, (m, cfg.k, 1)) * kv_n, axis=1)
    update = ad.matmul(attended, store["task.interact.out.w"])
    return TaskQuerySet(positions=tq.positions, features=tq.features + update)


def occupancy_head(tq, grid_shape, store):
    """Map each task query to {empty, occupied} logits, shape (G^3, 2).

    Row order matches the C-order flattening of the (G, G, G) voxel grid.
    """
    g = int(grid_shape)
    m = tq.features.data.shape[0]
    if m != g**3:
        raise ValueError(f"expected {g**3} queries for a {g}^3 grid, got {m}")
    return _mlp2(store, "task.head", tq.features)


def voxel_centers(bounds, grid):
    """Centers of a grid^3 voxelization of bounds, C-order, shape (G^3, 3)."""
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    g = int(grid)
    size = (bounds[1] - bounds[0]) / g
    axes = [bounds[0, d] + (np.arange(g) + 0.5) * size[d] for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def make_ground_truth_grid(scene, grid=16):
    """Binary occupancy on a grid^3 voxelization of the scene bounds.

    A voxel is occupied iff some scene Gaussian with opacity > 0.5 has its
    mean inside it.  Means exactly on the upper bound land in the last voxel.
    """
    g = int(grid)
    lo, hi = scene.bounds[0], scene.bounds[1]
    size = (hi - lo) / g
    occ = np.zeros((g, g, g), dtype=np.int64)
    for prim in scene.gaussians:
        if prim.opacity <= 0.5:
            continue
        if np.any(prim.mu < lo) or np.any(prim.mu > hi):
            continue
        idx = np.minimum(((prim.mu - lo) / size).astype(np.int64), g - 1)
        occ[idx[0], idx[1], idx[2]] = 1
    return occ


def evaluate_iou(pred_grid, gt_grid):
    """Per-class IoU and their mean over the classes present anywhere.

    A class absent from both grids is excluded from the mean; a counted
    class with an empty union scores 0.
    """
    pred = np.asarray(pred_grid)
    gt = np.asarray(gt_grid)
    if pred.shape != gt.shape:
        raise ValueError(
            f"prediction shape {pred.shape} does not match {gt.shape}"
        )
    per_class = {}
    for c in (0, 1):
        p = pred == c
        t = gt == c
        if not p.any() and not t.any():
            continue
        union = int(np.logical_or(p, t).sum())
        inter = int(np.logical_and(p, t).sum())
        per_class[c] = inter / union if union else 0.0
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, miou


@dataclass
class TaskModel:
    """Trainable occupancy task: its parameter store and query layout."""

    store: ad.ParamStore
    positions: np.ndarray  # (G^3, 3) voxel centers
    cfg: InteractionConfig
    grid: int
    bounds: np.ndarray = field(default=None)


def build_task_model(bounds, grid=16, cfg=None, d_task=64, d_pre=64, seed=0):
    """Task queries at voxel centers plus interaction-block and head params.

    The output projection starts at zero, so the interaction block is an
    exact identity at initialization and the head sees the same features
    with or without it; the block departs from identity as training moves
    the projection.
    """
    cfg = cfg or InteractionConfig()
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if not np.all(bounds[1] > bounds[0]):
        raise ValueError(f"degenerate bounds: {bounds.tolist()}")
    g = int(grid)
    if g < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    positions = voxel_centers(bounds, g)

    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    store.param("task.queries", rng.normal(size=(g**3, d_task)) * 0.02)
    _init_mlp2(store, rng, "task.interact.pos", 3, cfg.pe_hidden, d_task)
    _init_mlp2(store, rng, "task.interact.gk", ANCHOR_PARAM_DIM, cfg.pe_hidden, d_task)
    store.param(
        "task.interact.adapter.w",
        rng.normal(size=(d_pre, d_task)) * np.sqrt(1.0 / d_pre),
    )
    store.param("task.interact.out.w", np.zeros((d_task, d_task)))
    _init_mlp2(store, rng, "task.head", d_task, cfg.pe_hidden, 2)
    return TaskModel(store=store, positions=positions, cfg=cfg, grid=g, bounds=bounds)


def _task_logits(task, frozen, use_interaction):
    """Forward pass from stored task queries to per-voxel logits."""
    tq = TaskQuerySet(positions=task.positions, features=task.store["task.queries"])
    if use_interaction:
        anchors, feats = filter_by_opacity(
            frozen.anchors, frozen.features, task.cfg.alpha_thresh
        )
        tq = local_query_interaction(tq, anchors, feats, task.cfg, task.store)
    return occupancy_head(tq, task.grid, task.store)


def finetune_step(task, frozen, gt_grid, opt_state, lr, use_interaction=True):
    """One cross-entropy step on the task parameters; returns the loss.

    The frozen inference enters as constants, so only the task store is
    touched by the update.
    """
    gt = np.asarray(gt_grid)
    if gt.shape != (task.grid,) * 3:
        raise ValueError(
            f"ground-truth grid shape {gt.shape} does not match {(task.grid,) * 3}"
        )
    task.store.zero_grad()
    logits = _task_logits(task, frozen, use_interaction)
    loss = ad.cross_entropy(logits, gt.reshape(-1).astype(np.int64))
    loss.backward()
    pt.adamw_step(task.store, opt_state, lr)
    return float(loss.data)


def predict_occupancy(task, frozen, use_interaction=True):
    """Argmax class per voxel, shape (G, G, G)."""
    logits = _task_logits(task, frozen, use_interaction)
    return np.argmax(logits.data, axis=1).reshape((task.grid,) * 3)


def run_finetuning(
    task,
    pretrained,
    samples,
    scenes,
    total_steps,
    lr=1e-3,
    use_interaction=True,
    weight_decay=0.01,
    log_path=None,
    checkpoint_path=None,
):
    """Train the task model over a cycle of scenes' occupancy grids.

    The pre-trained forward pass runs once per scene up front — it is
    frozen, so its output is the same every step.  Returns one metrics dict
    per step with keys step, loss, iou_occupied, miou (scored on that
    step's scene); the same rows go to the CSV at log_path when given.
    """
    if len(samples) != len(scenes) or not scenes:
        raise ValueError(
            f"need matching non-empty sample/scene lists, "
            f"got {len(samples)} and {len(scenes)}"
        )
    frozen = [infer_frozen(pretrained, s) for s in samples]
    grids = [make_ground_truth_grid(s, task.grid) for s in scenes]
    opt_state = pt.OptimizerState(weight_decay=weight_decay)

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(["step", "loss", "iou_occupied", "miou"])

    history = []
    try:
        for step in range(1, total_steps + 1):
            i = (step - 1) % len(scenes)
            loss = finetune_step(
                task, frozen[i], grids[i], opt_state, lr, use_interaction
            )
            pred = predict_occupancy(task, frozen[i], use_interaction)
            per_class, miou = evaluate_iou(pred, grids[i])
            iou_occ = per_class.get(1, 0.0)
            history.append(
                {"step": step, "loss": loss, "iou_occupied": iou_occ, "miou": miou}
            )
            if writer is not None:
                writer.writerow([step, repr(loss), repr(iou_occ), repr(miou)])
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, task.store.state_dict())
    return history
