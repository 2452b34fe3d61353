"""Correlation-map scoring model and its two-phase trainer.

A correlation map is reduced to a confidence vector by two pooling
branches (a local max-pooled average and a global normalized-rectified
average), then a small MLP (2C -> hidden -> 2) turns that vector into
existence logits. Backprop is written by hand: through the MLP, and
through both pooling branches down to the input map so the fusion
projections can be trained jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .episodes import Episode, FusionProjector, build_prototype, correlate, fuse_levels
from .tensor_ops import (
    FeatureMap,
    Level,
    concat,
    downsample_avg,
    max_pool2,
    relu,
    softmax2,
    spatial_average,
    spatial_standardize,
)

HIDDEN_DIM = 512
POSITIVE = 1  # index of the "class is present" logit


@dataclass
class ScoreModel:
    """Two affine layers mapping a 2C confidence vector to 2 logits."""

    w1: np.ndarray  # (hidden, 2C)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (2, hidden)
    b2: np.ndarray  # (2,)
    eps: float = 1e-5

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1] // 2

    @classmethod
    def init(cls, in_channels: int, hidden: int = HIDDEN_DIM,
             seed: int = 0) -> "ScoreModel":
        """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
        rng = np.random.default_rng(seed)

        def layer(out_d, in_d):
            bound = np.sqrt(6.0 / (in_d + out_d))
            return rng.uniform(-bound, bound, (out_d, in_d)).astype(np.float32)

        return cls(
            w1=layer(hidden, 2 * in_channels),
            b1=np.zeros(hidden, dtype=np.float32),
            w2=layer(2, hidden),
            b2=np.zeros(2, dtype=np.float32),
        )

    def copy(self) -> "ScoreModel":
        return ScoreModel(self.w1.copy(), self.b1.copy(),
                          self.w2.copy(), self.b2.copy(), self.eps)


def global_representation(c: FeatureMap, eps: float = 1e-5) -> np.ndarray:
    """Per-channel mean of the rectified, spatially standardized map."""
    return spatial_average(relu(spatial_standardize(c, eps)))


def local_representation(c: FeatureMap) -> np.ndarray:
    """Per-channel mean of the 2x2 max-pooled map; captures peak strength."""
    return spatial_average(max_pool2(c))


def confidence_vector(c: FeatureMap, eps: float = 1e-5) -> np.ndarray:
    """Concatenation [local, global]; dim 2C."""
    return concat(local_representation(c), global_representation(c, eps))


def confidence_backward(c: FeatureMap, grad_v: np.ndarray,
                        eps: float = 1e-5) -> np.ndarray:
    """Gradient of the confidence vector w.r.t. the input map.

    grad_v is (2C,), local half first. Returns (C, H, W) float64.
    Max-pool routes gradient to the first argmax in each window; the
    standardization Jacobian accounts for the mean and std terms.
    """
    x = c.data.astype(np.float64)
    ch, h, w = x.shape
    grad_local = grad_v[:ch].astype(np.float64)
    grad_global = grad_v[ch:].astype(np.float64)
    grad_x = np.zeros_like(x)

    # Local branch: avg over pooled cells of windowed max.
    ph, pw = h // 2, w // 2
    windows = x[:, : ph * 2, : pw * 2].reshape(ch, ph, 2, pw, 2)
    flat = windows.transpose(0, 1, 3, 2, 4).reshape(ch, ph, pw, 4)
    arg = flat.argmax(axis=3)
    scale = grad_local / (ph * pw)
    for i in range(ph):
        for j in range(pw):
            dy = arg[:, i, j] // 2
            dx = arg[:, i, j] % 2
            grad_x[np.arange(ch), 2 * i + dy, 2 * j + dx] += scale

    # Global branch: avg(relu(standardize)).
    n = h * w
    mu = x.mean(axis=(1, 2), keepdims=True)
    sd = x.std(axis=(1, 2), keepdims=True)
    s = sd + eps
    d = x - mu
    z = d / s
    u = (grad_global[:, None, None] / n) * (z > 0)  # dL/dz
    u_mean = u.mean(axis=(1, 2), keepdims=True)
    ud_mean = (u * d).mean(axis=(1, 2), keepdims=True)
    # d sd / dx_q = d_q / (n * sd); zero-variance channels contribute
    # nothing (z == 0 there, so u == 0 as well).
    sd_safe = np.where(sd > 0, sd, 1.0)
    grad_x += (u - u_mean) / s - d * ud_mean / (sd_safe * s * s)
    return grad_x


def confidence_vectors_batch(maps: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Confidence vectors for a stack of maps at once.

    maps is (N, C, H, W); returns (N, 2C) float64. Matches
    confidence_vector applied per map to float32 roundoff; elementwise
    work stays in float32 with float64 reduction accumulators, so
    scoring all candidate classes costs a handful of array ops.
    """
    x = np.asarray(maps, dtype=np.float32)
    n, c, h, w = x.shape
    ph, pw = h // 2, w // 2
    t = x[:, :, : ph * 2, : pw * 2]
    pooled = np.maximum(
        np.maximum(t[..., ::2, ::2], t[..., ::2, 1::2]),
        np.maximum(t[..., 1::2, ::2], t[..., 1::2, 1::2]),
    )
    local = pooled.reshape(n, c, -1).mean(axis=2, dtype=np.float64)
    flat = x.reshape(n, c, -1)
    mu = flat.mean(axis=2, keepdims=True, dtype=np.float64)
    sd = flat.std(axis=2, keepdims=True, dtype=np.float64)
    z = (flat - mu.astype(np.float32)) / (sd + eps).astype(np.float32)
    glob = np.maximum(z, 0.0).mean(axis=2, dtype=np.float64)
    return np.concatenate([local, glob], axis=1)


def scores_batch(model: ScoreModel, maps: np.ndarray) -> np.ndarray:
    """Positive-class probabilities for a stack of (N, C, H, W) maps."""
    v = confidence_vectors_batch(maps, model.eps).astype(np.float32)
    hid = np.maximum(v @ model.w1.T + model.b1, 0.0)
    logits = (hid @ model.w2.T + model.b2).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p[:, POSITIVE]


def predict(model: ScoreModel, c: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass; returns (probs, logits), both dim 2."""
    v = confidence_vector(c, model.eps)
    if v.shape[0] != model.w1.shape[1]:
        raise ValueError(
            f"map has {c.channels} channels but model expects {model.in_channels}"
        )
    h = np.maximum(model.w1.astype(np.float64) @ v + model.b1, 0.0)
    logits = (model.w2.astype(np.float64) @ h + model.b2).astype(np.float32)
    return softmax2(logits), logits


def score(model: ScoreModel, c: FeatureMap) -> float:
    """Existence score: the positive-class softmax probability."""
    probs, _ = predict(model, c)
    return float(probs[POSITIVE])


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def loss_and_grads(
    model: ScoreModel,
    batch: list[tuple[FeatureMap, int]],
    want_input_grads: bool = False,
) -> tuple[float, Gradients, list[np.ndarray] | None]:
    """Mean cross-entropy over (map, label) pairs with analytic gradients.

    label is 1 for present, 0 for absent. When want_input_grads is set,
    also returns dLoss/dMap for each batch entry (used to train the
    fusion projections).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    n = len(batch)
    w1 = model.w1.astype(np.float64)
    w2 = model.w2.astype(np.float64)

    shapes = {c.data.shape for c, _ in batch}
    if len(shapes) == 1:
        v_all = confidence_vectors_batch(
            np.stack([c.data for c, _ in batch]), model.eps
        )
    else:
        v_all = np.stack([confidence_vector(c, model.eps) for c, _ in batch]
                         ).astype(np.float64)
    labels = np.array([label for _, label in batch])

    pre = v_all @ w1.T + model.b1          # (n, hidden)
    hid = np.maximum(pre, 0.0)
    logits = hid @ w2.T + model.b2          # (n, 2)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    picked = np.maximum(p[np.arange(n), labels], 1e-300)
    loss = float(-np.log(picked).mean())

    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    gw2 = dlogits.T @ hid
    gb2 = dlogits.sum(axis=0)
    dhid = dlogits @ w2
    dpre = dhid * (pre > 0)
    gw1 = dpre.T @ v_all
    gb1 = dpre.sum(axis=0)

    input_grads: list[np.ndarray] | None = None
    if want_input_grads:
        dv = dpre @ w1                      # (n, 2C)
        input_grads = [
            confidence_backward(c, dv[i], model.eps)
            for i, (c, _) in enumerate(batch)
        ]

    grads = Gradients(
        gw1.astype(np.float32), gb1.astype(np.float32),
        gw2.astype(np.float32), gb2.astype(np.float32),
    )
    return loss, grads, input_grads


class Phase(Enum):
    JOINT = "joint"      # update scorer + fusion projections on fused maps
    TPF_ONLY = "tpf"     # scorer only, fed by deepest-level maps


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    negative_ratio: int = 1  # negatives sampled per positive
    phase: Phase = Phase.JOINT
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.negative_ratio < 1:
            raise ValueError("negative_ratio must be >= 1")


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def _sample_pairs(episodes: list[Episode], ratio: int,
                  rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(episode index, class id, label) pairs, one negative draw per
    positive times ratio."""
    pairs = []
    for ei, ep in enumerate(episodes):
        present = sorted(ep.present_classes)
        absent = [cid for cid in ep.class_ids if cid not in ep.present_classes]
        for cid in present:
            pairs.append((ei, cid, 1))
        n_neg = min(len(absent), max(len(present), 1) * ratio)
        if absent and n_neg:
            for cid in rng.choice(absent, size=n_neg, replace=False):
                pairs.append((ei, int(cid), 0))
    return pairs


class _PrototypeCache:
    """Lazy per-episode prototype store; prototypes never change during
    training, so each (episode, class) pair is built at most once."""

    def __init__(self, episodes: list[Episode]):
        self._episodes = episodes
        self._protos: dict[tuple[int, int], object] = {}

    def get(self, ei: int, cid: int):
        key = (ei, cid)
        if key not in self._protos:
            ep = self._episodes[ei]
            self._protos[key] = build_prototype(cid, ep.supports[cid])
        return self._protos[key]


def _episode_maps(ep: Episode, proj: FusionProjector, class_ids: list[int],
                  phase: Phase, protos: _PrototypeCache,
                  ei: int) -> dict[int, FeatureMap]:
    """Training input maps per class: fused in JOINT, deepest in TPF_ONLY."""
    maps = {}
    for cid in class_ids:
        proto = protos.get(ei, cid)
        if phase is Phase.TPF_ONLY:
            maps[cid] = correlate(ep.levels[Level.L4], proto.vectors[Level.L4])
        else:
            per_level = {
                lv: correlate(ep.levels[lv], proto.vectors[lv])
                for lv in ep.levels
            }
            maps[cid] = fuse_levels(per_level, proj)
    return maps


def train(
    model: ScoreModel,
    proj: FusionProjector,
    episodes: list[Episode],
    cfg: TrainConfig,
) -> tuple[ScoreModel, FusionProjector, list[float]]:
    """Plain SGD over sampled (map, label) pairs.

    JOINT updates both the scorer and the fusion projections (loss fed
    by fused maps); TPF_ONLY freezes the projections and trains the
    scorer on deepest-level maps. Returns (model, projections, per-epoch
    mean losses); inputs are not mutated.
    """
    if not episodes:
        raise ValueError("episodes must be nonempty")
    model = model.copy()
    proj = proj.copy()
    rng = np.random.default_rng(cfg.seed)
    protos = _PrototypeCache(episodes)
    losses: list[float] = []

    for _ in range(cfg.epochs):
        pairs = _sample_pairs(episodes, cfg.negative_ratio, rng)
        rng.shuffle(pairs)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[start : start + cfg.batch_size]
            # Group by episode so correlation/fusion runs once per class.
            by_ep: dict[int, list[tuple[int, int]]] = {}
            for ei, cid, label in chunk:
                by_ep.setdefault(ei, []).append((cid, label))

            batch: list[tuple[FeatureMap, int]] = []
            fusion_inputs: list[tuple[int, int]] = []  # parallel (ei, cid)
            for ei, entries in sorted(by_ep.items()):
                maps = _episode_maps(
                    episodes[ei], proj, [cid for cid, _ in entries],
                    cfg.phase, protos, ei,
                )
                for cid, label in entries:
                    batch.append((maps[cid], label))
                    fusion_inputs.append((ei, cid))

            want_input = cfg.phase is Phase.JOINT
            loss, grads, input_grads = loss_and_grads(model, batch, want_input)
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss diverged: {loss}")
            epoch_loss += loss
            n_batches += 1

            lr = cfg.learning_rate
            model.w1 = (model.w1 - lr * grads.w1).astype(np.float32)
            model.b1 = (model.b1 - lr * grads.b1).astype(np.float32)
            model.w2 = (model.w2 - lr * grads.w2).astype(np.float32)
            model.b2 = (model.b2 - lr * grads.b2).astype(np.float32)

            if want_input:
                _apply_fusion_grads(
                    proj, episodes, fusion_inputs, input_grads, lr, protos
                )
        losses.append(epoch_loss / max(n_batches, 1))
    return model, proj, losses


def _apply_fusion_grads(
    proj: FusionProjector,
    episodes: list[Episode],
    fusion_inputs: list[tuple[int, int]],
    input_grads: list[np.ndarray],
    lr: float,
    protos: _PrototypeCache,
) -> None:
    """SGD step on the per-level projections given dLoss/dFusedMap.

    The fused map is the mean over levels of (W_l @ x_l + b_l) at every
    pixel, so each level sees the fused gradient divided by the level
    count; W_l accumulates grad (x) input outer products over pixels.
    """
    n_levels = len(proj.weights)
    gw = {lv: np.zeros_like(w, dtype=np.float64) for lv, w in proj.weights.items()}
    gb = {lv: np.zeros_like(b, dtype=np.float64) for lv, b in proj.biases.items()}
    for (ei, cid), g_fused in zip(fusion_inputs, input_grads):
        ep = episodes[ei]
        proto = protos.get(ei, cid)
        target = ep.levels[Level.L4]
        th, tw = target.height, target.width
        g = g_fused.reshape(proj.out_channels, th * tw) / n_levels
        for lv in proj.weights:
            fm = correlate(ep.levels[lv], proto.vectors[lv])
            if fm.height != th or fm.width != tw:
                fm = downsample_avg(fm, th, tw)
            x = fm.data.reshape(fm.channels, th * tw).astype(np.float64)
            gw[lv] += g @ x.T
            gb[lv] += g.sum(axis=1)
    for lv in proj.weights:
        proj.weights[lv] = (proj.weights[lv] - lr * gw[lv]).astype(np.float32)
        proj.biases[lv] = (proj.biases[lv] - lr * gb[lv]).astype(np.float32)
