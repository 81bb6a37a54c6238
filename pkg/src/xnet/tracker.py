"""Online discriminative tracking: first-frame initialization, Gaussian
candidate search, fc-head scoring, box regression, short/long-term updates,
and the confidence-gated hand-off to decision-level refinement.

The backbone/fusion stack is frozen during tracking; only the three fc
layers adapt online, trained from feature buffers harvested on confident
frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import BBox, clip_box, decode_deltas, encode_deltas, gaussian_sample, harvest_samples
from .config import RunConfig
from .drm import drm_decide, flow_reposition, refine_box
from .imageops import luma
from .optim import AdamW


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def init_fc_params(in_dim: int, hidden: int, seed: int) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFC]))
    def he(shape):
        return rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)

    raw = {
        "fc4.w": he((in_dim, hidden)),
        "fc4.b": np.zeros(hidden),
        "fc5.w": he((hidden, hidden)),
        "fc5.b": np.zeros(hidden),
        "fc6.w": rng.normal(0.0, 0.01, (hidden, 2)),
        "fc6.b": np.zeros(2),
    }
    return {k: T.Tensor(v, requires_grad=True) for k, v in raw.items()}


def reinit_fc6(fc_params: dict, seed: int) -> None:
    """Fresh final layer for a new sequence (per-sequence branch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFC6]))
    hidden = fc_params["fc6.w"].shape[0]
    fc_params["fc6.w"] = T.Tensor(rng.normal(0.0, 0.01, (hidden, 2)), requires_grad=True)
    fc_params["fc6.b"] = T.Tensor(np.zeros(2), requires_grad=True)


def fc_forward(feats: T.Tensor, fc_params: dict, dropout: float = 0.0,
               rng: np.random.Generator | None = None, training: bool = False) -> T.Tensor:
    """[N,D] roi features -> [N,2] (positive, negative) logits."""
    h = T.relu(T.linear(feats, fc_params["fc4.w"], fc_params["fc4.b"]))
    if training:
        h = T.dropout(h, dropout, rng, training=True)
    h = T.relu(T.linear(h, fc_params["fc5.w"], fc_params["fc5.b"]))
    if training:
        h = T.dropout(h, dropout, rng, training=True)
    return T.linear(h, fc_params["fc6.w"], fc_params["fc6.b"])


def classify(feats: np.ndarray, fc_params: dict) -> np.ndarray:
    """Inference-mode logits (dropout off)."""
    with T.no_grad():
        logits = fc_forward(T.Tensor(feats), fc_params)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("classifier produced non-finite scores")
    return logits.data


def positive_prob(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the positive class per row."""
    margin = np.clip(logits[..., 0] - logits[..., 1], -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-margin))


def train_fc(fc_params: dict, pos_feats: np.ndarray, neg_feats: np.ndarray,
             epochs: int, config: RunConfig, rng: np.random.Generator) -> None:
    """Minibatch fine-tuning of fc4-6 (lower learning rate on fc6)."""
    opt = AdamW(
        [
            ([fc_params["fc4.w"], fc_params["fc4.b"], fc_params["fc5.w"], fc_params["fc5.b"]], config.lr_fc45),
            ([fc_params["fc6.w"], fc_params["fc6.b"]], config.lr_fc6),
        ],
        weight_decay=config.weight_decay,
    )
    n_pos, n_neg = len(pos_feats), len(neg_feats)
    for _ in range(epochs):
        pi = rng.choice(n_pos, size=min(config.batch_pos, n_pos), replace=n_pos < config.batch_pos)
        ni = rng.choice(n_neg, size=min(config.batch_neg, n_neg), replace=n_neg < config.batch_neg)
        batch = np.concatenate([pos_feats[pi], neg_feats[ni]])
        labels = np.concatenate([np.zeros(len(pi), dtype=np.int64), np.ones(len(ni), dtype=np.int64)])
        # label 0 = positive class (first logit), 1 = negative class
        opt.zero_grad()
        logits = fc_forward(T.Tensor(batch), fc_params, dropout=config.fc_dropout, rng=rng, training=True)
        loss = T.softmax_cross_entropy(logits, labels)
        T.backward(loss)
        opt.step()


# ---------------------------------------------------------------------------
# bounding-box regressor (trained on the first frame only)
# ---------------------------------------------------------------------------

@dataclass
class RidgeRegressor:
    w: np.ndarray  # [D+1, 4], last row is the intercept

    @classmethod
    def fit(cls, feats: np.ndarray, anchors: list[BBox], target: BBox, lam: float) -> "RidgeRegressor":
        x = np.concatenate([feats, np.ones((len(feats), 1), dtype=feats.dtype)], axis=1)
        y = np.stack([encode_deltas(a, target) for a in anchors])
        a = x.T @ x + lam * np.eye(x.shape[1], dtype=x.dtype)
        w = np.linalg.solve(a, x.T @ y)
        return cls(w=w)

    @classmethod
    def zero(cls, dim: int) -> "RidgeRegressor":
        return cls(w=np.zeros((dim + 1, 4)))

    def apply(self, feat: np.ndarray, box: BBox) -> BBox:
        deltas = np.concatenate([feat, [1.0]]) @ self.w
        return decode_deltas(box, deltas)


# ---------------------------------------------------------------------------
# tracker state machine
# ---------------------------------------------------------------------------

@dataclass
class FeatureBuffer:
    """FIFO store of per-frame (positive, negative) roi features."""

    capacity: int
    frames: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def push(self, pos: np.ndarray, neg: np.ndarray) -> None:
        self.frames.append((pos, neg))
        while len(self.frames) > self.capacity:
            self.frames.pop(0)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([p for p, _ in self.frames]),
            np.concatenate([n for _, n in self.frames]),
        )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class Candidate:
    box: BBox
    pos_score: float
    neg_score: float


@dataclass
class FrameResult:
    frame: int
    box: BBox
    confidence: float
    branch: str  # refine | flow | none


@dataclass
class TrackerState:
    model: object  # TrackingModel (duck-typed: prepare_pair / frame_features)
    config: RunConfig
    fc_params: dict
    regressor: RidgeRegressor
    short_buffer: FeatureBuffer
    long_buffer: FeatureBuffer
    current_box: BBox
    frame_index: int
    prev_pair: object
    rng_sample: np.random.Generator
    rng_update: np.random.Generator
    score_history: list[float] = field(default_factory=list)
    results: list[FrameResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    last_flow: object = None
    flow_log: list = field(default_factory=list)  # (frame, FlowDiagnostics)


def roi_features(d_f: T.Tensor, boxes: list[BBox], stride: int = 2) -> np.ndarray:
    """RoI-align each box on the feature map and flatten to [N, C*3*3]."""
    arr = np.stack([b.as_array() for b in boxes]) / float(stride)
    with T.no_grad():
        pooled = T.roi_align(d_f, arr, out_size=3, samples=2)
    n = pooled.shape[0]
    return pooled.data.reshape(n, -1)


def init_first_frame(model, pair, gt: BBox, config: RunConfig, seed: int) -> TrackerState:
    """Algorithm start-up: sample pools, fc fine-tuning, regressor fit,
    buffer seeding."""
    ss = np.random.SeedSequence([seed, 0x7AC])
    rng_harvest, rng_train, rng_sample, rng_update = [np.random.default_rng(s) for s in ss.spawn(4)]

    model.prepare_pair(pair)
    d_f, _ = model.frame_features(pair)
    h, w = pair.height, pair.width

    samples = harvest_samples(gt, config.init_pos, config.init_neg, rng_harvest, w, h,
                              pos_iou=config.pos_iou, neg_iou=config.neg_iou)
    feats = roi_features(d_f, samples.boxes)
    pos_feats = feats[: config.init_pos]
    neg_feats = feats[config.init_pos :]

    fc_params = init_fc_params(feats.shape[1], config.fc_hidden, seed)
    train_fc(fc_params, pos_feats, neg_feats, config.init_epochs, config, rng_train)

    reg_samples = harvest_samples(gt, config.regressor_samples, 0, rng_harvest, w, h,
                                  pos_iou=config.regressor_iou, neg_iou=config.neg_iou)
    reg_feats = roi_features(d_f, reg_samples.boxes)
    regressor = RidgeRegressor.fit(reg_feats, reg_samples.boxes, gt, config.ridge_lambda)

    short_buffer = FeatureBuffer(config.short_capacity)
    long_buffer = FeatureBuffer(config.long_capacity)
    seed_pos = pos_feats[: config.update_pos]
    seed_neg = neg_feats[: config.update_neg]
    short_buffer.push(seed_pos, seed_neg)
    long_buffer.push(seed_pos, seed_neg)

    state = TrackerState(
        model=model,
        config=config,
        fc_params=fc_params,
        regressor=regressor,
        short_buffer=short_buffer,
        long_buffer=long_buffer,
        current_box=gt,
        frame_index=2,
        prev_pair=pair,
        rng_sample=rng_sample,
        rng_update=rng_update,
    )
    state.results.append(FrameResult(frame=1, box=gt, confidence=0.0, branch="none"))
    return state


def update_model(state: TrackerState, kind: str) -> None:
    """Fine-tune fc4-6 from the chosen buffer; empty buffers skip with a
    warning.  Backbone and interaction parameters are never touched."""
    buf = state.short_buffer if kind == "short" else state.long_buffer
    if len(buf) == 0:
        state.warnings.append(f"frame {state.frame_index}: {kind} update skipped, empty buffer")
        return
    pos, neg = buf.stacked()
    train_fc(state.fc_params, pos, neg, state.config.update_epochs, state.config, state.rng_update)


def _top_k_stable(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ties broken by candidate index."""
    return np.argsort(-scores, kind="stable")[:k]


def _mean_box(boxes: list[BBox]) -> BBox:
    return BBox(
        float(np.mean([b.x for b in boxes])),
        float(np.mean([b.y for b in boxes])),
        float(np.mean([b.w for b in boxes])),
        float(np.mean([b.h for b in boxes])),
    )


def track_frame(state: TrackerState, pair) -> tuple[BBox, float]:
    """One step of the online loop; returns the final box and the
    confidence score handed to the refinement gate."""
    cfg = state.config
    model = state.model
    h, w = pair.height, pair.width

    model.prepare_pair(pair)
    d_f, _ = model.frame_features(pair)

    cands = gaussian_sample(state.current_box, cfg.n_candidates, cfg.trans_sigma,
                            cfg.scale_sigma, state.rng_sample, cfg.scale_base)
    cands = [clip_box(b, w, h) for b in cands]
    feats = roi_features(d_f, cands)
    logits = classify(feats, state.fc_params)

    top = _top_k_stable(logits[:, 0], cfg.top_k)
    z_star = _mean_box([cands[i] for i in top])
    c_s = float(np.mean(logits[top, 0] - logits[top, 1]))

    z_feat = roi_features(d_f, [z_star])
    f_plus = float(positive_prob(classify(z_feat, state.fc_params))[0])
    state.score_history.append(f_plus)

    if f_plus > cfg.success_threshold:
        ss = harvest_samples(z_star, cfg.update_pos, cfg.update_neg, state.rng_sample, w, h,
                             pos_iou=cfg.pos_iou, neg_iou=cfg.neg_iou)
        upd = roi_features(d_f, ss.boxes)
        state.short_buffer.push(upd[: cfg.update_pos], upd[cfg.update_pos :])
        state.long_buffer.push(upd[: cfg.update_pos], upd[cfg.update_pos :])
        z_star = clip_box(state.regressor.apply(z_feat[0], z_star), w, h)
    elif f_plus < cfg.success_threshold:
        update_model(state, "short")
    if state.frame_index % cfg.long_interval == 0 and f_plus >= cfg.success_threshold:
        update_model(state, "long")

    if cfg.drm:
        def scorer(boxes):
            return positive_prob(classify(roi_features(d_f, boxes), state.fc_params))

        def flow_fn(box):
            prev_gray = luma(state.prev_pair.x_modality.data)
            curr_gray = luma(pair.x_modality.data)
            out, diag = flow_reposition(state.current_box, box, prev_gray, curr_gray,
                                        n_levels=cfg.pyramid_levels, window=cfg.lk_window,
                                        iters=cfg.lk_iters, det_eps=cfg.lk_det_eps,
                                        max_flow_frac=cfg.max_flow_frac, grid=cfg.flow_grid)
            if diag.untrackable:
                state.warnings.append(f"frame {state.frame_index}: flow untrackable, box kept")
            model.counters["drm_flow_points"] = model.counters.get("drm_flow_points", 0) + len(diag.points)
            state.last_flow = diag
            state.flow_log.append((state.frame_index, diag))
            return out

        final, branch = drm_decide(c_s, z_star, lambda b: refine_box(scorer, b), flow_fn)
        final = clip_box(final, w, h)
        model.counters[f"drm_{branch}"] = model.counters.get(f"drm_{branch}", 0) + 1
    else:
        final, branch = z_star, "none"

    state.results.append(FrameResult(frame=state.frame_index, box=final, confidence=c_s, branch=branch))
    state.prev_pair = pair
    state.current_box = final
    state.frame_index += 1
    return final, c_s
