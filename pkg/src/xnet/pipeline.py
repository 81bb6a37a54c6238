"""Wiring: fused-image preparation, the three-stream feature pathway, whole
sequence tracking, and the offline multi-domain pretraining routine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import WIDTHS, DeepFeatures, extract, init_backbone, thermal_to_3ch
from .boxes import BBox
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import FramePair, SequenceRecord
from .fim import fim_forward, init_fim_params
from .optim import AdamW
from .pgm import init_student, naive_fusion, pgm_forward
from .tracker import (
    TrackerState,
    fc_forward,
    init_fc_params,
    init_first_frame,
    roi_features,
    track_frame,
)

FEATURE_STRIDE = 2
MODALITIES = ("rgb", "t", "x")


@dataclass
class TrackingModel:
    """All learned pieces of the feature pathway plus instrumentation
    counters (used to prove ablation isolation)."""

    config: RunConfig
    backbones: dict[str, dict[str, T.Tensor]]
    fim_params: dict[str, T.Tensor]
    pgm_params: dict[str, T.Tensor] | None
    counters: dict[str, int] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: RunConfig, pgm_params=None) -> "TrackingModel":
        backbones = {m: init_backbone(config.seed, prefix=m) for m in MODALITIES}
        fim_params = init_fim_params(WIDTHS[-1], config.seed, config.fim_init_noise)
        if config.pgm and pgm_params is None:
            pgm_params = init_student(config.seed)
        return cls(config=config, backbones=backbones, fim_params=fim_params, pgm_params=pgm_params)

    def prepare_pair(self, pair: FramePair) -> None:
        """Attach the fused X image: distilled student when the pixel module
        is on, the element-addition baseline otherwise."""
        if self.config.pgm and self.pgm_params is not None:
            pgm_forward(pair, self.pgm_params)
            self.counters["pgm"] = self.counters.get("pgm", 0) + 1
        else:
            pair.x_modality = T.Tensor(naive_fusion(pair))

    def feature_streams(self, pair: FramePair) -> DeepFeatures:
        if pair.x_modality is None:
            raise ValueError("prepare_pair must run before feature extraction")
        return DeepFeatures(
            d_rgb=extract(pair.rgb, self.backbones["rgb"], prefix="rgb"),
            d_t=extract(thermal_to_3ch(pair.thermal), self.backbones["t"], prefix="t"),
            d_x=extract(pair.x_modality, self.backbones["x"], prefix="x"),
        )

    def frame_features(self, pair: FramePair):
        """Frozen-pathway features for tracking: [2C, H/2, W/2] plus the
        attention maps when the interaction module is enabled."""
        with T.no_grad():
            feats = self.feature_streams(pair)
            d_f, maps = fim_forward(feats, self.fim_params, enabled=self.config.fim,
                                    fill=self.config.fim_shift_fill)
        if self.config.fim:
            self.counters["fim"] = self.counters.get("fim", 0) + 1
        return d_f, maps

    def feature_params(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for m in MODALITIES:
            out.update(self.backbones[m])
        out.update(self.fim_params)
        return out

    def save(self, path) -> None:
        params = dict(self.feature_params())
        if self.pgm_params is not None:
            params.update({f"pgm.{k}": v for k, v in self.pgm_params.items()})
        save_checkpoint(params, path)

    def load_weights(self, path) -> None:
        loaded = load_checkpoint(path)
        pgm = {k[len("pgm.") :]: v for k, v in loaded.items() if k.startswith("pgm.")}
        if pgm:
            self.pgm_params = {k: T.Tensor(v, requires_grad=True) for k, v in pgm.items()}
        own = self.feature_params()
        for name, arr in loaded.items():
            if name.startswith("pgm."):
                continue
            if name not in own:
                raise ValueError(f"checkpoint parameter {name!r} does not match the model")
            if tuple(arr.shape) != own[name].shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, model expects {own[name].shape}"
                )
            own[name].data = np.ascontiguousarray(arr, dtype=T.active_dtype())


def track_sequence(model: TrackingModel, record: SequenceRecord, seed: int) -> TrackerState:
    """Initialize on frame 1 with the ground truth, then track every frame."""
    state = init_first_frame(model, record.frames[0], record.gt[0], model.config, seed)
    for pair in record.frames[1:]:
        track_frame(state, pair)
    return state


def predicted_boxes(state: TrackerState) -> list[BBox]:
    return [r.box for r in state.results]


# ---------------------------------------------------------------------------
# offline multi-domain pretraining
# ---------------------------------------------------------------------------

def pretrain(model: TrackingModel, sequences: list[SequenceRecord], epochs: int,
             seed: int = 0) -> list[float]:
    """Multi-domain training of the feature pathway (shared fc4-5, one fc6
    branch per sequence).  Per epoch and domain: sample frames, harvest
    positive/negative boxes, one accumulated AdamW step at the offline rate.

    Returns the per-epoch mean loss trace.
    """
    from .boxes import harvest_samples

    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0FF]))
    in_dim = 2 * WIDTHS[-1] * 3 * 3
    fc_shared = init_fc_params(in_dim, cfg.fc_hidden, seed)
    fc6_branches = []
    for k in range(len(sequences)):
        branch = init_fc_params(in_dim, cfg.fc_hidden, seed + 1000 + k)
        fc6_branches.append({"fc6.w": branch["fc6.w"], "fc6.b": branch["fc6.b"]})

    feature_params = list(model.feature_params().values())
    shared_fc = [fc_shared["fc4.w"], fc_shared["fc4.b"], fc_shared["fc5.w"], fc_shared["fc5.b"]]
    branch_params = [p for br in fc6_branches for p in br.values()]
    opt = AdamW(
        [(feature_params, cfg.pretrain_lr), (shared_fc, cfg.pretrain_lr), (branch_params, cfg.pretrain_lr)],
        weight_decay=cfg.weight_decay,
    )

    trace = []
    for _ in range(epochs):
        epoch_losses = []
        for dom, record in enumerate(sequences):
            frame_ids = rng.choice(len(record.frames), size=min(cfg.pretrain_frames, len(record.frames)), replace=False)
            opt.zero_grad()
            dom_losses = []
            for fi in frame_ids:
                pair, gt = record.frames[fi], record.gt[fi]
                model.prepare_pair(pair)
                feats = model.feature_streams(pair)
                d_f, _ = fim_forward(feats, model.fim_params, enabled=cfg.fim, fill=cfg.fim_shift_fill)
                ss = harvest_samples(gt, cfg.pretrain_pos, cfg.pretrain_neg, rng,
                                     pair.width, pair.height, pos_iou=cfg.pos_iou, neg_iou=cfg.neg_iou)
                boxes = np.stack([b.as_array() for b in ss.boxes]) / float(FEATURE_STRIDE)
                pooled = T.roi_align(d_f, boxes, out_size=3, samples=2)
                flat = T.reshape(pooled, (len(ss.boxes), -1))
                params = dict(fc_shared)
                params.update(fc6_branches[dom])
                logits = fc_forward(flat, params, dropout=cfg.fc_dropout, rng=rng, training=True)
                labels = np.where(ss.labels == 1, 0, 1).astype(np.int64)
                loss = T.softmax_cross_entropy(logits, labels)
                T.backward(loss)  # per-frame backward: keeps graph memory flat
                dom_losses.append(loss.item())
            opt.step()
            epoch_losses.append(float(np.mean(dom_losses)))
        trace.append(float(np.mean(epoch_losses)))
    return trace
