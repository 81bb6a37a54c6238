"""Pixel-level generation: a small fusion student distilled from a teacher.

The teacher is pluggable; the default is an analytic fusion rule (max
luminance blended with the gradient-dominant source, chroma kept from RGB).
The student is a 4-conv network on the luminance/thermal channels whose
sigmoid output learns to mimic the teacher on noise-perturbed inputs, so the
generated X image stays stable under sensor noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import FramePair
from .imageops import grad_mag, luma, replace_luma

STUDENT_CHANNELS = 16
MAX_STUDENT_PARAMS = 100_000


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def fuse_luminance(y_rgb: np.ndarray, th: np.ndarray) -> np.ndarray:
    """Blend max(luma, thermal) with whichever source has the stronger
    local gradient (ties fall back to the max)."""
    m = np.maximum(y_rgb, th)
    g_rgb = grad_mag(y_rgb)
    g_th = grad_mag(th)
    select = np.where(g_rgb > g_th, y_rgb, np.where(g_th > g_rgb, th, m))
    return 0.5 * m + 0.5 * select


def analytic_teacher(pair: FramePair) -> np.ndarray:
    """Deterministic fusion oracle: [3,H,W] in [0,1]."""
    rgb = pair.rgb.data
    th = pair.thermal.data[0]
    fused_y = fuse_luminance(luma(rgb), th)
    return replace_luma(rgb, fused_y)


def naive_fusion(pair: FramePair) -> np.ndarray:
    """Pixel-level element addition baseline (the no-distillation variant)."""
    rgb = pair.rgb.data
    th = pair.thermal.data
    return np.clip(0.5 * rgb + 0.5 * th, 0.0, 1.0)


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_student(seed: int = 0) -> dict[str, T.Tensor]:
    """Two 2-layer encoders (rgb, thermal), concat, two fusion convs.

    The rgb branch sees all three channels: the teacher keeps rgb chroma, so
    the student needs it to reconstruct color.  The final conv is
    zero-initialized so the untrained student emits a flat sigmoid(0)=0.5
    image.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9F1]))
    c = STUDENT_CHANNELS
    p = {
        "enc_rgb.0.w": _he(rng, (c, 3, 3, 3)),
        "enc_rgb.0.b": np.zeros(c),
        "enc_rgb.1.w": _he(rng, (c, c, 3, 3)),
        "enc_rgb.1.b": np.zeros(c),
        "enc_t.0.w": _he(rng, (c, 1, 3, 3)),
        "enc_t.0.b": np.zeros(c),
        "enc_t.1.w": _he(rng, (c, c, 3, 3)),
        "enc_t.1.b": np.zeros(c),
        "fuse.0.w": _he(rng, (c, 2 * c, 3, 3)),
        "fuse.0.b": np.zeros(c),
        "fuse.1.w": np.zeros((3, c, 3, 3)),
        "fuse.1.b": np.zeros(3),
    }
    params = {k: T.Tensor(v, requires_grad=True) for k, v in p.items()}
    assert param_count(params) < MAX_STUDENT_PARAMS
    return params


def param_count(params: dict[str, T.Tensor]) -> int:
    return sum(p.size for p in params.values())


def _student_net(rgb_batch: T.Tensor, th_batch: T.Tensor, params) -> T.Tensor:
    """[N,3,H,W] rgb + [N,1,H,W] thermal -> [N,3,H,W] fused, sigmoid-bounded."""
    a = T.relu(T.conv2d(rgb_batch, params["enc_rgb.0.w"], params["enc_rgb.0.b"], padding=1))
    a = T.relu(T.conv2d(a, params["enc_rgb.1.w"], params["enc_rgb.1.b"], padding=1))
    b = T.relu(T.conv2d(th_batch, params["enc_t.0.w"], params["enc_t.0.b"], padding=1))
    b = T.relu(T.conv2d(b, params["enc_t.1.w"], params["enc_t.1.b"], padding=1))
    h = T.concat([a, b], axis=1)
    h = T.relu(T.conv2d(h, params["fuse.0.w"], params["fuse.0.b"], padding=1))
    h = T.conv2d(h, params["fuse.1.w"], params["fuse.1.b"], padding=1)
    return T.sigmoid(h)


def pgm_forward(pair: FramePair, params) -> T.Tensor:
    """Generate the X image for one frame pair and attach it to the pair."""
    rgb = pair.rgb.data[None]
    th = pair.thermal.data[None]
    with T.no_grad():
        out = _student_net(T.Tensor(rgb), T.Tensor(th), params)
    x = T.Tensor(out.data[0])
    pair.x_modality = x
    return x


def distill_train(dataset, teacher, epochs: int, batch: int = 4,
                  noise_sigma: float = 0.05, seed: int = 0, lr: float = 1e-2,
                  critic_iters: int = 5):
    """Train the student to match the teacher under input noise.

    Each epoch runs ``critic_iters`` batch selections and updates (the inner
    iteration count of the training loop).  The teacher sees clean inputs;
    the student sees the same images with additive Gaussian noise of
    ``noise_sigma``.  Returns the trained params and the per-epoch mean L1
    trace.  Aborts if the loss exceeds 10x its initial value for 3
    consecutive epochs.
    """
    from .optim import AdamW

    if not dataset:
        raise ValueError("distillation needs a non-empty dataset")
    params = init_student(seed)
    trace: list[float] = []
    if epochs <= 0:
        return params, trace

    rgbs = np.stack([p.rgb.data for p in dataset])  # [M,3,H,W]
    thermals = np.stack([p.thermal.data for p in dataset])
    targets = np.stack([teacher(p) for p in dataset])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9F2]))
    opt = AdamW.single(list(params.values()), lr=lr, weight_decay=0.0)
    initial = None
    bad_epochs = 0
    m = len(dataset)
    for epoch in range(epochs):
        if epoch == (3 * epochs) // 4:
            # settle the tail: smaller steps once most of the fitting is done
            opt.groups[0] = (opt.groups[0][0], lr * 0.5)
        losses = []
        for _ in range(critic_iters):
            idx = rng.choice(m, size=min(batch, m), replace=False)
            rgb = rgbs[idx]
            th = thermals[idx]
            if noise_sigma > 0:
                rgb = np.clip(rgb + rng.normal(0.0, noise_sigma, rgb.shape), 0.0, 1.0)
                th = np.clip(th + rng.normal(0.0, noise_sigma, th.shape), 0.0, 1.0)
            opt.zero_grad()
            out = _student_net(T.Tensor(rgb), T.Tensor(th), params)
            loss = T.l1_loss(out, T.Tensor(targets[idx]))
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            if initial is None:
                initial = max(losses[0], 1e-12)
        epoch_loss = float(np.mean(losses))
        trace.append(epoch_loss)
        if epoch_loss > 10.0 * initial:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise RuntimeError(
                    f"distillation diverged: loss {epoch_loss:.4g} above 10x the initial "
                    f"{initial:.4g} for 3 consecutive epochs (epoch {epoch})"
                )
        else:
            bad_epochs = 0
    return params, trace


def default_toy_set(seed: int = 0, n_pairs: int = 10) -> list[FramePair]:
    """Small mixed-challenge frame set for distillation: normal/low
    illumination and partial thermal crossover, with sensor noise."""
    from .data import SynthSpec, synth_sequence

    specs = [
        ("normal", 0.0), ("low", 0.0), ("low", 0.9), ("normal", 0.5), ("low", 0.5),
    ]
    pairs: list[FramePair] = []
    per = max(1, (n_pairs + len(specs) - 1) // len(specs))
    for i, (illum, crossover) in enumerate(specs):
        rec = synth_sequence(SynthSpec(
            n_frames=max(per, 2), seed=seed * 100 + 50 + i, height=32, width=48,
            target_size=10, distractors=1, noise_sigma=0.03,
            illumination=illum, thermal_crossover=crossover,
        ))
        pairs.extend(rec.frames[:per])
    return pairs[:n_pairs]


def distill_loss(params, dataset, teacher) -> float:
    """Clean-input mean L1 between student and teacher over a dataset."""
    total = 0.0
    for pair in dataset:
        rgb = pair.rgb.data[None]
        th = pair.thermal.data[None]
        with T.no_grad():
            out = _student_net(T.Tensor(rgb), T.Tensor(th), params)
        total += float(np.abs(out.data[0] - teacher(pair)).mean())
    return total / len(dataset)
