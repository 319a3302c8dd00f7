"""AdamW, the step-decay schedule, heatmap readout, PCK, the training loop and
the gradient-check suite."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as B
from . import fusion as Fu
from . import model as M
from . import tensor as T
from .io import DataConfig, RunConfig, TrainConfig, dump_config, write_checkpoint
from .nn import Params
from .synth import Dataset, PersonClip, augment, gt_heatmaps
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epoch", "lr", "train_loss", "eval_pck@0.05", "eval_pck@0.1", "eval_pck@0.2")
ALPHAS = (0.05, 0.1, 0.2)


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# optimiser and schedule
# --------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("invalid AdamW hyperparameters")


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimState, lr: float | None = None) -> OptimState:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam step."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.DimensionError(f"adamw_step: grad {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        data = p.data * p.dtype.type(1 - lr * state.weight_decay)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def lr_at(epoch: int, base_lr: float, every: int = 5) -> float:
    """Halve the learning rate every ``every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * 0.5 ** (epoch // every)


# --------------------------------------------------------------------------
# readout and metrics
# --------------------------------------------------------------------------

def argmax_decode(heatmaps, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint argmax with a quarter-pixel shift towards the higher neighbour.

    ``heatmaps`` is ``[..., N, h, w]``; returns ``(xy [..., N, 2], score [..., N])``
    in input-image pixels.
    """
    hm = np.asarray(getattr(heatmaps, "data", heatmaps), dtype=np.float64)
    *lead, n, h, w = hm.shape
    flat = hm.reshape(-1, h * w)
    idx = flat.argmax(axis=1)
    score = flat[np.arange(flat.shape[0]), idx]
    u = (idx % w).astype(np.float64)
    v = (idx // w).astype(np.float64)
    maps = hm.reshape(-1, h, w)
    rows = np.arange(maps.shape[0])
    ui, vi = idx % w, idx // w
    inner_x = (ui > 0) & (ui < w - 1)
    inner_y = (vi > 0) & (vi < h - 1)
    dx = np.zeros_like(u)
    dy = np.zeros_like(v)
    dx[inner_x] = np.sign(maps[rows[inner_x], vi[inner_x], ui[inner_x] + 1]
                          - maps[rows[inner_x], vi[inner_x], ui[inner_x] - 1])
    dy[inner_y] = np.sign(maps[rows[inner_y], vi[inner_y] + 1, ui[inner_y]]
                          - maps[rows[inner_y], vi[inner_y] - 1, ui[inner_y]])
    xy = np.stack([(u + 0.25 * dx) * stride, (v + 0.25 * dy) * stride], axis=-1)
    return xy.reshape(*lead, n, 2), score.reshape(*lead, n)


def skeleton_norm(keypoints: np.ndarray) -> float:
    """``max(bbox_h, bbox_w)`` of a ground-truth skeleton ``[N, 2+]``."""
    kp = np.asarray(keypoints)[:, :2]
    return float(np.max(kp.max(axis=0) - kp.min(axis=0)))


def pck(pred: np.ndarray, gt: np.ndarray, alpha: float, norm: float, joints=None) -> float | None:
    """Fraction of selected joints within ``alpha * norm`` (inclusive) of ground truth.

    ``gt`` is ``[N, 3]``; by default the visible joints are selected. Returns
    None when no joint is selected.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    gt = np.asarray(gt, dtype=np.float64)
    sel = gt[:, 2] > 0 if joints is None else np.asarray(joints, dtype=bool)
    if not sel.any():
        return None
    d = np.linalg.norm(np.asarray(pred, dtype=np.float64)[sel, :2] - gt[sel, :2], axis=1)
    return float(np.mean(d <= alpha * norm))


@dataclass
class EvalReport:
    split: str
    per_joint: dict[float, np.ndarray]  # alpha -> [N] PCK, NaN where no visible joint
    mean: dict[float, float]  # alpha -> pooled PCK over all visible joints
    loss_curve: list[float] = field(default_factory=list)


def predict_keypoints(params: Params, cfg: M.ModelConfig, clips: list[PersonClip], batch: int = 16):
    preds, scores = [], []
    for i in range(0, len(clips), batch):
        frames = np.stack([c.frames for c in clips[i:i + batch]])
        with T.no_grad():
            heat = M.predict(frames, params, cfg)
        xy, s = argmax_decode(heat, cfg.backbone.heatmap_stride)
        preds.append(xy)
        scores.append(s)
    return np.concatenate(preds), np.concatenate(scores)


def evaluate(params: Params, cfg: M.ModelConfig, dataset: Dataset | list[PersonClip], split: str = "eval",
             alphas=ALPHAS) -> EvalReport:
    clips = dataset.clips if isinstance(dataset, Dataset) else list(dataset)
    preds, _ = predict_keypoints(params, cfg, clips)
    n = cfg.backbone.n_joints
    hits = {a: np.zeros(n) for a in alphas}
    counts = np.zeros(n)
    for pred, clip in zip(preds, clips):
        gt = clip.current_keypoints
        norm = skeleton_norm(gt)
        vis = gt[:, 2] > 0
        d = np.linalg.norm(pred - gt[:, :2], axis=1)
        counts += vis
        for a in alphas:
            hits[a] += vis & (d <= a * norm)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = {a: np.where(counts > 0, hits[a] / counts, np.nan) for a in alphas}
    total = counts.sum()
    mean = {a: float(hits[a].sum() / total) if total else float("nan") for a in alphas}
    return EvalReport(split=split, per_joint=per_joint, mean=mean)


def occluded_pck(params: Params, cfg: M.ModelConfig, dataset: Dataset | list[PersonClip], alpha: float = 0.1) -> float:
    """PCK over centre-frame joints that are inside the image but flagged invisible."""
    clips = dataset.clips if isinstance(dataset, Dataset) else list(dataset)
    preds, _ = predict_keypoints(params, cfg, clips)
    hits = total = 0
    for pred, clip in zip(preds, clips):
        gt = clip.current_keypoints
        _, _, H, W = clip.frames.shape
        inside = (gt[:, 0] >= -0.5) & (gt[:, 0] < W - 0.5) & (gt[:, 1] >= -0.5) & (gt[:, 1] < H - 0.5)
        occ = inside & (gt[:, 2] == 0)
        if occ.any():
            d = np.linalg.norm(pred[occ] - gt[occ, :2], axis=1)
            hits += int(np.sum(d <= alpha * skeleton_norm(gt)))
            total += int(occ.sum())
    return hits / total if total else float("nan")


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    report: EvalReport
    metrics: list[dict]
    losses: list[float]
    checkpoint: Path | None = None


def _targets(clips: list[PersonClip], cfg: M.ModelConfig, sigma: float, supervise_occluded: bool):
    kp = np.stack([c.current_keypoints for c in clips]).copy()
    _, _, H, W = clips[0].frames.shape
    if supervise_occluded:
        inside = (kp[..., 0] >= -0.5) & (kp[..., 0] < W - 0.5) & (kp[..., 1] >= -0.5) & (kp[..., 1] < H - 0.5)
        kp[..., 2] = inside
    return gt_heatmaps(kp, H, W, sigma, cfg.backbone.heatmap_stride), kp[..., 2] > 0


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(model_cfg: M.ModelConfig, dataset: Dataset | list[PersonClip], epochs: int, seed: int,
          train_cfg: TrainConfig | None = None, eval_dataset=None, out_dir: str | Path | None = None,
          data_cfg: DataConfig | None = None) -> TrainResult:
    """Seeded training loop; writes ``metrics.csv``, ``model.ckpt`` and ``config.ini`` to ``out_dir``."""
    tc = train_cfg or TrainConfig()
    clips = dataset.clips if isinstance(dataset, Dataset) else list(dataset)
    if not clips:
        raise ValueError("train: dataset is empty")
    eval_clips = clips if eval_dataset is None else (
        eval_dataset.clips if isinstance(eval_dataset, Dataset) else list(eval_dataset))
    rng = np.random.default_rng(seed)
    params = M.init_params(model_cfg, seed)
    state = OptimState(lr=tc.base_lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps, weight_decay=tc.weight_decay)
    metrics: list[dict] = []
    losses: list[float] = []
    step = 0
    done = False
    for epoch in range(epochs):
        lr = lr_at(epoch, tc.base_lr, tc.lr_decay_every)
        order = rng.permutation(len(clips))
        for start in range(0, len(order), tc.batch_size):
            batch = [clips[i] for i in order[start:start + tc.batch_size]]
            if tc.augment:
                batch = [augment(c, rng) for c in batch]
            frames = np.stack([c.frames for c in batch])
            target, vis = _targets(batch, model_cfg, tc.sigma, tc.supervise_occluded)
            with T.Tape() as tape:
                heat = M.predict(frames, params, model_cfg)
                value = M.loss(heat, target, vis)
            if not np.isfinite(value.item()):
                bad = [n for n, p in params.items() if not np.all(np.isfinite(p.data))]
                where = f"parameter {bad[0]}" if bad else (tape.first_nonfinite() or "loss")
                raise TrainingError(f"non-finite loss at step {step}; first non-finite tensor: {where}")
            tape.backward(value)
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, lr)
            for p in params.values():
                p.grad = None
            step += 1
            losses.append(value.item())
            row = {"step": step, "epoch": epoch, "lr": lr, "train_loss": value.item()}
            if tc.eval_every and step % tc.eval_every == 0:
                rep = evaluate(params, model_cfg, eval_clips)
                row.update({f"eval_pck@{a}": rep.mean[a] for a in ALPHAS})
            metrics.append(row)
            if tc.max_steps and step >= tc.max_steps:
                done = True
                break
        if done:
            break
    report = evaluate(params, model_cfg, eval_clips, split="train" if eval_dataset is None else "eval")
    report.loss_curve = losses
    if metrics:
        metrics[-1].update({f"eval_pck@{a}": report.mean[a] for a in ALPHAS})
    result = TrainResult(params=params, report=report, metrics=metrics, losses=losses)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", metrics)
        write_checkpoint(out / "model.ckpt", {n: p.data for n, p in params.items()})
        (out / "config.ini").write_text(dump_config(RunConfig(model=model_cfg, train=tc, data=data_cfg or DataConfig())))
        result.checkpoint = out / "model.ckpt"
    return result


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in metrics:
            w.writerow([row["step"], row["epoch"], _fmt(row["lr"]), _fmt(row["train_loss"])]
                       + [_fmt(row.get(f"eval_pck@{a}")) for a in ALPHAS])


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}


# --------------------------------------------------------------------------
# gradient-check suite
# --------------------------------------------------------------------------

@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    passed: bool


def _subset_gradcheck(f, params: Params, rng, per_group: int, eps: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter tensor on ``per_group`` random coordinates.

    The error floor scales with the loss: central differences carry roundoff
    of order ``|f| * 1e-16 / eps``, which swamps gradients that are exactly
    zero (e.g. key biases under softmax shift invariance).
    """
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        out = f(params)
    tape.backward(out)
    floor = max(1e-6, 1e-5 * abs(out.item()))
    errs = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_group, flat.size), replace=False)
        num = np.empty(len(picks))
        for k, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                hi = f(params).item()
            flat[i] = orig - eps
            with T.no_grad():
                lo = f(params).item()
            flat[i] = orig
            num[k] = (hi - lo) / (2 * eps)
        errs[name] = T.relative_error(analytic.reshape(-1)[picks], num, floor)
        p.grad = None
    return errs


def micro_config() -> M.ModelConfig:
    """The end-to-end gradcheck model: C=8, depth 1, one JTA layer, N=2, T=1, 32x32."""
    return M.ModelConfig(
        backbone=B.BackboneConfig(image_h=32, image_w=32, channels=8, depth=1, heads=1, n_joints=2,
                                  decoder_mid_channels=8),
        fusion=Fu.FusionConfig(jta_layers=1, gra_layers=1, temporal_span=1, heads=1),
    )


def _op_cases(rng):
    r = lambda *s: Tensor(rng.standard_normal(s))  # noqa: E731
    mask = rng.random((3, 5)) > 0.5
    mask[:, 0] = True
    P1, P2, P3 = r(2, 3, 5), r(2, 3, 4), r(3, 4, 8, 6)
    P4 = r(3, 4, 4, 3)
    return [
        ("matmul", lambda a, b: T.sum(T.mul(T.matmul(a, b), P1)), [r(2, 3, 4), r(4, 5)]),
        ("matmul_batched", lambda a, b: T.sum(T.mul(T.matmul(a, b), P1)), [r(2, 3, 4), r(2, 4, 5)]),
        ("add_bias", lambda a, b: T.sum(T.mul(T.add(a, b), P2)), [r(2, 3, 4), r(4)]),
        ("sub", lambda a, b: T.sum(T.mul(T.sub(a, b), P2)), [r(2, 3, 4), r(2, 3, 4)]),
        ("mul", lambda a, b: T.sum(T.mul(a, b)), [r(2, 3, 4), r(2, 3, 4)]),
        ("scale", lambda a: T.sum(T.mul(T.scale(a, -1.7), P2)), [r(2, 3, 4)]),
        ("gelu", lambda a: T.sum(T.mul(T.gelu(a), P2)), [r(2, 3, 4)]),
        ("softmax", lambda a: T.sum(T.mul(T.softmax_lastdim(a), P1)), [r(2, 3, 5)]),
        ("softmax_masked", lambda a: T.sum(T.mul(T.softmax_lastdim(a, mask), P1)), [r(2, 3, 5)]),
        ("layer_norm", lambda a, g, b: T.sum(T.mul(T.layer_norm(a, g, b), P2)), [r(2, 3, 4), r(4), r(4)]),
        ("concat", lambda a, b: T.sum(T.mul(T.concat([a, b], axis=1), P1)), [r(2, 1, 5), r(2, 2, 5)]),
        ("transpose", lambda a: T.sum(T.mul(T.transpose(a, (0, 2, 1)), P2)), [r(2, 4, 3)]),
        ("reshape", lambda a: T.sum(T.mul(T.reshape(a, (2, 3, 4)), P2)), [r(6, 4)]),
        ("slice", lambda a: T.sum(T.mul(T.slice_axis(a, 1, 4, axis=1), P2)), [r(2, 5, 4)]),
        ("conv2d_1x1", lambda x, k, b: T.sum(T.mul(T.conv2d_1x1(x, k, b), P3)), [r(3, 2, 8, 6), r(4, 2), r(4)]),
        ("deconv2d", lambda x, k, b: T.sum(T.mul(T.deconv2d(x, k, b), P3)), [r(3, 3, 4, 3), r(3, 4, 4, 4), r(4)]),
        ("max_pool2d", lambda x: T.sum(T.mul(T.max_pool2d(x, 2), P4)), [r(3, 4, 8, 6)]),
    ]


def gradcheck_suite(tol: float = 1e-4, seed: int = 0, per_group: int = 12) -> list[GradcheckEntry]:
    """Finite differences against tape gradients for every op and the micro model (float64)."""
    rng = np.random.default_rng(seed)
    entries: list[GradcheckEntry] = []

    def record(name, err):
        entries.append(GradcheckEntry(name, err, err <= tol))

    for name, f, inputs in _op_cases(rng):
        record(name, T.gradcheck(f, inputs))

    # fusion pieces with float64 weights
    cfg = micro_config()
    params = M.init_params(cfg, seed, dtype=np.float64)
    for p in params.values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.3  # move off the zero-bias init
    c = cfg.backbone.channels
    q = Tensor(rng.standard_normal((2, c)))
    feats = Tensor(rng.standard_normal((12, c)))
    mask = rng.random((2, 12)) > 0.6
    mask[:, 3] = True
    mask[:, 7] = False  # a token no joint may see
    proj = Tensor(rng.standard_normal((2, c)))

    def check_group(label, fn, prefixes):
        names = [n for n in params if n.startswith(prefixes)]

        def run(*ts):
            local = dict(params)
            local.update(zip(names, ts))
            return fn(local)

        record(label, T.gradcheck(run, [params[n] for n in names]))

    record("masked_cross_attention", T.gradcheck(
        lambda qq, ff: T.sum(T.mul(Fu.masked_cross_attention(qq, ff, mask, params, "jta.layer0", 1), proj)),
        [q, feats]))
    check_group("masked_cross_attention.weights",
                lambda P: T.sum(T.mul(Fu.masked_cross_attention(q, feats, mask, P, "jta.layer0", 1), proj)),
                ("jta.layer0.cross", "jta.layer0.norm_q", "jta.layer0.norm_kv"))
    record("jta_layer", T.gradcheck(
        lambda qq, ff: T.sum(T.mul(Fu.jta_layer(qq, ff, mask, params, "jta.layer0", 1), proj)), [q, feats]))
    ft = Tensor(rng.standard_normal((4, c)))
    proj4 = Tensor(rng.standard_normal((4, c)))
    record("gra", T.gradcheck(
        lambda f_, q_: T.sum(T.mul(Fu.gra(f_, q_, params, cfg.fusion, 1), proj4)), [ft, q]))
    record("encoder_block", T.gradcheck(
        lambda x: T.sum(T.mul(B.encoder_block(x, params, "encoder.block0", 1), proj4)), [ft]))
    hm_proj = Tensor(rng.standard_normal((2, 8, 8)))
    record("decode", T.gradcheck(lambda x: T.sum(T.mul(B.decode(x, params, cfg.backbone), hm_proj)), [ft]))

    # end-to-end micro model: every weight group, subsampled coordinates
    clip = rng.random((3, 3, 32, 32))
    target = rng.random((2, 8, 8))
    vis = np.array([1.0, 1.0])
    errs = _subset_gradcheck(lambda P: M.loss(M.forward(clip, P, cfg), target, vis), params, rng, per_group)
    groups: dict[str, float] = {}
    for n, e in errs.items():
        g = ".".join(n.split(".")[:2])
        groups[g] = max(groups.get(g, 0.0), e)
    for g, e in sorted(groups.items()):
        record(f"end_to_end[{g}]", e)
    return entries
