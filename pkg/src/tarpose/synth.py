"""Synthetic person clips: an articulated 15-joint skeleton rendered as coloured
limbs, cropped top-down style, with optional occluder and blur.

Coordinates are image pixels with pixel centres at integers (``x`` right,
``y`` down). Keypoint arrays are ``[F, N, 3]`` holding ``(x, y, visible)``.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

JOINT_NAMES = (
    "nose", "head_bottom", "head_top",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
PARENTS = (1, -1, 0, 1, 1, 3, 4, 5, 6, 1, 1, 9, 10, 11, 12)
FLIP_PAIRS = ((3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14))
BONE_LENGTHS = (8.0, 0.0, 10.0, 13.0, 13.0, 19.0, 19.0, 17.0, 17.0, 34.0, 34.0, 23.0, 23.0, 23.0, 23.0)
# rest direction of each bone (parent -> joint), radians, y pointing down
REST_ANGLES = (-math.pi / 2, 0.0, -math.pi / 2, 0.0, math.pi, math.pi / 2, math.pi / 2,
               math.pi / 2, math.pi / 2, math.pi / 2 - 0.3, math.pi / 2 + 0.3,
               math.pi / 2, math.pi / 2, math.pi / 2, math.pi / 2)
# half-width of the random spread around the rest direction
ANGLE_SPREAD = (0.3, 0.0, 0.3, 0.2, 0.2, 1.6, 1.6, 2.2, 2.2, 0.15, 0.15, 1.0, 1.0, 1.3, 1.3)
LIMB_JOINTS = (5, 6, 7, 8, 11, 12, 13, 14)

CANVAS = 240.0
OCCLUDER_FRACTION = 0.5  # occluder side relative to min(H, W)


class GenerationError(RuntimeError):
    pass


def _joint_colors(n: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / n, 0.9, 0.95) for i in range(n)], dtype=np.float32)


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...] = JOINT_NAMES
    parents: tuple[int, ...] = PARENTS
    bone_lengths: tuple[float, ...] = BONE_LENGTHS
    flip_pairs: tuple[tuple[int, int], ...] = FLIP_PAIRS
    thickness: float = 5.0
    joint_radius: float = 3.0

    def __post_init__(self):
        n = len(self.names)
        if len(self.parents) != n or len(self.bone_lengths) != n:
            raise ValueError("names, parents and bone_lengths must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise ValueError(f"skeleton needs exactly one root, found {roots}")
        for j in range(n):
            seen, k = set(), j
            while self.parents[k] >= 0:
                if k in seen:
                    raise ValueError(f"cycle in parent graph through joint {j}")
                seen.add(k)
                k = self.parents[k]
            if j != roots[0] and self.bone_lengths[j] <= 0:
                raise ValueError(f"bone length of joint {j} must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def order(self) -> list[int]:
        """Joints sorted so every parent precedes its children."""
        depth = []
        for j in range(self.n_joints):
            d, k = 0, j
            while self.parents[k] >= 0:
                k, d = self.parents[k], d + 1
            depth.append(d)
        return sorted(range(self.n_joints), key=lambda j: (depth[j], j))

    def flip_index(self) -> np.ndarray:
        perm = np.arange(self.n_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


@dataclass(frozen=True)
class SceneParams:
    seed: int
    motion: tuple[float, ...] = ()  # per-joint bone speed, px/frame in canvas units; empty = 1.0 each
    drift: tuple[float, float] = (0.0, 0.0)  # root translation, canvas px/frame
    occluder: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1 in image px
    occluder_frames: tuple[int, ...] = ()  # frame indices (0 .. 2T)
    occluder_gray: float = 0.3
    blur: tuple[int, ...] = ()  # box-blur radius per frame; empty = none
    background: float = 0.5
    noise: float = 0.04

    def __post_init__(self):
        if any(r < 0 for r in self.blur):
            raise ValueError("blur radius must be >= 0")
        if self.occluder is not None:
            x0, y0, x1, y1 = self.occluder
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"occluder rectangle {self.occluder} is empty")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PersonClip:
    frames: np.ndarray  # [F, 3, H, W] float32 in [0, 1]
    keypoints: np.ndarray  # [F, N, 3] (x, y, visible)
    center_index: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def current_keypoints(self) -> np.ndarray:
        return self.keypoints[self.center_index]


def _pose(spec: SkeletonSpec, rng: np.random.Generator):
    """Random rest pose: per-bone angles, length scales and motion phases."""
    n = spec.n_joints
    angles = np.array(REST_ANGLES[:n]) + rng.uniform(-1, 1, n) * np.array(ANGLE_SPREAD[:n])
    lengths = np.array(spec.bone_lengths) * rng.uniform(0.85, 1.15, n)
    phase = rng.uniform(0, 2 * math.pi, n)
    omega = rng.uniform(0.3, 0.7, n)
    root = np.array([CANVAS / 2, CANVAS / 2 - 10]) + rng.uniform(-15, 15, 2)
    return angles, lengths, phase, omega, root


def _joints_at(spec, pose, motion, drift, tau: float) -> np.ndarray:
    angles, lengths, phase, omega, root = pose
    pts = np.zeros((spec.n_joints, 2))
    for j in spec.order():
        p = spec.parents[j]
        if p < 0:
            pts[j] = root + np.asarray(drift) * tau
            continue
        rate = motion[j] / lengths[j]
        a = angles[j] + rate / omega[j] * (math.sin(omega[j] * tau + phase[j]) - math.sin(phase[j]))
        pts[j] = pts[p] + lengths[j] * np.array([math.cos(a), math.sin(a)])
    return pts


def _crop_box(pts: np.ndarray, H: int, W: int):
    """Centre-frame bbox expanded by 25%, widened to the H:W aspect, kept on the canvas."""
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    c = (lo + hi) / 2
    bw, bh = (hi - lo) * 1.25
    bw, bh = max(bw, 1.0), max(bh, 1.0)
    if bw / bh > W / H:
        bh = bw * H / W
    else:
        bw = bh * W / H
    if bw > CANVAS or bh > CANVAS:
        raise GenerationError(f"crop {bw:.1f}x{bh:.1f} exceeds the {CANVAS:.0f}px canvas")
    x0 = min(max(c[0] - bw / 2, 0.0), CANVAS - bw)
    y0 = min(max(c[1] - bh / 2, 0.0), CANVAS - bh)
    return x0, y0, W / bw


def _segment_coverage(xx, yy, a, b, radius):
    d = b - a
    ll = float(d @ d)
    if ll == 0:
        dist = np.hypot(xx - a[0], yy - a[1])
    else:
        t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / ll, 0.0, 1.0)
        dist = np.hypot(xx - (a[0] + t * d[0]), yy - (a[1] + t * d[1]))
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def render_frame(pts: np.ndarray, spec: SkeletonSpec, px_scale: float, background: np.ndarray) -> np.ndarray:
    """Anti-aliased limbs and joint discs over ``background`` ``[3, H, W]``."""
    img = background.copy()
    _, H, W = img.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    colors = _joint_colors(spec.n_joints)
    half = spec.thickness * px_scale / 2
    for j in spec.order():
        p = spec.parents[j]
        if p < 0:
            continue
        cov = _segment_coverage(xx, yy, pts[p], pts[j], half)
        img = img * (1 - cov) + colors[j][:, None, None] * cov
    rad = spec.joint_radius * px_scale
    for j in range(spec.n_joints):
        cov = _segment_coverage(xx, yy, pts[j], pts[j], rad)
        img = img * (1 - cov) + colors[j][:, None, None] * cov
    return img.astype(np.float32)


def generate_clip(spec: SkeletonSpec, params: SceneParams, T: int, H: int, W: int) -> PersonClip:
    """Render ``2T + 1`` frames; a pure function of its arguments."""
    rng = np.random.default_rng(params.seed)
    n = spec.n_joints
    motion = np.array(params.motion if params.motion else (1.0,) * n, dtype=np.float64)
    if motion.shape != (n,):
        raise ValueError(f"motion needs {n} entries, got {motion.shape[0]}")
    pose = _pose(spec, rng)
    nf = 2 * T + 1
    world = np.stack([_joints_at(spec, pose, motion, params.drift, f - T) for f in range(nf)])
    if np.any(world[T] < 0) or np.any(world[T] > CANVAS):
        raise GenerationError("centre-frame skeleton leaves the canvas")
    x0, y0, s = _crop_box(world[T], H, W)
    img_pts = (world - np.array([x0, y0])) * s - 0.5

    texture = rng.standard_normal((H, W)).astype(np.float32) * params.noise
    background = np.clip(params.background + texture, 0, 1)[None].repeat(3, axis=0)
    frames = np.empty((nf, 3, H, W), dtype=np.float32)
    keypoints = np.zeros((nf, n, 3), dtype=np.float64)
    blur = params.blur if params.blur else (0,) * nf
    if len(blur) != nf:
        raise ValueError(f"blur needs {nf} entries, got {len(blur)}")
    if params.occluder is not None:
        ox0, oy0, ox1, oy1 = params.occluder
        if ox0 < -0.5 - 1e-9 or oy0 < -0.5 - 1e-9 or ox1 > W - 0.5 + 1e-9 or oy1 > H - 0.5 + 1e-9:
            raise ValueError(f"occluder {params.occluder} extends outside the {W}x{H} image")
    for f in range(nf):
        img = render_frame(img_pts[f], spec, s, background)
        inside = ((img_pts[f, :, 0] >= -0.5) & (img_pts[f, :, 0] < W - 0.5)
                  & (img_pts[f, :, 1] >= -0.5) & (img_pts[f, :, 1] < H - 0.5))
        if params.occluder is not None and f in params.occluder_frames:
            ox0, oy0, ox1, oy1 = params.occluder
            c0, c1 = max(int(math.ceil(ox0)), 0), min(int(math.floor(ox1)), W - 1)
            r0, r1 = max(int(math.ceil(oy0)), 0), min(int(math.floor(oy1)), H - 1)
            img[:, r0:r1 + 1, c0:c1 + 1] = params.occluder_gray
            covered = ((img_pts[f, :, 0] >= ox0) & (img_pts[f, :, 0] <= ox1)
                       & (img_pts[f, :, 1] >= oy0) & (img_pts[f, :, 1] <= oy1))
            inside &= ~covered
        if blur[f] > 0:
            img = ndimage.uniform_filter(img, size=(1, 2 * blur[f] + 1, 2 * blur[f] + 1), mode="nearest")
        frames[f] = np.clip(img, 0, 1)
        keypoints[f, :, :2] = img_pts[f]
        keypoints[f, :, 2] = inside
    return PersonClip(frames=frames, keypoints=keypoints, center_index=T)


def gt_heatmaps(keypoints: np.ndarray, H: int, W: int, sigma: float = 2.0, stride: int = 4) -> np.ndarray:
    """Unnormalised Gaussians (peak 1) at ``(x/stride, y/stride)``; invisible joints -> zeros.

    ``keypoints`` is ``[..., N, 3]``; returns ``[..., N, H/stride, W/stride]`` float32.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kp = np.asarray(keypoints, dtype=np.float64)
    h, w = H // stride, W // stride
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    cx = kp[..., 0:1] / stride
    cy = kp[..., 1:2] / stride
    gx = np.exp(-((xs - cx) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((ys - cy) ** 2) / (2 * sigma ** 2))
    maps = gy[..., :, None] * gx[..., None, :]
    maps *= (kp[..., 2] > 0)[..., None, None]
    return maps.astype(np.float32)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Augmentation:
    scale: float = 1.0
    angle: float = 0.0  # degrees, positive rotates +x towards +y
    flip: bool = False
    shift: tuple[float, float] = (0.0, 0.0)  # px

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.angle == 0.0 and not self.flip and self.shift == (0.0, 0.0)


def sample_augmentation(rng: np.random.Generator, H: int, W: int, scale_range=(0.65, 1.35),
                        max_angle: float = 45.0, flip_prob: float = 0.5, max_shift: float = 0.1) -> Augmentation:
    return Augmentation(
        scale=float(rng.uniform(*scale_range)),
        angle=float(rng.uniform(-max_angle, max_angle)),
        flip=bool(rng.random() < flip_prob),
        shift=(float(rng.uniform(-max_shift, max_shift) * W), float(rng.uniform(-max_shift, max_shift) * H)),
    )


def _forward_points(xy: np.ndarray, aug: Augmentation, H: int, W: int) -> np.ndarray:
    c = np.array([(W - 1) / 2, (H - 1) / 2])
    p = xy.copy()
    if aug.flip:
        p[..., 0] = W - 1 - p[..., 0]
    th = math.radians(aug.angle)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return (p - c) @ rot.T * aug.scale + c + np.array(aug.shift)


def apply_augmentation(clip: PersonClip, aug: Augmentation, spec: SkeletonSpec | None = None,
                       fill: float = 0.5) -> PersonClip:
    """Apply one geometric transform to every frame and to the keypoints."""
    if aug.is_identity:
        return PersonClip(clip.frames.copy(), clip.keypoints.copy(), clip.center_index)
    spec = spec or SkeletonSpec()
    nf, _, H, W = clip.frames.shape
    # inverse map: output pixel -> source pixel
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c = np.array([(W - 1) / 2, (H - 1) / 2])
    q = np.stack([xx, yy], axis=-1) - c - np.array(aug.shift)
    th = math.radians(aug.angle)
    rot_inv = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]])
    src = q @ rot_inv.T / aug.scale + c
    if aug.flip:
        src[..., 0] = W - 1 - src[..., 0]
    coords = np.stack([src[..., 1], src[..., 0]])
    frames = np.empty_like(clip.frames)
    for f in range(nf):
        for ch in range(3):
            frames[f, ch] = ndimage.map_coordinates(clip.frames[f, ch], coords, order=1, mode="constant", cval=fill)

    kp = clip.keypoints.copy()
    kp[..., :2] = _forward_points(kp[..., :2], aug, H, W)
    if aug.flip:
        kp = kp[:, spec.flip_index()]
    inside = (kp[..., 0] >= -0.5) & (kp[..., 0] < W - 0.5) & (kp[..., 1] >= -0.5) & (kp[..., 1] < H - 0.5)
    kp[..., 2] = kp[..., 2] * inside
    return PersonClip(frames=frames, keypoints=kp, center_index=clip.center_index)


def augment(clip: PersonClip, rng: np.random.Generator, spec: SkeletonSpec | None = None) -> PersonClip:
    """Sample one transform per clip and apply it identically to all frames."""
    _, _, H, W = clip.frames.shape
    return apply_augmentation(clip, sample_augmentation(rng, H, W), spec)


# --------------------------------------------------------------------------
# benchmark suites
# --------------------------------------------------------------------------

KINDS = ("plain", "occlusion", "blur")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: int
    seed: int
    kind: str
    T: int
    H: int
    W: int
    params_hash: str


@dataclass
class Dataset:
    kind: str
    seed: int
    records: list[ClipRecord]
    clips: list[PersonClip]
    occluded_joint: list[int] = field(default_factory=list)  # occlusion kind: the targeted joint per clip

    def __len__(self) -> int:
        return len(self.clips)

    def manifest_text(self) -> str:
        lines = ["clip_id,seed,kind,T,H,W,params_hash"]
        lines += [f"{r.clip_id},{r.seed},{r.kind},{r.T},{r.H},{r.W},{r.params_hash}" for r in self.records]
        return "\n".join(lines) + "\n"

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest_text().encode()).hexdigest()


def clip_seed(kind: str, seed: int, index: int) -> int:
    """Seed of clip ``index`` in suite ``(kind, seed)``."""
    ss = np.random.SeedSequence([KINDS.index(kind), seed, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def scene_for(kind: str, seed: int, T: int, H: int, W: int, spec: SkeletonSpec | None = None):
    """Scene parameters of one benchmark clip, derived from its seed alone.

    Returns ``(params, occluded_joint)``; ``occluded_joint`` is -1 unless the
    kind is ``occlusion``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown benchmark kind {kind!r}; expected one of {KINDS}")
    spec = spec or SkeletonSpec()
    rng = np.random.default_rng([seed, 7])
    n = spec.n_joints
    base = SceneParams(
        seed=seed,
        motion=tuple(float(v) for v in rng.uniform(0.3, 1.2, n)),
        drift=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))),
        background=float(rng.uniform(0.35, 0.65)),
        noise=0.04,
    )
    nf = 2 * T + 1
    if kind == "blur":
        blur = [0] * nf
        blur[T] = int(rng.integers(1, 3))
        return replace(base, blur=tuple(blur)), -1
    if kind == "plain":
        return base, -1
    if T < 1:
        raise ValueError("occlusion benchmark needs temporal_span >= 1")
    clean = generate_clip(spec, base, T, H, W)
    candidates = [j for j in LIMB_JOINTS if j < n and np.all(clean.keypoints[:, j, 2] > 0)]
    rng.shuffle(candidates)
    # Large box with the joint anywhere inside it, so the box itself does not
    # give the joint away; shifting into the image keeps the joint covered.
    side = OCCLUDER_FRACTION * min(H, W)
    for j in candidates:
        x, y = clean.keypoints[T, j, :2]
        ox = min(max(x - rng.uniform(0.05, 0.95) * side, -0.5), W - 0.5 - side)
        oy = min(max(y - rng.uniform(0.05, 0.95) * side, -0.5), H - 0.5 - side)
        params = replace(base, occluder=(float(ox), float(oy), float(ox + side), float(oy + side)),
                         occluder_frames=(T,), occluder_gray=float(rng.uniform(0.15, 0.3)))
        clip = generate_clip(spec, params, T, H, W)
        aux = [f for f in range(nf) if f != T]
        if clip.keypoints[T, j, 2] == 0 and np.all(clip.keypoints[aux, j, 2] > 0):
            return params, j
    raise GenerationError(f"seed {seed}: no limb joint could be occluded in the centre frame only")


def make_benchmark(kind: str, count: int, T: int, seed: int, H: int = 64, W: int = 48,
                   spec: SkeletonSpec | None = None, out_dir: str | Path | None = None,
                   write_frames: bool = False) -> Dataset:
    """Fixed-seed suite of ``count`` clips; optionally written to ``out_dir``."""
    spec = spec or SkeletonSpec()
    records, clips, occluded = [], [], []
    i = 0
    attempt = 0
    while len(clips) < count:
        s = clip_seed(kind, seed, attempt)
        attempt += 1
        try:
            params, j = scene_for(kind, s, T, H, W, spec)
            clip = generate_clip(spec, params, T, H, W)
        except GenerationError:
            continue
        records.append(ClipRecord(i, s, kind, T, H, W, params.digest()))
        clips.append(clip)
        occluded.append(j)
        i += 1
    ds = Dataset(kind=kind, seed=seed, records=records, clips=clips, occluded_joint=occluded)
    if out_dir is not None:
        write_dataset(ds, out_dir, write_frames=write_frames)
    return ds


def write_dataset(ds: Dataset, out_dir: str | Path, write_frames: bool = False) -> None:
    from .io import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.csv").write_text(ds.manifest_text())
    rows = ["clip_id,frame,joint,x,y,visible"]
    for rec, clip in zip(ds.records, ds.clips):
        for f in range(clip.n_frames):
            for j in range(clip.keypoints.shape[1]):
                x, y, v = clip.keypoints[f, j]
                rows.append(f"{rec.clip_id},{f},{j},{x:.4f},{y:.4f},{int(v)}")
        if write_frames:
            cdir = out / f"clip_{rec.clip_id:04d}"
            cdir.mkdir(exist_ok=True)
            for f in range(clip.n_frames):
                write_ppm(cdir / f"frame_{f:02d}.ppm", clip.frames[f])
    (out / "keypoints.csv").write_text("\n".join(rows) + "\n")


def load_dataset(path: str | Path, spec: SkeletonSpec | None = None) -> Dataset:
    """Rebuild a written suite by regenerating every clip from its manifest seed.

    Raises ``GenerationError`` if a regenerated clip's parameter hash differs
    from the manifest.
    """
    import csv

    spec = spec or SkeletonSpec()
    with open(Path(path) / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    records, clips, occluded = [], [], []
    for row in rows:
        rec = ClipRecord(int(row["clip_id"]), int(row["seed"]), row["kind"], int(row["T"]),
                         int(row["H"]), int(row["W"]), row["params_hash"])
        params, j = scene_for(rec.kind, rec.seed, rec.T, rec.H, rec.W, spec)
        if params.digest() != rec.params_hash:
            raise GenerationError(f"clip {rec.clip_id}: parameter hash mismatch")
        records.append(rec)
        clips.append(generate_clip(spec, params, rec.T, rec.H, rec.W))
        occluded.append(j)
    kind = records[0].kind if records else "plain"
    return Dataset(kind=kind, seed=-1, records=records, clips=clips, occluded_joint=occluded)
