"""Paired datasets, training loops and evaluation."""

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import engine as E
from .config import dataclass_from_kv, dataclass_to_text, parse_kv_text
from .errors import (
    ConfigError,
    DatasetError,
    DivergenceError,
    MissingPairError,
    PairDimensionError,
    UndecodableImageError,
    UnsupportedFormatError,
)
from .metrics import delta_e, psnr, ssim
from .model import backward_chw, build, forward, forward_chw, to_chw
from .retouch import RetouchOp

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


# ---------------------------------------------------------------------------
# images and datasets


def read_image(path):
    """Decode an 8-bit RGB file to an H x W x 3 float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                raise UnsupportedFormatError(
                    f"{path}: unsupported image mode {mode!r} (need 8-bit RGB)"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UndecodableImageError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float32) / 255.0


def encode_image(img):
    """Clamp to [0, 1] and quantize to uint8."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img):
    Image.fromarray(encode_image(img), mode="RGB").save(path)


def list_images(directory):
    return sorted(
        f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTENSIONS)
    )


@dataclass
class PairedDataset:
    pairs: list
    names: list = field(default_factory=list)
    provenance: str = "file_pairs"

    def __post_init__(self):
        if not self.pairs:
            raise DatasetError("dataset is empty")
        if not self.names:
            self.names = [f"{i:04d}" for i in range(len(self.pairs))]
        for name, (a, b) in zip(self.names, self.pairs):
            if a.shape != b.shape:
                raise PairDimensionError(f"{name}: input {a.shape} vs target {b.shape}")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def synth_paired_dataset(sources, op, names=None):
    """Pairs of (source, clamp(op(source))) for a retouching operator."""
    if not sources:
        raise DatasetError("no source images")
    pairs = [
        (np.asarray(s, dtype=np.float32), np.clip(op(s), 0.0, 1.0).astype(np.float32))
        for s in sources
    ]
    label = op.describe() if hasattr(op, "describe") else getattr(op, "__name__", repr(op))
    return PairedDataset(pairs, list(names or []), f"synthetic({label})")


def brighten_left_half(img, alpha=1.5):
    """Multiply the left half of the columns by ``alpha``; a location-dependent edit."""
    out = np.array(img, dtype=np.float32, copy=True)
    out[:, : out.shape[1] // 2] *= alpha
    return out


def synth_left_half_dataset(sources, alpha=1.5, names=None):
    data = synth_paired_dataset(sources, lambda img: brighten_left_half(img, alpha), names)
    data.provenance = f"synthetic(left_half({alpha:g}))"
    return data


def load_paired_dataset(input_dir, target_dir):
    """Pair images by filename across two directories, in sorted order."""
    inputs = list_images(input_dir)
    targets = set(list_images(target_dir))
    for name in inputs:
        if name not in targets:
            raise MissingPairError(f"no target for input {os.path.join(input_dir, name)}")
    for name in sorted(targets - set(inputs)):
        raise MissingPairError(f"no input for target {os.path.join(target_dir, name)}")
    if not inputs:
        raise DatasetError(f"no images found in {input_dir}")
    pairs = []
    for name in inputs:
        a = read_image(os.path.join(input_dir, name))
        b = read_image(os.path.join(target_dir, name))
        if a.shape != b.shape:
            raise PairDimensionError(f"{name}: input {a.shape[:2]} vs target {b.shape[:2]}")
        pairs.append((a, b))
    return PairedDataset(pairs, inputs, "file_pairs")


def load_images(directory):
    names = list_images(directory)
    if not names:
        raise DatasetError(f"no images found in {directory}")
    return [read_image(os.path.join(directory, n)) for n in names], names


def extract_patches(img, size, stride=None):
    """Non-overlapping (by default) size x size patches in raster order."""
    stride = stride or size
    h, w, _ = img.shape
    return [
        np.ascontiguousarray(img[y : y + size, x : x + size])
        for y in range(0, h - size + 1, stride)
        for x in range(0, w - size + 1, stride)
    ]


SAMPLE_PHOTOS = (
    "astronaut",
    "coffee",
    "chelsea",
    "rocket",
    "immunohistochemistry",
    "hubble_deep_field",
    "retina",
    "colorwheel",
)


def sample_photos(short_side=192):
    """The RGB photographs bundled with scikit-image, downscaled.

    Returns ``(images, names)``; images are float32 in [0, 1].
    """
    from skimage import data

    images = [_resize_short_side(getattr(data, name)(), short_side) for name in SAMPLE_PHOTOS]
    return images, list(SAMPLE_PHOTOS)


def _resize_short_side(arr, short_side):
    im = Image.fromarray(arr).convert("RGB")
    scale = short_side / min(im.size)
    im = im.resize((round(im.size[0] * scale), round(im.size[1] * scale)), Image.BICUBIC)
    return np.asarray(im, dtype=np.float32) / 255.0


def edit_photos(short_side=64):
    """Ten distinct real photographs: :data:`SAMPLE_PHOTOS` plus a stereo pair."""
    from skimage import data

    photos, names = sample_photos(short_side)
    left, right, _ = data.stereo_motorcycle()
    photos += [_resize_short_side(left, short_side), _resize_short_side(right, short_side)]
    return photos, names + ["motorcycle_left", "motorcycle_right"]


def random_global_edit(rng):
    """A random global edit: tone curve, then white balance, then saturation."""
    return (
        RetouchOp("tone_curve", tone_params=tuple(rng.dirichlet(np.full(4, 2.0)))),
        RetouchOp("white_balance", gains=tuple(float(g) for g in rng.uniform(0.85, 1.15, 3))),
        RetouchOp("saturation", alpha=float(rng.uniform(0.7, 1.4))),
    )


def apply_edit(img, ops):
    for op in ops:
        img = np.clip(op(img), 0.0, 1.0)
    return img.astype(np.float32)


def photo_edit_pairs(count=10, short_side=64, seed=0):
    """Real photos paired with a different seeded random global edit each.

    A stand-in for expert-retouched pairs when no such dataset is at hand.
    """
    photos, names = edit_photos(short_side)
    if not 1 <= count <= len(photos):
        raise DatasetError(f"count must be in [1, {len(photos)}], got {count}")
    rng = np.random.default_rng(seed)
    pairs, tags = [], []
    for img, name in zip(photos[:count], names[:count]):
        ops = random_global_edit(rng)
        pairs.append((img, apply_edit(img, ops)))
        tags.append(name)
    return PairedDataset(pairs, tags, f"photo_edits(seed={seed})")


def band_split(images, names, size=64, train_count=2000, seed=0, gain_jitter=0.0):
    """Pixel-disjoint train / held-out crops for simulation experiments.

    The bottom ``size`` rows of each image are cut into non-overlapping
    held-out patches; ``train_count`` seeded random crops, shared evenly
    over the images, come from the rows above. With ``gain_jitter`` > 0
    every training crop is multiplied by per-channel gains drawn from
    ``U(1 - gain_jitter, 1 + gain_jitter)`` and clipped to [0, 1], which
    widens the colour range seen in training; held-out patches are left
    untouched. Returns two lists of ``(tag, patch)``.
    """
    if not 0.0 <= gain_jitter < 1.0:
        raise ValueError(f"gain_jitter must be in [0, 1), got {gain_jitter}")
    if not images:
        raise DatasetError("no source images")
    rng = np.random.default_rng(seed)
    n = len(images)
    train, held = [], []
    for i, (img, name) in enumerate(zip(images, names)):
        h, w, _ = img.shape
        stem = os.path.splitext(name)[0]
        if h < 2 * size or w < size:
            raise DatasetError(f"{name}: image {img.shape[:2]} is too small for a {size}px band split")
        for k, patch in enumerate(extract_patches(img[h - size :], size)):
            held.append((f"{stem}_held{k:02d}", patch))
        share = train_count // n + (1 if i < train_count % n else 0)
        for k in range(share):
            y = int(rng.integers(0, h - 2 * size + 1))
            x = int(rng.integers(0, w - size + 1))
            train.append((f"{stem}_crop{k:04d}", np.ascontiguousarray(img[y : y + size, x : x + size])))
    if gain_jitter:
        # separate stream so crop positions do not depend on the jitter setting
        gains = np.random.default_rng([seed, 1]).uniform(1 - gain_jitter, 1 + gain_jitter, (len(train), 3))
        train = [
            (tag, np.clip(patch * g.astype(patch.dtype), 0.0, 1.0)) for (tag, patch), g in zip(train, gains)
        ]
    return train, held


def sample_band_split(size=64, short_side=192, train_count=2000, seed=0, gain_jitter=0.0):
    """:func:`band_split` over :func:`sample_photos`."""
    photos, names = sample_photos(short_side)
    return band_split(photos, names, size, train_count, seed, gain_jitter)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 2.0
    lr_decay_every: int = 150_000
    total_iters: int = 600_000
    batch_size: int = 1
    seed: int = 0
    stage2_lr: float = 1e-5
    stage1_iters: int = 300_000
    stage2_iters: int = 300_000
    crop_size: int = 64
    flip: bool = True
    log_every: int = 1000

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigError("batch_size must be 1")
        if self.total_iters < 0 or self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.learning_rate <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_every must be >= 1 and lr_decay_factor > 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def lr_at(self, iteration, base_lr=None):
        """Learning rate for the zero-based ``iteration`` (step decay)."""
        base = self.learning_rate if base_lr is None else base_lr
        return base / self.lr_decay_factor ** (iteration // self.lr_decay_every)

    def to_text(self):
        return dataclass_to_text(self)

    @classmethod
    def from_text(cls, text):
        return dataclass_from_kv(cls, parse_kv_text(text, "train config"))


@dataclass
class TrainResult:
    model: object
    log: list

    def write_log(self, path):
        write_train_log(path, self.log)


def write_train_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lr", "l1", "psnr"])
        for r in rows:
            w.writerow([r["iter"], repr(r["lr"]), f"{r['l1']:.8f}", f"{r['psnr']:.6f}"])


class _Sampler:
    """Seeded shuffled epochs with random crops and horizontal flips."""

    def __init__(self, data, cfg, rng):
        self.pairs = data.pairs
        self.cfg = cfg
        self.rng = rng
        self.order = []

    def next(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.pairs)))
        a, b = self.pairs[self.order.pop()]
        h, w, _ = a.shape
        size = self.cfg.crop_size
        if size and (h > size or w > size):
            ch, cw = min(size, h), min(size, w)
            y = int(self.rng.integers(0, h - ch + 1))
            x = int(self.rng.integers(0, w - cw + 1))
            a, b = a[y : y + ch, x : x + cw], b[y : y + ch, x : x + cw]
        if self.cfg.flip and self.rng.random() < 0.5:
            a, b = a[:, ::-1], b[:, ::-1]
        return to_chw(a).astype(E.DTYPE), to_chw(b).astype(E.DTYPE)


def _run_steps(model, data, cfg, iters, base_lr, names, rng, start=0, bypass_condition=False, log=None):
    """Shared inner loop; ``names`` are the parameters that get updated."""
    log = [] if log is None else log
    if iters == 0:
        return log
    sampler = _Sampler(data, cfg, rng)
    params = [model.params[n] for n in names]
    train_set = set(names)
    acc_l1 = acc_psnr = 0.0
    acc_n = 0
    for it in range(iters):
        x, target = sampler.next()
        cache = {}
        out = forward_chw(model, x, cache, bypass_condition=bypass_condition)
        loss = E.l1_loss(out, target)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {start + it}", start + it)
        for p in params:
            p.zero_grad()
        backward_chw(model, cache, E.l1_loss_backward(out, target), train=train_set)
        lr = cfg.lr_at(it, base_lr)
        try:
            for p in params:
                E.adam_step(p, lr)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (iteration {start + it})", start + it) from None
        acc_l1 += loss
        acc_psnr += psnr(np.clip(out, 0, 1), target)
        acc_n += 1
        if (it + 1) % cfg.log_every == 0 or it + 1 == iters:
            log.append(
                {"iter": start + it + 1, "lr": lr, "l1": acc_l1 / acc_n, "psnr": acc_psnr / acc_n}
            )
            acc_l1 = acc_psnr = 0.0
            acc_n = 0
    return log


def train(model, data, cfg, iters=None):
    """Single-stage training of every parameter with L1 loss and Adam.

    The model is updated in place and also returned in the result.
    """
    iters = cfg.total_iters if iters is None else iters
    rng = np.random.default_rng(cfg.seed)
    log = _run_steps(model, data, cfg, iters, cfg.learning_rate, list(model.params), rng)
    return TrainResult(model, log)


def _heads_at_identity(model):
    for name, p in model.params.items():
        if not name.startswith("head."):
            continue
        want = 1.0 if name.endswith("scale.bias") else 0.0
        if not np.all(p.value == want):
            return False
    return True


def train_two_stage(model, data, cfg):
    """Base network alone first, then everything jointly at ``stage2_lr``."""
    if not model.config.has_condition:
        raise ConfigError("two-stage training needs a model with a condition network")
    rng = np.random.default_rng(cfg.seed)
    base = [n for n in model.params if n.startswith("base.")]
    # identity heads make the condition branch a no-op, so stage 1 can skip it
    bypass = _heads_at_identity(model)
    log = _run_steps(
        model, data, cfg, cfg.stage1_iters, cfg.learning_rate, base, rng, bypass_condition=bypass
    )
    _run_steps(
        model, data, cfg, cfg.stage2_iters, cfg.stage2_lr, list(model.params), rng,
        start=cfg.stage1_iters, log=log,
    )
    return TrainResult(model, log)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricRow:
    file: str
    psnr: float
    ssim: float
    delta_e: float


@dataclass
class MetricsReport:
    rows: list

    @property
    def mean_psnr(self):
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mean_delta_e(self):
        return float(np.mean([r.delta_e for r in self.rows]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "psnr", "ssim", "delta_e"])
            for r in self.rows:
                w.writerow([r.file, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.delta_e:.6f}"])

    def summary(self):
        return (
            f"PSNR {self.mean_psnr:.4f} dB  SSIM {self.mean_ssim:.4f}  "
            f"dE {self.mean_delta_e:.4f}  ({len(self.rows)} images)"
        )


def predict(model, img):
    """Forward pass clamped to [0, 1], as used for metrics and encoding."""
    return np.clip(forward(model, img), 0.0, 1.0)


def evaluate(model, data, workers=1):
    """Per-image PSNR / SSIM / Delta E of clamped model outputs.

    SSIM is reported as NaN for images smaller than the SSIM window.
    """

    def score(item):
        name, (a, b) = item
        out = predict(model, a)
        s = ssim(out, b) if min(b.shape[:2]) >= 11 else float("nan")
        return MetricRow(name, psnr(out, b), s, delta_e(out, b))

    items = list(zip(data.names, data.pairs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(score, items))
    else:
        rows = [score(i) for i in items]
    return MetricsReport(rows)


# ---------------------------------------------------------------------------
# simulation experiments


@dataclass
class SimulationResult:
    model: object
    log: list
    report: MetricsReport
    train_size: int
    cpu_seconds: float


def run_simulation(op, model_config, cfg, split, two_stage=False):
    """Learn ``op`` (any image -> image callable) on a train / held-out split.

    ``split`` is a pair of ``(tag, patch)`` lists as returned by
    :func:`band_split`. Returns the trained model, its log and held-out
    metrics; ``cpu_seconds`` covers training only.
    """
    train_items, held_items = split

    def dataset(items):
        return synth_paired_dataset([p for _, p in items], op, [t for t, _ in items])

    train_data, held_data = dataset(train_items), dataset(held_items)
    model = build(model_config, cfg.seed)
    start = time.process_time()
    result = train_two_stage(model, train_data, cfg) if two_stage else train(model, train_data, cfg)
    cpu = time.process_time() - start
    return SimulationResult(model, result.log, evaluate(model, held_data), len(train_data), cpu)
