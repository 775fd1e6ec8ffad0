"""Three-stage segmentation: lungs, then infections, then infection types.

=========== ================== ================== =========
stage       stream A           stream B           classes
=========== ================== ================== =========
roi         structure(image)   texture(image)     2
binary      image              roi mask           2
multiclass  binary mask        roi mask           3
=========== ================== ================== =========

Masks enter the networks as {0, 1} single-channel planes. While training
the binary and multiclass stages, the upstream masks are ground truth with a
probability annealed linearly from 1 to 0 over the epochs, and the upstream
networks' predictions otherwise.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import affine_transform

from . import dataio
from .metrics import dice
from .optim import Adam
from .segnet import DOWNSAMPLE, MINIATURE_WIDTHS, NetworkConfig, NetworkParams, build_network, forward
from .stexdecomp import DecompositionConfig, decompose
from .tensor import GradTape, Tensor, softmax, softmax_cross_entropy

STAGES = ("roi", "binary", "multiclass")
SOURCES = ("image", "structure", "texture", "roi", "binary")

# stage -> (stream A source, stream B source, classes)
WIRING = {
    "roi": ("structure", "texture", 2),
    "binary": ("image", "roi", 2),
    "multiclass": ("binary", "roi", 3),
}
# upstream mask sources each stage can take from an earlier stage
UPSTREAM = {"roi": (), "binary": ("roi",), "multiclass": ("roi", "binary")}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    stage_id: str
    stream_a_source: str
    stream_b_source: str
    num_classes: int
    network_cfg: NetworkConfig

    def __post_init__(self):
        if self.stage_id not in WIRING:
            raise PipelineError(f"unknown stage {self.stage_id!r}; expected one of {STAGES}")
        a, b, k = WIRING[self.stage_id]
        if (self.stream_a_source, self.stream_b_source, self.num_classes) != (a, b, k):
            raise PipelineError(
                f"stage {self.stage_id} must read ({a}, {b}) with {k} classes, "
                f"got ({self.stream_a_source}, {self.stream_b_source}) with {self.num_classes}"
            )
        cfg = self.network_cfg
        if cfg.num_classes != k or cfg.input_channels_a != 1 or cfg.input_channels_b != 1:
            raise PipelineError(f"network config {cfg} does not fit stage {self.stage_id}")

    @property
    def target(self) -> str:
        return self.stage_id

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "stream_a_source": self.stream_a_source,
            "stream_b_source": self.stream_b_source,
            "num_classes": self.num_classes,
            "network": self.network_cfg.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return cls(d["stage_id"], d["stream_a_source"], d["stream_b_source"], int(d["num_classes"]),
                   NetworkConfig.from_dict(d["network"]))


def make_stage_spec(stage_id: str, encoder_widths=MINIATURE_WIDTHS, convs_per_block=(2, 2, 3, 3, 3)) -> StageSpec:
    if stage_id not in WIRING:
        raise PipelineError(f"unknown stage {stage_id!r}; expected one of {STAGES}")
    a, b, k = WIRING[stage_id]
    cfg = NetworkConfig(num_classes=k, encoder_widths=tuple(encoder_widths), convs_per_block=tuple(convs_per_block))
    return StageSpec(stage_id, a, b, k, cfg)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    learning_rate: float = 1e-3
    seed: int = 0
    augment_multiplier: int = 2
    augment: bool = True
    validation_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "augment_multiplier"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# ---------------------------------------------------------------------------
# samples and augmentation


@dataclass
class Sample:
    """One image with whatever ground-truth masks are available."""

    name: str
    image: np.ndarray
    masks: dict = field(default_factory=dict)  # "roi" / "binary" / "multiclass" -> int64 [H, W]


def load_samples(manifest: dataio.DatasetManifest) -> list[Sample]:
    samples = []
    for rec in manifest:
        image = dataio.load_image(rec.image)
        masks = {}
        for kind in dataio.MASK_KINDS:
            p = rec.mask_path(kind)
            if p is not None:
                m = dataio.load_mask(p, kind)
                if m.shape != image.shape:
                    raise dataio.DataError(f"{p}: mask shape {m.shape} differs from image {image.shape}")
                masks[kind] = m
        samples.append(Sample(rec.stem, image, masks))
    return samples


def affine_params(rng: np.random.Generator, max_rotation=15.0, max_shift=0.1, scale_range=(0.9, 1.1)):
    """Draw (angle in degrees, (shift_y, shift_x) as fractions, scale)."""
    angle = rng.uniform(-max_rotation, max_rotation)
    shift = (rng.uniform(-max_shift, max_shift), rng.uniform(-max_shift, max_shift))
    scale = rng.uniform(*scale_range)
    return angle, shift, scale


def apply_affine(image: np.ndarray, masks: dict, angle: float, shift, scale: float):
    """Rotate about the centre, scale, then shift. Bilinear for the image,
    nearest for masks, zeros outside the source canvas."""
    h, w = image.shape
    t = math.radians(angle)
    # output -> input mapping
    fwd = scale * np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    inv = np.linalg.inv(fwd)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - inv @ (centre + np.array([shift[0] * h, shift[1] * w]))
    out_img = affine_transform(image.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0)
    out_masks = {
        k: affine_transform(m, inv, offset=offset, order=0, mode="constant", cval=0).astype(m.dtype)
        for k, m in masks.items()
    }
    return out_img.astype(image.dtype), out_masks


def augment_sample(image: np.ndarray, masks: dict, rng: np.random.Generator):
    """Random rotation (+-15 deg), translation (+-10 % per axis) and scale
    (0.9-1.1), applied identically to the image and every mask."""
    return apply_affine(image, masks, *affine_params(rng))


def teacher_forcing_schedule(epoch: int, total: int) -> float:
    """Probability of feeding ground-truth upstream masks: 1 at epoch 0,
    falling linearly to 1/total at the last epoch."""
    if total < 1 or not 0 <= epoch < total:
        raise ValueError(f"need 0 <= epoch < total, got epoch={epoch}, total={total}")
    return 1.0 - epoch / total


# ---------------------------------------------------------------------------
# tensors in and out


def pad_to_multiple(plane: np.ndarray, multiple: int = DOWNSAMPLE) -> np.ndarray:
    """Zero-pad the last two axes at the bottom/right to a multiple."""
    h, w = plane.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return plane
    pad = [(0, 0)] * (plane.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(plane, pad)


def source_planes(source: str, image: np.ndarray, masks: dict, dcfg: DecompositionConfig, cache: dict) -> np.ndarray:
    if source == "image":
        return image
    if source in ("structure", "texture"):
        if "decomp" not in cache:
            cache["decomp"] = decompose(image, dcfg)
        return getattr(cache["decomp"], source)
    if source in ("roi", "binary"):
        if source not in masks:
            raise PipelineError(f"missing required source: {source} mask")
        return masks[source]
    raise PipelineError(f"unknown source {source!r}")


def stage_inputs(spec: StageSpec, images: Sequence[np.ndarray], masks: Sequence[dict],
                 dcfg: DecompositionConfig) -> tuple[Tensor, Tensor]:
    """Stack padded [N, 1, H, W] float32 streams for a stage."""
    a, b = [], []
    for img, m in zip(images, masks):
        cache: dict = {}
        a.append(pad_to_multiple(np.asarray(source_planes(spec.stream_a_source, img, m, dcfg, cache), np.float32)))
        b.append(pad_to_multiple(np.asarray(source_planes(spec.stream_b_source, img, m, dcfg, cache), np.float32)))
    return Tensor(np.stack(a)[:, None]), Tensor(np.stack(b)[:, None])


def predict(params: NetworkParams, spec: StageSpec, images, masks, dcfg: DecompositionConfig,
            batch_size: int = 16) -> tuple[list, list]:
    """Infer-mode labels and class probabilities, cropped to each input's size."""
    labels, probs = [], []
    for start in range(0, len(images), batch_size):
        chunk = list(images[start:start + batch_size])
        xa, xb = stage_inputs(spec, chunk, masks[start:start + batch_size], dcfg)
        p = softmax(forward(params, xa, xb, mode="infer").data)
        for i, img in enumerate(chunk):
            h, w = img.shape
            pi = p[i, :, :h, :w]
            probs.append(pi)
            labels.append(np.argmax(pi, axis=0).astype(np.int64))
    return labels, probs


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_dice: float

    def line(self) -> str:
        return f"epoch,{self.epoch},loss,{self.loss:.6f},val_dice,{self.val_dice:.6f}"


@dataclass
class TrainResult:
    params: NetworkParams
    log: list

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key))))


STAGE_KEYS = {s: i for i, s in enumerate(STAGES)}


def split_train_val(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train indices, validation indices); validation keeps >= 1 sample when n >= 2."""
    order = _rng(seed, 99).permutation(n)
    n_val = min(max(1, int(round(n * fraction))), n - 1) if n >= 2 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def mean_dice(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], k: int) -> float:
    """Mean over images of foreground Dice (macro over classes 1..k-1)."""
    vals = []
    for p, g in zip(pred, gt):
        vals.append(math.fsum(dice(p == c, g == c) for c in range(1, k)) / (k - 1))
    return math.fsum(vals) / len(vals) if vals else float("nan")


def train_stage(spec: StageSpec, samples: Sequence[Sample], tcfg: TrainConfig,
                upstream: Optional[dict] = None, dcfg: Optional[DecompositionConfig] = None,
                on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train one stage's network.

    ``upstream`` maps source names ("roi", "binary") to lists of predicted
    masks aligned with ``samples``; stage inputs use them with probability
    ``1 - teacher_forcing_schedule``. Without them the ground truth is used
    throughout.
    """
    dcfg = dcfg or DecompositionConfig()
    upstream = upstream or {}
    samples = list(samples)
    if not samples:
        raise PipelineError("no training samples")
    needed = {spec.target} | {s for s in (spec.stream_a_source, spec.stream_b_source) if s in ("roi", "binary")}
    for s in samples:
        for kind in sorted(needed):
            if kind not in s.masks:
                raise PipelineError(f"missing required source: {kind} mask (sample {s.name})")
    for kind, preds in upstream.items():
        if kind not in UPSTREAM[spec.stage_id]:
            raise PipelineError(f"stage {spec.stage_id} takes no upstream {kind} masks")
        if len(preds) != len(samples):
            raise PipelineError(f"upstream {kind}: {len(preds)} masks for {len(samples)} samples")

    stage_key = STAGE_KEYS[spec.stage_id]
    train_idx, val_idx = split_train_val(len(samples), tcfg.validation_fraction, tcfg.seed)
    params = build_network(spec.network_cfg, int(np.random.SeedSequence([tcfg.seed, stage_key]).generate_state(1)[0]))
    opt = Adam(params.trainable(), lr=tcfg.learning_rate)

    # validation inputs are fixed: predicted upstream masks when available
    val_images = [samples[i].image for i in val_idx]
    val_masks = [{**samples[i].masks, **{k: v[i] for k, v in upstream.items()}} for i in val_idx]
    val_gt = [samples[i].masks[spec.target] for i in val_idx]

    log = []
    for epoch in range(tcfg.epochs):
        p_gt = teacher_forcing_schedule(epoch, tcfg.epochs)
        order = np.concatenate([
            _rng(tcfg.seed, stage_key, epoch, rep).permutation(train_idx) for rep in range(tcfg.augment_multiplier)
        ])
        loss_sum = 0.0
        count = 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            images, masks, targets = [], [], []
            for pos, i in enumerate(batch):
                # every draw is keyed by (epoch, slot) so runs replay exactly
                rng = _rng(tcfg.seed, stage_key, epoch, 1000 + start + pos)
                m = dict(samples[i].masks)
                for kind, preds in upstream.items():
                    if rng.uniform() >= p_gt:
                        m[kind] = preds[i]
                img = samples[i].image
                if tcfg.augment:
                    img, m = augment_sample(img, m, rng)
                images.append(img)
                masks.append(m)
                targets.append(pad_to_multiple(m[spec.target]))
            xa, xb = stage_inputs(spec, images, masks, dcfg)
            with GradTape() as tape:
                logits = forward(params, xa, xb, mode="train")
                loss = softmax_cross_entropy(logits, np.stack(targets))
            tape.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(batch)
            count += len(batch)
        if len(val_idx):
            pred, _ = predict(params, spec, val_images, val_masks, dcfg)
            vd = mean_dice(pred, val_gt, spec.num_classes)
        else:
            vd = float("nan")
        entry = EpochLog(epoch + 1, loss_sum / count, vd)
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(params, log)


# ---------------------------------------------------------------------------
# checkpoints and inference


def data_fingerprint(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.name.encode("utf-8"))
        h.update(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        for kind in sorted(s.masks):
            h.update(kind.encode("utf-8"))
            h.update(np.ascontiguousarray(s.masks[kind], dtype="<i8").tobytes())
    return h.hexdigest()


def save_stage(path, spec: StageSpec, params: NetworkParams, tcfg: Optional[TrainConfig] = None,
               fingerprint: str = "") -> None:
    meta = {
        "stage": spec.stage_id,
        "spec": spec.to_dict(),
        "seed": params.seed,
        "train": asdict(tcfg) if tcfg is not None else None,
        "data_fingerprint": fingerprint,
    }
    dataio.save_checkpoint(params, meta, path)


def load_stage(path, expect_stage: Optional[str] = None) -> tuple[StageSpec, NetworkParams, dict]:
    tensors, meta = dataio.load_checkpoint(path)
    try:
        spec = StageSpec.from_dict(meta["spec"])
    except (KeyError, TypeError) as exc:
        raise PipelineError(f"{path}: checkpoint metadata lacks a stage spec") from exc
    if expect_stage is not None and spec.stage_id != expect_stage:
        raise PipelineError(f"{path}: holds stage {spec.stage_id!r}, expected {expect_stage!r}")
    params = NetworkParams.from_named_tensors(
        spec.network_cfg, int(meta.get("seed", 0)), {k: Tensor(v) for k, v in tensors.items()}
    )
    return spec, params, meta


@dataclass
class PipelineCheckpointSet:
    specs: dict
    params: dict
    fingerprints: dict = field(default_factory=dict)

    def __post_init__(self):
        for stage in STAGES:
            if stage not in self.specs or stage not in self.params:
                raise PipelineError(f"checkpoint set lacks stage {stage!r}")
            if self.specs[stage].stage_id != stage:
                raise PipelineError(f"checkpoint for {stage!r} holds stage {self.specs[stage].stage_id!r}")
            if self.params[stage].config != self.specs[stage].network_cfg:
                raise PipelineError(f"stage {stage}: parameters do not match the stage's network config")
        # each upstream stage produces the {0, 1} plane its consumer expects
        for producer in ("roi", "binary"):
            if self.specs[producer].num_classes != 2:
                raise PipelineError(f"stage {producer} must emit a binary mask")

    @staticmethod
    def filename(stage: str) -> str:
        return f"{stage}.tssg"

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for stage in STAGES:
            save_stage(d / self.filename(stage), self.specs[stage], self.params[stage],
                       fingerprint=self.fingerprints.get(stage, ""))

    @classmethod
    def load(cls, directory) -> "PipelineCheckpointSet":
        d = Path(directory)
        specs, params, fps = {}, {}, {}
        for stage in STAGES:
            path = d / cls.filename(stage)
            if not path.exists():
                raise PipelineError(f"missing checkpoint for stage {stage}: {path}")
            specs[stage], params[stage], meta = load_stage(path, stage)
            fps[stage] = meta.get("data_fingerprint", "")
        return cls(specs, params, fps)


@dataclass
class PipelineOutput:
    roi_mask: np.ndarray
    binary_mask: np.ndarray
    multiclass_mask: np.ndarray
    binary_prob: np.ndarray
    multiclass_prob: np.ndarray


def run_pipeline_batch(images: Sequence[np.ndarray], ckpts: PipelineCheckpointSet,
                       dcfg: Optional[DecompositionConfig] = None, batch_size: int = 16) -> list[PipelineOutput]:
    """Run all three stages over images of equal size."""
    dcfg = dcfg or DecompositionConfig()
    images = [np.asarray(im, dtype=np.float32) for im in images]
    if not images:
        return []
    for im in images:
        if im.ndim != 2:
            raise PipelineError(f"pipeline takes grayscale [H, W] planes, got {im.shape}")
    empty = [{} for _ in images]
    roi, _ = predict(ckpts.params["roi"], ckpts.specs["roi"], images, empty, dcfg, batch_size)
    binary, bprob = predict(ckpts.params["binary"], ckpts.specs["binary"], images,
                            [{"roi": r} for r in roi], dcfg, batch_size)
    multi, mprob = predict(ckpts.params["multiclass"], ckpts.specs["multiclass"], images,
                           [{"roi": r, "binary": b} for r, b in zip(roi, binary)], dcfg, batch_size)
    return [PipelineOutput(r, b, m, bp[1], mp) for r, b, m, bp, mp in zip(roi, binary, multi, bprob, mprob)]


def run_pipeline(image: np.ndarray, ckpts: PipelineCheckpointSet,
                 dcfg: Optional[DecompositionConfig] = None) -> PipelineOutput:
    return run_pipeline_batch([image], ckpts, dcfg)[0]


def train_pipeline(samples: Sequence[Sample], tcfg: TrainConfig, encoder_widths=MINIATURE_WIDTHS,
                   dcfg: Optional[DecompositionConfig] = None,
                   on_epoch: Optional[Callable[[str, EpochLog], None]] = None) -> tuple[PipelineCheckpointSet, dict]:
    """Train the three stages in order, feeding each one its predecessors'
    predictions on the training images. Returns the checkpoint set and the
    per-stage logs."""
    dcfg = dcfg or DecompositionConfig()
    samples = list(samples)
    specs, params, logs = {}, {}, {}
    upstream_pred: dict = {}
    fp = data_fingerprint(samples)
    images = [s.image for s in samples]
    for stage in STAGES:
        spec = make_stage_spec(stage, encoder_widths)
        cb = None if on_epoch is None else (lambda e, _s=stage: on_epoch(_s, e))
        ups = {k: upstream_pred[k] for k in UPSTREAM[stage]}
        result = train_stage(spec, samples, tcfg, ups, dcfg, cb)
        specs[stage], params[stage], logs[stage] = spec, result.params, result.log
        if stage != "multiclass":
            inputs = [{**{k: upstream_pred[k][i] for k in ups}} for i in range(len(samples))]
            upstream_pred[stage], _ = predict(result.params, spec, images, inputs, dcfg)
    return PipelineCheckpointSet(specs, params, {s: fp for s in STAGES}), logs
