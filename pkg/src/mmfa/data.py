"""Manifests, raw-tensor ingestion, batch pairing, augmentation, synthetic data.

A dataset is a header JSON (`<stem>.json`: schema, domain, role) next to a
JSON-lines samples file (`<stem>.jsonl`: one {"path", "id", "cam", "attrs"} per
line); tensor paths are relative to the manifest directory. Target train
manifests are stripped of identity/attribute fields at load time — the only way
back to target labels is the evaluator's sealed sidecar.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchSizeError, ConfigError, ManifestError, SchemaError
from .seeding import stream
from .tensor import read_tensor_file, write_tensor_file

DOMAINS = ("source", "target")
ROLES = ("train", "query", "gallery")


@dataclass(frozen=True)
class AttributeSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(names) < 1:
            raise SchemaError("attribute schema needs at least one name")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        object.__setattr__(self, "names", names)

    @property
    def count(self) -> int:
        return len(self.names)


@dataclass
class Sample:
    path: str                      # absolute after load
    cam: int
    identity: int | None = None    # remapped to [0,K) for labeled manifests
    attrs: tuple[int, ...] | None = None


@dataclass
class Manifest:
    schema: AttributeSchema
    domain: str
    role: str
    samples: list[Sample]
    id_map: dict[int, int] = field(default_factory=dict)  # original -> remapped

    @property
    def num_ids(self) -> int:
        return len({s.identity for s in self.samples if s.identity is not None})

    def __len__(self) -> int:
        return len(self.samples)


def _require(obj: dict, key: str, path, line=None):
    if key not in obj:
        raise ManifestError(f"missing field {key!r}", path, line)
    return obj[key]


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest pair; identity ids are remapped to [0,K)."""
    header_path = Path(path)
    if header_path.suffix == ".jsonl":
        header_path = header_path.with_suffix(".json")
    lines_path = header_path.with_suffix(".jsonl")
    if not header_path.exists():
        raise ManifestError("header file not found", header_path)
    if not lines_path.exists():
        raise ManifestError("samples file not found", lines_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"invalid header JSON: {e}", header_path) from e
    schema_obj = _require(header, "schema", header_path)
    names = _require(schema_obj, "names", header_path)
    try:
        schema = AttributeSchema(tuple(names))
    except SchemaError as e:
        raise ManifestError(str(e), header_path) from e
    domain = _require(header, "domain", header_path)
    role = _require(header, "role", header_path)
    if domain not in DOMAINS:
        raise ManifestError(f"domain must be one of {DOMAINS}, got {domain!r}", header_path)
    if role not in ROLES:
        raise ManifestError(f"role must be one of {ROLES}, got {role!r}", header_path)

    unlabeled = domain == "target" and role == "train"
    base = header_path.parent
    samples: list[Sample] = []
    seen_paths: set[str] = set()
    raw_ids: list[int | None] = []
    for lineno, line in enumerate(lines_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"invalid sample JSON: {e}", lines_path, lineno) from e
        rel = _require(obj, "path", lines_path, lineno)
        if rel in seen_paths:
            raise ManifestError(f"duplicate tensor path {rel!r}", lines_path, lineno)
        seen_paths.add(rel)
        cam = _require(obj, "cam", lines_path, lineno)
        if not isinstance(cam, int):
            raise ManifestError(f"cam must be an integer, got {cam!r}", lines_path, lineno)
        sid = _require(obj, "id", lines_path, lineno)
        attrs = _require(obj, "attrs", lines_path, lineno)
        if unlabeled:
            sid, attrs = None, None
        if sid is None and role != "train":
            raise ManifestError("query/gallery samples need an id", lines_path, lineno)
        if sid is None and domain == "source":
            raise ManifestError("source samples need an id", lines_path, lineno)
        if sid is not None and not isinstance(sid, int):
            raise ManifestError(f"id must be an integer or null, got {sid!r}", lines_path, lineno)
        if attrs is not None:
            if len(attrs) != schema.count:
                raise ManifestError(
                    f"attrs length {len(attrs)} != schema M={schema.count}", lines_path, lineno
                )
            if any(a not in (0, 1) for a in attrs):
                raise ManifestError(f"non-binary attribute in {attrs}", lines_path, lineno)
            attrs = tuple(int(a) for a in attrs)
        elif domain == "source":
            raise ManifestError("source samples need attrs", lines_path, lineno)
        raw_ids.append(sid)
        samples.append(Sample(path=str(base / rel), cam=cam, identity=sid, attrs=attrs))

    id_map: dict[int, int] = {}
    labeled = sorted({i for i in raw_ids if i is not None})
    id_map = {orig: k for k, orig in enumerate(labeled)}
    for s in samples:
        if s.identity is not None:
            s.identity = id_map[s.identity]
    return Manifest(schema=schema, domain=domain, role=role, samples=samples, id_map=id_map)


def save_manifest(path, manifest: Manifest, relative_to=None) -> tuple[Path, Path]:
    """Write the header/lines pair; sample paths are stored relative to the manifest."""
    header_path = Path(path)
    if header_path.suffix == ".jsonl":
        header_path = header_path.with_suffix(".json")
    lines_path = header_path.with_suffix(".jsonl")
    base = Path(relative_to) if relative_to is not None else header_path.parent
    header = {
        "schema": {"names": list(manifest.schema.names)},
        "domain": manifest.domain,
        "role": manifest.role,
    }
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    with open(lines_path, "w") as fh:
        for s in manifest.samples:
            rec = {
                "path": os.path.relpath(s.path, base),
                "id": s.identity,
                "cam": s.cam,
                "attrs": list(s.attrs) if s.attrs is not None else None,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return header_path, lines_path


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Upscale-then-random-crop at a fixed ratio (9/8 mirrors 288x144 -> 256x128)."""

    ratio_num: int = 9
    ratio_den: int = 8
    flip: bool = False

    def __post_init__(self):
        if self.ratio_num < self.ratio_den or self.ratio_den < 1:
            raise ConfigError(f"upscale ratio must be >= 1, got {self.ratio_num}/{self.ratio_den}")


def _nn_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[:, rows[:, None], cols[None, :]]


def augment(image: np.ndarray, rng: np.random.Generator | None,
            config: AugmentConfig, mode: str = "train",
            out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Train: nearest-neighbor upscale then uniform random crop back to the
    train resolution. Eval: deterministic direct resize (identity at base res).
    """
    c, h, w = image.shape
    th, tw = out_hw if out_hw is not None else (h, w)
    if mode == "eval":
        return _nn_resize(image, th, tw)
    uh = (h * config.ratio_num) // config.ratio_den
    uw = (w * config.ratio_num) // config.ratio_den
    if th > uh or tw > uw:
        raise ConfigError(f"crop {th}x{tw} larger than upscaled image {uh}x{uw}")
    up = _nn_resize(image, uh, uw)
    oy = int(rng.integers(0, uh - th + 1))
    ox = int(rng.integers(0, uw - tw + 1))
    out = up[:, oy:oy + th, ox:ox + tw]
    if config.flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Batch pairing
# ---------------------------------------------------------------------------


@dataclass
class BatchPair:
    source: list[Sample]
    target: list[Sample] | None


class PairSampler:
    """Pairs source batches (without replacement per epoch) with target batches
    drawn from a reshuffled-on-exhaustion cycle of the target set."""

    def __init__(self, source: Manifest, target: Manifest | None, batch_size: int,
                 source_rng: np.random.Generator, target_rng: np.random.Generator | None):
        if len(source) == 0 or (target is not None and len(target) == 0):
            raise BatchSizeError("cannot sample from an empty manifest")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.source = source
        self.target = target
        self.batch_size = batch_size
        self.source_rng = source_rng
        self.target_rng = target_rng
        self._target_order: list[int] = []

    @property
    def steps_per_epoch(self) -> int:
        return len(self.source) // self.batch_size

    def _next_target_indices(self, n: int) -> list[int]:
        out: list[int] = []
        while len(out) < n:
            if not self._target_order:
                self._target_order = list(self.target_rng.permutation(len(self.target)))
            out.append(self._target_order.pop(0))
        return out

    def epoch(self):
        """Yield steps_per_epoch BatchPairs; drops the last partial source batch.

        The target cycle restarts each epoch so resumed runs draw identically to
        uninterrupted ones.
        """
        if self.steps_per_epoch < 1:
            raise BatchSizeError(
                f"source set of {len(self.source)} is smaller than one batch of {self.batch_size}"
            )
        self._target_order = []
        perm = self.source_rng.permutation(len(self.source))
        for step in range(self.steps_per_epoch):
            idx = perm[step * self.batch_size:(step + 1) * self.batch_size]
            src = [self.source.samples[i] for i in idx]
            tgt = None
            if self.target is not None:
                tgt = [self.target.samples[i]
                       for i in self._next_target_indices(self.batch_size)]
            yield BatchPair(source=src, target=tgt)


def sample_batch_pair(source: Manifest, target: Manifest,
                      rng: np.random.Generator, batch_size: int = 32) -> BatchPair:
    """One-off paired draw (the stateful PairSampler drives full epochs)."""
    sampler = PairSampler(source, target, batch_size, rng, rng)
    return next(sampler.epoch())


class TensorCache:
    """Read-through cache of sample tensors, keyed by absolute path."""

    def __init__(self):
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._store.get(path)
        if arr is None:
            arr = read_tensor_file(path)
            self._store[path] = arr
        return arr


# ---------------------------------------------------------------------------
# Synthetic two-domain benchmark
# ---------------------------------------------------------------------------

# Shape of the domain shift and the camera effect, relative to unit-ish
# template amplitude. The shift decomposes into channel mixing and a per-channel
# intensity offset; the drawn perturbations are renormalized to these Frobenius
# magnitudes (random direction, deterministic strength) so every seed shifts
# equally hard, then scaled by SynthConfig.shift. Cameras differ by a contrast
# factor and a brightness step.
_MIX_NORM = 4.2
_OFFSET_NORM = 3.1
_CAM_BRIGHTNESS_STEP = 0.2
_CAM_CONTRAST_STEP = 0.15


@dataclass(frozen=True)
class SynthConfig:
    ids: int = 20            # identities per domain (disjoint between domains)
    per_id: int = 10
    height: int = 32
    width: int = 16
    channels: int = 3
    cameras: int = 2
    shift: float = 1.0       # strength of the target domain's affine color shift
    noise: float = 0.3
    attr_bits: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.ids < 2:
            raise ConfigError(f"need at least 2 identities, got {self.ids}")
        if self.per_id < self.cameras or self.cameras < 2:
            raise ConfigError("need >= 2 cameras and per_id >= cameras")
        if self.attr_bits < 1 or self.attr_bits > self.height:
            raise ConfigError(f"attr_bits must lie in [1,{self.height}]")


def _smooth_template(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    """Zero-mean smooth random blobs: coarse normal grid, NN-upsampled, box-blurred."""
    ch, cw = max(h // 4, 1), max(w // 4, 1)
    coarse = rng.normal(0.0, 1.0, size=(c, ch, cw))
    img = _nn_resize(coarse, h, w)
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + h, dx:dx + w]
    out /= 9.0
    return out - out.mean()


def _attr_bits(template: np.ndarray, m: int) -> tuple[int, ...]:
    h = template.shape[1]
    edges = np.linspace(0, h, m + 1).astype(int)
    return tuple(int(template[:, a:b, :].mean() > 0) for a, b in zip(edges[:-1], edges[1:]))


def synth_generate(config: SynthConfig, out_dir) -> tuple[Path, Path, Path]:
    """Write a two-domain benchmark; returns (source manifest, target manifest, sidecar).

    Each identity is a smooth template; samples add per-sample noise and a
    per-camera brightness offset. Target images additionally pass through a
    global affine map on the channel vector (strength `shift`). Target identity
    labels go only into the sealed sidecar.
    """
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    rng = stream(config.seed, "synth")
    c, h, w = config.channels, config.height, config.width
    schema = AttributeSchema(tuple(f"band{m}" for m in range(config.attr_bits)))
    cam_pos = np.arange(config.cameras) - (config.cameras - 1) / 2.0
    cam_offsets = _CAM_BRIGHTNESS_STEP * cam_pos * 2.0
    cam_gains = 1.0 + _CAM_CONTRAST_STEP * cam_pos * 2.0

    # One affine color map per generated dataset, scaled by the shift strength.
    mix = np.eye(c) + config.shift * rng.normal(0.0, _MIX_STD, size=(c, c))
    offset = config.shift * rng.normal(0.0, _OFFSET_STD, size=(c, 1, 1))

    truth_ids: list[int] = []
    truth_paths: list[str] = []
    manifests: dict[str, Manifest] = {}
    for domain in DOMAINS:
        samples: list[Sample] = []
        for k in range(config.ids):
            template = _smooth_template(rng, c, h, w)
            bits = _attr_bits(template, config.attr_bits)
            for j in range(config.per_id):
                cam = j % config.cameras
                img = (cam_gains[cam] * template
                       + config.noise * rng.normal(size=(c, h, w)) + cam_offsets[cam])
                if domain == "target":
                    img = np.einsum("ij,jhw->ihw", mix, img) + offset
                rel = f"tensors/{domain}_{k:03d}_{j:02d}.t"
                write_tensor_file(out / rel, img.astype(np.float32))
                if domain == "target":
                    truth_ids.append(k)
                    truth_paths.append(rel)
                    samples.append(Sample(path=str(out / rel), cam=cam))
                else:
                    samples.append(Sample(path=str(out / rel), cam=cam,
                                          identity=k, attrs=bits))
        manifests[domain] = Manifest(schema=schema, domain=domain, role="train",
                                     samples=samples,
                                     id_map={k: k for k in range(config.ids)}
                                     if domain == "source" else {})

    src_path, _ = save_manifest(out / "source.json", manifests["source"])
    tgt_path, _ = save_manifest(out / "target.json", manifests["target"])
    sidecar = out / "target_truth.json"
    sidecar.write_text(json.dumps(
        {"version": 1, "ids": truth_ids, "paths": truth_paths}, sort_keys=True) + "\n")
    return src_path, tgt_path, sidecar
