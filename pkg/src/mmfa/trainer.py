"""Single-stage learn-and-adapt loop: paired batches, weighted loss, SGD.

Nesterov momentum in the lookahead form: with g~ = g + wd*theta,
v <- mu*v + g~, theta <- theta - lr*(g~ + mu*v). Weight decay applies to
conv/linear weight matrices only; the optimizer refuses parameter sets where
the exclusion set is not exactly the BN scales/shifts and bias vectors.

Checkpoints are directories: one tensor file per parameter / buffer / velocity
plus an index JSON carrying the resolved config, epoch, seed, and the RNG
stream states needed for bitwise resume.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AugmentConfig,
    Manifest,
    PairSampler,
    TensorCache,
    augment,
    load_manifest,
)
from .errors import ConfigError, ContractError, NumericError, ParameterError
from .kernels import FeatureBatch, KernelSpec
from .losses import (
    LossReport,
    LossWeights,
    attribute_alignment_loss,
    attribute_loss,
    deep_feature_alignment_loss,
    identity_loss,
    make_report,
    weighted_total,
)
from .model import MMFAModel, ModelConfig
from .seeding import capture_state, restore_state, stream
from .tensor import Param, Tape, Tensor, backward, read_tensor_file, write_tensor_file

_EXCLUDED_SUFFIXES = (".bias", ".gamma", ".beta")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epoch: int = 20
    lr_drop_factor: float = 10.0
    seed: int = 0
    checkpoint_every: int = 5
    dtype: str = "f32"
    weights: LossWeights = field(default_factory=LossWeights)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 (BN constraint), got {self.batch_size}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.lr <= 0 or self.lr_drop_factor < 1:
            raise ConfigError("lr must be > 0 and lr_drop_factor >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


_NESTED_FIELDS = {
    "weights": LossWeights,
    "kernel": KernelSpec,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "extractor": None,  # resolved below to avoid an import cycle at definition time
}


def _config_from_dict(cls, data: dict):
    from .model import ExtractorConfig  # local: completes the nested table

    nested = dict(_NESTED_FIELDS)
    nested["extractor"] = ExtractorConfig
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = nested.get(f.name)
        kwargs[f.name] = _config_from_dict(sub, value) if sub is not None else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad {cls.__name__}: {e}") from e


def _jsonify(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonify(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_jsonify(v) for v in value]
    return value


def config_to_dict(config: TrainConfig) -> dict:
    return _jsonify(config)


def config_from_dict(data: dict) -> TrainConfig:
    return _config_from_dict(TrainConfig, data)


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return config_from_dict(data)


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """0.01 through the drop epoch (default 20), divided by the factor after it."""
    if epoch < 1:
        raise ParameterError(f"epochs are 1-based, got {epoch}")
    if epoch <= config.lr_drop_epoch:
        return config.lr
    return config.lr / config.lr_drop_factor


class SGD:
    """Nesterov-momentum SGD; decays conv/linear weights only, clears grads after stepping."""

    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in optimizer")
        for p in params:
            excluded_name = p.name.endswith(_EXCLUDED_SUFFIXES)
            if p.decay == excluded_name:
                raise ContractError(
                    f"weight-decay exclusion violated for {p.name!r}: decay={p.decay}"
                )
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {p.name: np.zeros_like(p.value.data) for p in params}

    def step(self) -> None:
        mu = self.momentum
        for p in self.params:
            g = p.grad
            if p.decay and self.weight_decay != 0.0:
                g = g + self.weight_decay * p.value.data
            v = self.velocity[p.name]
            v *= mu
            v += g
            p.value.data -= self.lr * (g + mu * v)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: list[Param], state: SGD) -> None:
    """Apply one update from the gradients currently held by the params."""
    if params is not state.params and [p.name for p in params] != [p.name for p in state.params]:
        raise ContractError("sgd_step called with a different parameter set")
    state.step()


@dataclass
class RngBundle:
    """All streams a training run consumes, keyed for checkpointing."""

    streams: dict[str, np.random.Generator]

    @classmethod
    def for_training(cls, seed: int) -> "RngBundle":
        labels = ("init", "data.source", "data.target", "dropout.source", "dropout.target")
        return cls({label: stream(seed, label) for label in labels})

    def __getitem__(self, label: str) -> np.random.Generator:
        return self.streams[label]

    def capture(self) -> dict:
        return {label: capture_state(g) for label, g in self.streams.items()}

    def restore(self, states: dict) -> None:
        for label, st in states.items():
            self.streams[label] = restore_state(st)


def train_step(model: MMFAModel, optimizer: SGD, source_images: Tensor,
               source_ids, source_attrs, target_images: Tensor | None,
               weights: LossWeights, kernel: KernelSpec,
               source_rng=None, target_rng=None, step: int = 0) -> LossReport:
    """Forward both domains, backprop the weighted loss, apply one SGD update."""
    tape = Tape()
    with tape:
        out_s = model.forward(source_images, "train", source_rng, "source",
                              update_running=True)
        l_id = identity_loss(out_s.id_logits, source_ids)
        l_attr = attribute_loss(out_s.attr_logits, source_attrs)
        l_aal = l_mdal = None
        if target_images is not None:
            out_t = model.forward(target_images, "train", target_rng, "target",
                                  update_running=False)
            src_feats = [FeatureBatch(z, "source") for z in out_s.attr_logits]
            tgt_feats = [FeatureBatch(z, "target") for z in out_t.attr_logits]
            l_aal = attribute_alignment_loss(src_feats, tgt_feats, kernel)
            l_mdal = deep_feature_alignment_loss(out_s.pooled, out_t.pooled, kernel)
        total = weighted_total(l_id, l_attr, l_aal, l_mdal, weights)

    components = (
        l_id.item(),
        l_attr.item(),
        l_aal.item() if l_aal is not None else 0.0,
        l_mdal.item() if l_mdal is not None else 0.0,
    )
    if not all(np.isfinite(components)):
        backward(total, tape)
        dump = {
            "step": step,
            "l_id": components[0], "l_attr": components[1],
            "l_aal": components[2], "l_mdal": components[3],
            "grad_norms": {p.name: float(np.linalg.norm(p.grad)) for p in model.parameters()},
        }
        print(json.dumps(dump, sort_keys=True), file=sys.stderr)
        raise NumericError(f"non-finite loss at step {step}; diagnostics on stderr")
    backward(total, tape)
    optimizer.step()
    return make_report(*components, weights)


def _batch_arrays(samples, cache: TensorCache, aug: AugmentConfig, rng,
                  out_hw: tuple[int, int], dtype):
    imgs = [augment(cache.get(s.path), rng, aug, "train", out_hw) for s in samples]
    return np.stack(imgs).astype(dtype, copy=False)


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_path: Path
    epochs_run: int
    final_report: LossReport | None


def train(source, target, config: TrainConfig, out_dir, resume: bool = False) -> TrainResult:
    """Run the full loop; writes `train_log.jsonl` and periodic checkpoints under out_dir."""
    src = source if isinstance(source, Manifest) else load_manifest(source)
    tgt = None
    if target is not None:
        tgt = target if isinstance(target, Manifest) else load_manifest(target)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_ids = src.num_ids
    num_attrs = src.schema.count
    dtype = config.np_dtype

    rngs = RngBundle.for_training(config.seed)
    model = MMFAModel(config.model, num_ids, num_attrs, rngs["init"], dtype)
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay)

    start_epoch = 0
    log_mode = "w"
    if resume:
        ckpt = latest_checkpoint(out)
        if ckpt is None:
            raise ConfigError(f"--resume requested but no checkpoint under {out}")
        start_epoch = restore_checkpoint(ckpt, model, optimizer, rngs)
        log_mode = "a"

    sampler = PairSampler(src, tgt, config.batch_size, rngs["data.source"],
                          rngs["data.target"] if tgt is not None else None)
    cache = TensorCache()
    hw = (config.model.extractor.height, config.model.extractor.width)
    log_path = out / "train_log.jsonl"
    steps_per_epoch = sampler.steps_per_epoch
    report = None
    with open(log_path, log_mode) as log:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            optimizer.lr = lr_at_epoch(epoch, config)
            sums = np.zeros(5)
            for i, pair in enumerate(sampler.epoch()):
                step = (epoch - 1) * steps_per_epoch + i + 1
                src_imgs = Tensor(_batch_arrays(pair.source, cache, config.augment,
                                                rngs["data.source"], hw, dtype))
                ids = np.array([s.identity for s in pair.source])
                attrs = np.array([s.attrs for s in pair.source])
                tgt_imgs = None
                if pair.target is not None:
                    tgt_imgs = Tensor(_batch_arrays(pair.target, cache, config.augment,
                                                    rngs["data.target"], hw, dtype))
                report = train_step(model, optimizer, src_imgs, ids, attrs, tgt_imgs,
                                    config.weights, config.kernel,
                                    rngs["dropout.source"], rngs["dropout.target"],
                                    step=step)
                log.write(json.dumps(report.to_record(step), sort_keys=True) + "\n")
                sums += (report.l_id, report.l_attr, report.l_aal,
                         report.l_mdal, report.l_all)
            means = sums / steps_per_epoch
            log.write(json.dumps({
                "epoch": epoch, "lr": optimizer.lr, "steps": steps_per_epoch,
                "mean_l_id": means[0], "mean_l_attr": means[1], "mean_l_aal": means[2],
                "mean_l_mdal": means[3], "mean_l_all": means[4],
            }, sort_keys=True) + "\n")
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(out / f"ckpt_epoch_{epoch:04d}", model, optimizer,
                                rngs, epoch, config, num_ids, num_attrs)
    return TrainResult(out / f"ckpt_epoch_{config.epochs:04d}", log_path,
                       config.epochs - start_epoch, report)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt_dir, model: MMFAModel, optimizer: SGD | None,
                    rngs: RngBundle | None, epoch: int, config: TrainConfig,
                    num_ids: int, num_attrs: int) -> Path:
    ckpt = Path(ckpt_dir)
    for sub in ("params", "buffers", "velocity"):
        (ckpt / sub).mkdir(parents=True, exist_ok=True)
    index = {
        "format": 1,
        "epoch": epoch,
        "seed": config.seed,
        "num_ids": num_ids,
        "num_attrs": num_attrs,
        "dtype": config.dtype,
        "config": config_to_dict(config),
        "params": {},
        "buffers": {},
        "velocity": {},
        "rng": rngs.capture() if rngs is not None else {},
    }
    for p in model.parameters():
        rel = f"params/{p.name}.t"
        write_tensor_file(ckpt / rel, p.value.data)
        index["params"][p.name] = {"file": rel, "shape": list(p.shape)}
    for name, buf in model.buffers().items():
        rel = f"buffers/{name}.t"
        write_tensor_file(ckpt / rel, buf)
        index["buffers"][name] = {"file": rel, "shape": list(buf.shape)}
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            rel = f"velocity/{name}.t"
            write_tensor_file(ckpt / rel, v)
            index["velocity"][name] = {"file": rel, "shape": list(v.shape)}
    (ckpt / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
    return ckpt


def latest_checkpoint(out_dir) -> Path | None:
    candidates = sorted(Path(out_dir).glob("ckpt_epoch_*"))
    return candidates[-1] if candidates else None


def load_checkpoint(ckpt_dir) -> tuple[MMFAModel, TrainConfig, dict]:
    """Rebuild the model from a checkpoint directory; returns (model, config, index)."""
    ckpt = Path(ckpt_dir)
    index_path = ckpt / "index.json"
    if not index_path.exists():
        raise ConfigError(f"{ckpt}: not a checkpoint (no index.json)")
    index = json.loads(index_path.read_text())
    config = config_from_dict(index["config"])
    model = MMFAModel(config.model, index["num_ids"], index["num_attrs"],
                      stream(index["seed"], "init"), config.np_dtype)
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(index["params"]):
        raise ConfigError(f"{ckpt}: parameter set does not match its config echo")
    for name, meta in index["params"].items():
        params[name].value.data[...] = read_tensor_file(ckpt / meta["file"])
    buffers = model.buffers()
    for name, meta in index["buffers"].items():
        buffers[name][...] = read_tensor_file(ckpt / meta["file"])
    return model, config, index


def restore_checkpoint(ckpt_dir, model: MMFAModel, optimizer: SGD,
                       rngs: RngBundle) -> int:
    """In-place restore for resuming; returns the epoch the checkpoint was taken at."""
    loaded, _config, index = load_checkpoint(ckpt_dir)
    theirs = {p.name: p for p in loaded.parameters()}
    for p in model.parameters():
        p.value.data[...] = theirs[p.name].value.data
    their_buffers = loaded.buffers()
    for name, buf in model.buffers().items():
        buf[...] = their_buffers[name]
    for name, meta in index["velocity"].items():
        optimizer.velocity[name][...] = read_tensor_file(Path(ckpt_dir) / meta["file"])
    rngs.restore(index["rng"])
    return int(index["epoch"])
