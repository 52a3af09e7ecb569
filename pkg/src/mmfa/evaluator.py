"""Retrieval evaluation on pooled features: CMC/mAP, both protocols, attention export.

Ranking uses plain Euclidean distance on the pooled extractor output (no head
involvement, no L2 normalization unless asked). The junk rule drops gallery
entries sharing both identity and camera with the query; queries left without
any relevant gallery item are skipped and counted. AP is the mean of precision
at each relevant rank (no interpolation); ties break by gallery index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AttributeSchema, Manifest, Sample, TensorCache, _nn_resize
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    ManifestError,
    ParameterError,
    ProtocolError,
)
from .kernels import FeatureBatch
from .model import MMFAModel
from .seeding import stream
from .tensor import Tensor, read_tensor_file

DEFAULT_MAX_RANK = 50


@dataclass(frozen=True)
class EvalProtocol:
    kind: str = "single_query"      # single_query | random_splits
    splits: int = 10
    ratio: float = 0.5
    seed: int = 0
    max_rank: int = DEFAULT_MAX_RANK
    normalize: bool = False         # optional L2-normalize features before distances

    def __post_init__(self):
        if self.kind not in ("single_query", "random_splits"):
            raise ConfigError(f"unknown protocol kind {self.kind!r}")
        if not (0.0 < self.ratio < 1.0):
            raise ConfigError(f"split ratio must lie in (0,1), got {self.ratio}")
        if self.splits < 1:
            raise ConfigError(f"need >= 1 splits, got {self.splits}")

    def describe(self) -> dict:
        return {"kind": self.kind, "splits": self.splits, "ratio": self.ratio,
                "seed": self.seed, "max_rank": self.max_rank,
                "normalize": self.normalize}


@dataclass
class EvalReport:
    cmc: list[float]
    mAP: float
    protocol: dict
    skipped_queries: int = 0
    per_split: list[dict] | None = None

    def __post_init__(self):
        arr = np.asarray(self.cmc, dtype=np.float64)
        if arr.size and (np.any(np.diff(arr) < -1e-12)
                         or arr.min() < -1e-12 or arr.max() > 1 + 1e-12):
            raise ContractError(f"CMC must be non-decreasing within [0,1]: {arr}")
        if not (0.0 - 1e-12 <= self.mAP <= 1.0 + 1e-12):
            raise ContractError(f"mAP out of [0,1]: {self.mAP}")

    def rank(self, r: int) -> float:
        return self.cmc[r - 1]

    def to_dict(self) -> dict:
        out = {"cmc": [float(v) for v in self.cmc], "mAP": float(self.mAP),
               "protocol": self.protocol, "skipped_queries": self.skipped_queries}
        if self.per_split is not None:
            out["per_split"] = self.per_split
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def embed(manifest: Manifest, model: MMFAModel, batch_size: int = 64
          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled features for every sample: (features [n,D], ids, cams). Eval mode."""
    ext = model.config.extractor
    cache = TensorCache()
    feats = []
    for start in range(0, len(manifest), batch_size):
        chunk = manifest.samples[start:start + batch_size]
        imgs = np.stack([
            _nn_resize(cache.get(s.path), ext.height, ext.width) for s in chunk
        ]).astype(model.dtype, copy=False)
        _, pooled, _ = model.extract(Tensor(imgs), "eval")
        feats.append(pooled.features.data)
    features = np.concatenate(feats, axis=0)
    ids = np.array([-1 if s.identity is None else s.identity for s in manifest.samples])
    cams = np.array([s.cam for s in manifest.samples])
    return features, ids, cams


def distance_matrix(query, gallery) -> np.ndarray:
    """Euclidean distances between rows; computed in float64."""
    q = _as_array(query)
    g = _as_array(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"distance_matrix dims disagree: {q.shape} vs {g.shape}")
    q = q.astype(np.float64, copy=False)
    g = g.astype(np.float64, copy=False)
    d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (q @ g.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def _as_array(x) -> np.ndarray:
    if isinstance(x, FeatureBatch):
        return x.features.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def rank_metrics(dists: np.ndarray, q_ids, q_cams, g_ids, g_cams,
                 max_rank: int = DEFAULT_MAX_RANK,
                 protocol: dict | None = None) -> EvalReport:
    """CMC and mAP under the same-id-same-camera junk rule."""
    dists = np.asarray(dists)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    nq, ng = dists.shape
    if q_ids.shape != (nq,) or g_ids.shape != (ng,):
        raise DimensionError("id/cam arrays do not match the distance matrix")
    order = np.argsort(dists, axis=1, kind="stable")
    r = min(max_rank, ng)
    first_ranks = []
    aps = []
    skipped = 0
    for i in range(nq):
        ord_i = order[i]
        junk = (g_ids[ord_i] == q_ids[i]) & (g_cams[ord_i] == q_cams[i])
        kept_ids = g_ids[ord_i][~junk]
        rel = np.nonzero(kept_ids == q_ids[i])[0]
        if rel.size == 0:
            skipped += 1
            continue
        ranks = rel + 1
        first_ranks.append(ranks[0])
        aps.append(float((np.arange(1, ranks.size + 1) / ranks).mean()))
    if not first_ranks:
        raise ProtocolError("no query has a valid relevant gallery item")
    first = np.asarray(first_ranks)
    cmc = [(first <= k).mean() for k in range(1, r + 1)]
    return EvalReport(cmc=[float(v) for v in cmc], mAP=float(np.mean(aps)),
                      protocol=protocol or {}, skipped_queries=skipped)


def unseal_target(manifest: Manifest, sidecar_path) -> Manifest:
    """Attach sealed ground-truth ids to a target manifest (evaluation only)."""
    sidecar = Path(sidecar_path)
    truth = json.loads(sidecar.read_text())
    ids = truth["ids"]
    paths = truth["paths"]
    if len(ids) != len(manifest.samples):
        raise ManifestError(
            f"sidecar holds {len(ids)} ids for {len(manifest.samples)} samples", sidecar
        )
    base = sidecar.parent
    labeled = []
    for s, sid, rel in zip(manifest.samples, ids, paths):
        if Path(s.path) != (base / rel):
            raise ManifestError(f"sidecar path {rel!r} does not match {s.path!r}", sidecar)
        labeled.append(Sample(path=s.path, cam=s.cam, identity=int(sid), attrs=s.attrs))
    return Manifest(schema=manifest.schema, domain=manifest.domain, role="gallery",
                    samples=labeled, id_map={})


def run_protocol(model: MMFAModel, protocol: EvalProtocol,
                 query: Manifest | None = None, gallery: Manifest | None = None,
                 data: Manifest | None = None) -> EvalReport:
    """single_query: fixed query/gallery manifests. random_splits: seeded
    identity-level 50/50 partitions, single-shot, averaged over splits."""
    if protocol.kind == "single_query":
        if query is None or gallery is None:
            raise ProtocolError("single_query needs query and gallery manifests")
        qf, qi, qc = embed(query, model)
        gf, gi, gc = embed(gallery, model)
        if np.any(qi < 0) or np.any(gi < 0):
            raise ProtocolError("single_query manifests must carry identities")
        qf, gf = _maybe_normalize(qf, protocol), _maybe_normalize(gf, protocol)
        dists = distance_matrix(qf, gf)
        return rank_metrics(dists, qi, qc, gi, gc, protocol.max_rank,
                            protocol.describe())
    if data is None:
        raise ProtocolError("random_splits needs a whole-set manifest")
    feats, ids, cams = embed(data, model)
    if np.any(ids < 0):
        raise ProtocolError("random_splits data must carry identities "
                            "(unseal the sidecar for target sets)")
    feats = _maybe_normalize(feats, protocol)
    unique_ids = np.unique(ids)
    take = int(len(unique_ids) * protocol.ratio)
    if take < 2:
        raise ProtocolError(f"{len(unique_ids)} identities cannot form a "
                            f"{protocol.ratio} split with >= 2 identities")
    split_reports = []
    cmcs, maps, skipped = [], [], 0
    for s in range(protocol.splits):
        rng = stream(protocol.seed, f"eval.split.{s}")
        perm = rng.permutation(unique_ids)
        chosen = np.sort(perm[:take])
        q_idx, g_idx = [], []
        for pid in chosen:
            members = np.nonzero(ids == pid)[0]
            gal = int(members[rng.integers(0, members.size)])
            cross = members[cams[members] != cams[gal]]
            if cross.size == 0:
                raise ProtocolError(
                    f"identity {pid} has no image outside camera {cams[gal]}"
                )
            qry = int(cross[rng.integers(0, cross.size)])
            g_idx.append(gal)
            q_idx.append(qry)
        dists = distance_matrix(feats[q_idx], feats[g_idx])
        rep = rank_metrics(dists, ids[q_idx], cams[q_idx], ids[g_idx], cams[g_idx],
                           protocol.max_rank)
        cmcs.append(rep.cmc)
        maps.append(rep.mAP)
        skipped += rep.skipped_queries
        split_reports.append({"split": s, "rank1": rep.cmc[0], "mAP": rep.mAP,
                              "identities": [int(p) for p in chosen]})
    r = min(len(c) for c in cmcs)
    mean_cmc = np.mean([c[:r] for c in cmcs], axis=0)
    return EvalReport(cmc=[float(v) for v in mean_cmc], mAP=float(np.mean(maps)),
                      protocol=protocol.describe(), skipped_queries=skipped,
                      per_split=split_reports)


def _maybe_normalize(feats: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    if not protocol.normalize:
        return feats
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def export_attention(image: np.ndarray, model: MMFAModel, top_k: int,
                     out_dir) -> list[Path]:
    """Write PGM heatmaps for the top_k channels with the largest pooled value.

    Each map is min-max scaled to [0,255] (an all-equal map renders as 0) and
    nearest-neighbor upsampled to the input resolution.
    """
    if image.ndim != 3:
        raise DimensionError(f"expected a [C,H,W] image, got shape {image.shape}")
    _, h, w = image.shape
    fmaps, pooled, _ = model.extract(
        Tensor(image[None].astype(model.dtype)), "eval")
    maps = fmaps.data[0]
    values = pooled.features.data[0]
    if top_k < 1 or top_k > maps.shape[0]:
        raise ParameterError(f"top_k must lie in [1,{maps.shape[0]}], got {top_k}")
    # Descending by pooled value; ties prefer the lower channel index.
    ranked = np.lexsort((np.arange(values.size), -values))[:top_k]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ch in ranked:
        m = maps[ch]
        lo, hi = float(m.min()), float(m.max())
        if hi > lo:
            scaled = np.round((m - lo) / (hi - lo) * 255.0)
        else:
            scaled = np.zeros_like(m)
        up = _nn_resize(scaled[None].astype(np.float64), h, w)[0]
        path = out / f"channel_{int(ch):04d}.pgm"
        _write_pgm(path, np.clip(up, 0, 255).astype(np.uint8))
        written.append(path)
    return written


def _write_pgm(path: Path, gray: np.ndarray) -> None:
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(gray.tobytes())


def load_image_tensor(path) -> np.ndarray:
    return read_tensor_file(path)
