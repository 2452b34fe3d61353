"""Episode-pack container: a JSON manifest followed by raw tensor blobs.

Layout of a .epk file:

    magic  b"EPK1"
    u32    manifest length in bytes (little-endian)
    bytes  manifest JSON (utf-8, sorted keys)
    blobs  one per tensor, in manifest order:
             u32 rank, u32 * rank dims, float32 * prod(dims) data (LE)

Tensor order per episode: query maps L2, L3, L4, then for each class id
ascending, for each shot, its L2, L3, L4 support maps.
"""

from __future__ import annotations

import json
import struct
from io import BufferedReader, BufferedWriter

import numpy as np

from .episodes import Episode, SynthConfig
from .tensor_ops import FeatureMap, Level

MAGIC = b"EPK1"
_LEVELS = (Level.L2, Level.L3, Level.L4)


def write_tensor(f: BufferedWriter, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f: BufferedReader) -> np.ndarray:
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(dims))
    data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
    return data.astype(np.float32)


def _manifest(episodes: list[Episode], cfg: SynthConfig | None) -> dict:
    levels_meta = {}
    first = episodes[0]
    for lv in _LEVELS:
        q = first.levels[lv]
        s = first.supports[first.class_ids[0]][0][lv]
        levels_meta[lv.value] = {
            "channels": q.channels,
            "query_grid": [q.height, q.width],
            "support_grid": [s.height, s.width],
        }
    man = {
        "format": 1,
        "num_classes": len(first.class_ids),
        "k": len(first.supports[first.class_ids[0]]),
        "levels": levels_meta,
        "episodes": [
            {
                "query_id": ep.query_id,
                "present": sorted(ep.present_classes),
                "gt_boxes": {
                    str(cid): [list(b) for b in boxes]
                    for cid, boxes in sorted(ep.gt_boxes.items())
                },
            }
            for ep in episodes
        ],
    }
    if cfg is not None:
        man["noise_sigma"] = cfg.noise_sigma
        man["blob_amplitude"] = cfg.blob_amplitude
    return man


def write_pack(path, episodes: list[Episode], cfg: SynthConfig | None = None) -> None:
    if not episodes:
        raise ValueError("cannot write an empty pack")
    manifest = json.dumps(
        _manifest(episodes, cfg), sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for ep in episodes:
            for lv in _LEVELS:
                write_tensor(f, ep.levels[lv].data)
            for cid in ep.class_ids:
                for shot in ep.supports[cid]:
                    for lv in _LEVELS:
                        write_tensor(f, shot[lv].data)


def read_pack(path) -> list[Episode]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an episode pack (bad magic)")
        (mlen,) = struct.unpack("<I", f.read(4))
        man = json.loads(f.read(mlen).decode())
        num_classes = man["num_classes"]
        k = man["k"]
        episodes = []
        for meta in man["episodes"]:
            levels = {lv: FeatureMap(read_tensor(f), lv) for lv in _LEVELS}
            supports = {}
            for cid in range(num_classes):
                shots = []
                for _ in range(k):
                    shots.append({lv: FeatureMap(read_tensor(f), lv) for lv in _LEVELS})
                supports[cid] = shots
            episodes.append(
                Episode(
                    query_id=meta["query_id"],
                    levels=levels,
                    supports=supports,
                    present_classes=frozenset(meta["present"]),
                    gt_boxes={
                        int(cid): [tuple(b) for b in boxes]
                        for cid, boxes in meta["gt_boxes"].items()
                    },
                )
            )
    return episodes
