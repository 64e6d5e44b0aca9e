"""Patch grids, per-patch nucleus index sets and training target maps.

Targets per patch: instance map, binary mask ``B``, horizontal/vertical
distance maps ``D`` and a one-hot type mask ``S`` with channels
(background, Neoplastic, Epithelial, Inflammatory, Connective). Unknown
nuclei stay in ``B``/``D`` but their type pixels are background with
``ignore = 1``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError
from .ingest import CellRecord, SlideManifest

TYPE_CLASSES = ("background", "Neoplastic", "Epithelial", "Inflammatory", "Connective")
IGNORE_INDEX = 255
DEFAULT_PATCH_SIZE = 256
DEFAULT_STRIDE = 256


@dataclass(frozen=True)
class PatchSpec:
    index: int
    x0: int
    y0: int
    width: int
    height: int
    tissue: str = ""

    @property
    def name(self) -> str:
        return f"patch_{self.index}"


def make_patches(manifest: SlideManifest, patch_size: int = DEFAULT_PATCH_SIZE,
                 stride: int = DEFAULT_STRIDE) -> list[PatchSpec]:
    """Row-major grid with origins at every multiple of ``stride`` inside the slide.

    Patches at the right/bottom edge are cut to the slide extent.
    """
    if patch_size < 1 or stride < 1:
        raise ValidationError("patch_size and stride must be >= 1")
    out = []
    for y0 in range(0, manifest.height, stride):
        for x0 in range(0, manifest.width, stride):
            out.append(PatchSpec(len(out), x0, y0, min(patch_size, manifest.width - x0),
                                 min(patch_size, manifest.height - y0), manifest.tissue))
    return out


def _in_patch(patch: PatchSpec, cell: CellRecord) -> np.ndarray:
    xs, ys = cell.pixel_xs, cell.pixel_ys
    return ((xs >= patch.x0) & (xs < patch.x0 + patch.width)
            & (ys >= patch.y0) & (ys < patch.y0 + patch.height))


def index_set(patch: PatchSpec, cells: Sequence[CellRecord]) -> list[int]:
    """Indices of cells whose rasterized interior touches the patch."""
    out = []
    for j, c in enumerate(cells):
        x_lo, y_lo, x_hi, y_hi = c.bbox
        if x_hi < patch.x0 or x_lo >= patch.x0 + patch.width:
            continue
        if y_hi < patch.y0 or y_lo >= patch.y0 + patch.height:
            continue
        if _in_patch(patch, c).any():
            out.append(j)
    return out


def index_sets(patches: Sequence[PatchSpec], cells: Sequence[CellRecord], patch_size: int,
               stride: int) -> list[list[int]]:
    """All index sets at once, using the regular grid to shortlist candidates."""
    if not patches:
        return []
    by_origin = {(p.x0, p.y0): p.index for p in patches}
    sets: list[list[int]] = [[] for _ in patches]
    for j, c in enumerate(cells):
        x_lo, y_lo, x_hi, y_hi = c.bbox
        cols = range(max(0, (x_lo - patch_size) // stride + 1), x_hi // stride + 1)
        rows = range(max(0, (y_lo - patch_size) // stride + 1), y_hi // stride + 1)
        for r in rows:
            for q in cols:
                i = by_origin.get((q * stride, r * stride))
                if i is not None and _in_patch(patches[i], c).any():
                    sets[i].append(j)
    return [sorted(s) for s in sets]


@dataclass(frozen=True, eq=False)
class TargetMaps:
    instance_map: np.ndarray  # int32, 0 = background
    binary: np.ndarray  # uint8
    hv: np.ndarray  # float32 (H, W, 2): horizontal, vertical
    type_onehot: np.ndarray  # uint8 (H, W, 5)
    ignore: np.ndarray  # uint8
    instances: tuple[tuple[int, str, str], ...]  # (local id, cell id, label)

    def type_index(self) -> np.ndarray:
        """Per-pixel class index with ``IGNORE_INDEX`` on ignored pixels."""
        idx = self.type_onehot.argmax(axis=2).astype(np.uint8)
        idx[self.ignore.astype(bool)] = IGNORE_INDEX
        return idx


def rasterize(patch: PatchSpec, cells: Sequence[tuple[CellRecord, str | None]]) -> TargetMaps:
    """Paint nuclei (largest first, so smaller ones stay on top) and derive the targets."""
    h, w = patch.height, patch.width
    inst = np.zeros((h, w), dtype=np.int32)
    for c, label in cells:
        if label is None:
            raise ValidationError(f"cell {c.cell_id!r} in {patch.name} has no label")
    ordered = sorted(cells, key=lambda cl: (-cl[0].area_px, cl[0].cell_id))
    local = []
    for local_id, (c, label) in enumerate(ordered, start=1):
        m = _in_patch(patch, c)
        ly, lx = c.pixel_ys[m] - patch.y0, c.pixel_xs[m] - patch.x0
        inst[ly, lx] = local_id
        local.append((ly, lx))

    hv = np.zeros((h, w, 2), dtype=np.float64)
    onehot = np.zeros((h, w, len(TYPE_CLASSES)), dtype=np.uint8)
    onehot[..., 0] = 1
    ignore = np.zeros((h, w), dtype=np.uint8)
    present = []
    for local_id, ((c, label), (ly, lx)) in enumerate(zip(ordered, local), start=1):
        keep = inst[ly, lx] == local_id
        ly, lx = ly[keep], lx[keep]
        if len(ly) == 0:
            continue
        present.append((local_id, c.cell_id, label))
        dx = lx - lx.mean()
        dy = ly - ly.mean()
        sx, sy = np.abs(dx).max(), np.abs(dy).max()
        hv[ly, lx, 0] = dx / sx if sx > 0 else 0.0
        hv[ly, lx, 1] = dy / sy if sy > 0 else 0.0
        if label in TYPE_CLASSES[1:]:
            onehot[ly, lx, 0] = 0
            onehot[ly, lx, TYPE_CLASSES.index(label)] = 1
        else:
            ignore[ly, lx] = 1
    return TargetMaps(inst, (inst > 0).astype(np.uint8), hv.astype(np.float32), onehot, ignore,
                      tuple(present))


# --------------------------------------------------------------------------
# on-disk dataset


def write_patch(directory, patch: PatchSpec, maps: TargetMaps, config_hash: str = "") -> Path:
    d = Path(directory) / patch.name
    d.mkdir(parents=True, exist_ok=True)
    if maps.instance_map.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValidationError(f"{patch.name}: more than 65535 instances")
    Image.fromarray(maps.instance_map.astype(np.uint16)).save(d / "inst.png")
    Image.fromarray(maps.type_index()).save(d / "type.png")
    planes = np.ascontiguousarray(np.moveaxis(maps.hv, 2, 0), dtype="<f4")
    (d / "hv.bin").write_bytes(planes.tobytes())
    meta = {
        "H": patch.height,
        "W": patch.width,
        "origin": [patch.x0, patch.y0],
        "tissue": patch.tissue,
        "instances": [{"id": i, "cell_id": cid, "label": lab} for i, cid, lab in maps.instances],
        "config_hash": config_hash,
    }
    (d / "hv.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def write_dataset(directory, patches: Sequence[PatchSpec], cells: Sequence[CellRecord],
                  labels: dict[str, str], manifest: SlideManifest, patch_size: int, stride: int,
                  config: dict | None = None, config_hash: str = "", threads: int = 1) -> Path:
    """Rasterize every patch and write the dataset directory plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sets = index_sets(patches, cells, patch_size, stride)

    def one(i: int) -> dict:
        p = patches[i]
        members = [(cells[j], labels.get(cells[j].cell_id)) for j in sets[i]]
        maps = rasterize(p, members)
        try:
            write_patch(directory, p, maps, config_hash)
        except OSError as exc:
            raise OSError(f"failed writing {directory / p.name}: {exc}") from exc
        return {"index": p.index, "dir": p.name, "origin": [p.x0, p.y0], "size": [p.width, p.height],
                "n_nuclei": len(maps.instances)}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(one, range(len(patches))))
    else:
        entries = [one(i) for i in range(len(patches))]
    doc = {
        "classes": list(TYPE_CLASSES),
        "ignore_index": IGNORE_INDEX,
        "patch_size": patch_size,
        "stride": stride,
        "tissue": manifest.tissue,
        "slide": {"width": manifest.width, "height": manifest.height, "mpp": manifest.mpp},
        "config_hash": config_hash,
        "config": config or {},
        "patches": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return directory


@dataclass(frozen=True, eq=False)
class PatchTargets:
    """A patch read back from disk."""

    name: str
    instance_map: np.ndarray
    type_index: np.ndarray
    hv: np.ndarray
    labels: dict[int, str]
    meta: dict


def read_patch(directory) -> PatchTargets:
    d = Path(directory)
    inst = np.array(Image.open(d / "inst.png")).astype(np.int64)
    typ = np.array(Image.open(d / "type.png")).astype(np.uint8)
    meta_path = d / "hv.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"H": inst.shape[0], "W": inst.shape[1]}
    hv_path = d / "hv.bin"
    if hv_path.exists():
        hv = np.frombuffer(hv_path.read_bytes(), dtype="<f4").reshape(2, meta["H"], meta["W"])
        hv = np.moveaxis(hv, 0, 2)
    else:
        hv = np.zeros(inst.shape + (2,), dtype=np.float32)
    if "instances" in meta:
        labels = {int(e["id"]): e["label"] for e in meta["instances"]}
    else:
        labels = {}
        for i in np.unique(inst[inst > 0]):
            vals, counts = np.unique(typ[inst == i], return_counts=True)
            v = int(vals[np.argmax(counts)])
            labels[int(i)] = "Unknown" if v == IGNORE_INDEX else TYPE_CLASSES[v]
    return PatchTargets(d.name, inst, typ, hv, labels, meta)


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset manifest not found")
    return json.loads(path.read_text())
