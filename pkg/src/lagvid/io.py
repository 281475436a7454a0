"""File formats: tensor containers, datasets, checkpoints, graymap strips.

A container is a zip archive holding ``metadata.json`` plus one ``.npy``
member per named tensor.  Members carry a fixed timestamp and are written
in sorted order, so identical content gives an identical byte stream.
Tensors are little-endian and C-ordered; ``np.load`` can read them too.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .nets import LagrangianModel
from .simulators import ObservationDataset, SystemSpec, TrajectoryDataset
from .vision import AutoEncoder

FORMAT_VERSION = 1
DATASET_DTYPE = np.dtype("<f4")
CHECKPOINT_DTYPE = np.dtype("<f8")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """A file does not follow the expected container layout."""


def write_container(path, tensors: Mapping[str, np.ndarray], metadata: Mapping, dtype: np.dtype) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("metadata.json", date_time=_ZIP_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(dict(metadata), sort_keys=True, indent=1))
        for name in sorted(tensors):
            buf = io.BytesIO()
            array = np.ascontiguousarray(np.asarray(tensors[name]), dtype=dtype)
            np.lib.format.write_array(buf, array, allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def read_container(path, dtype: np.dtype | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"{path}: not a readable container ({exc})") from exc
    with zf:
        names = zf.namelist()
        if "metadata.json" not in names:
            raise FormatError(f"{path}: missing metadata.json")
        metadata = json.loads(zf.read("metadata.json"))
        if metadata.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {metadata.get('format_version')!r}")
        tensors = {}
        for member in names:
            if not member.endswith(".npy"):
                continue
            array = np.lib.format.read_array(io.BytesIO(zf.read(member)), allow_pickle=False)
            if dtype is not None and array.dtype != dtype:
                raise FormatError(f"{path}: tensor {member} has dtype {array.dtype}, expected {dtype}")
            tensors[member[:-4]] = array
    return tensors, metadata


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _spec_metadata(spec: SystemSpec) -> dict:
    return {"system": spec.kind, "dt": spec.dt, "constants": spec.constants}


def _spec_from_metadata(meta: dict) -> SystemSpec:
    return SystemSpec(meta["system"], dt=meta["dt"], **meta["constants"])


def save_dataset(path, dataset: TrajectoryDataset | ObservationDataset, seed: int | None = None,
                 store_observations: bool = False) -> None:
    """Write a state-only or rendered dataset.

    Rendered datasets store per-frame ``states`` and ``frames``;
    ``observations`` are rebuilt from frames on load unless stored.
    """
    seed = dataset.seed if seed is None else seed
    n, t_states = dataset.states.shape[:2]
    meta = {"format_version": FORMAT_VERSION, "kind": "dataset", "seed": seed, "N": n,
            **_spec_metadata(dataset.spec)}
    tensors = {"states": dataset.states}
    if isinstance(dataset, ObservationDataset):
        h, w = dataset.frames.shape[-2:]
        meta.update({"T": dataset.T, "H": h, "W": w, "rendered": True})
        tensors["frames"] = dataset.frames
        if store_observations:
            tensors["observations"] = dataset.observations
    else:
        meta.update({"T": t_states, "rendered": False})
    write_container(path, tensors, meta, DATASET_DTYPE)


def load_dataset(path) -> TrajectoryDataset | ObservationDataset:
    tensors, meta = read_container(path, DATASET_DTYPE)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset file (kind={meta.get('kind')!r})")
    spec = _spec_from_metadata(meta)
    if meta.get("rendered"):
        ds = ObservationDataset(tensors["frames"], tensors["states"], spec, meta.get("seed"))
        if "observations" in tensors and not np.array_equal(tensors["observations"], ds.observations):
            raise FormatError(f"{path}: stored observations disagree with frames")
        return ds
    return TrajectoryDataset(tensors["states"], spec, meta.get("seed"))


def dataset_metadata(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("metadata.json"))


def _module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, model: LagrangianModel, autoencoder: AutoEncoder | None = None,
                    extra: Mapping | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "lagrangian": model.metadata(),
        "autoencoder": None if autoencoder is None else autoencoder.metadata(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        **(dict(extra) if extra else {}),
    }
    tensors = _module_tensors("lagrangian", model)
    if autoencoder is not None:
        tensors.update(_module_tensors("autoencoder", autoencoder))
    write_container(path, tensors, meta, CHECKPOINT_DTYPE)


def _load_state(module: torch.nn.Module, prefix: str, tensors: dict, dtype: torch.dtype) -> None:
    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name}")
        array = tensors[name]
        if tuple(array.shape) != tuple(ref.shape):
            raise FormatError(f"tensor {name} has shape {array.shape}, expected {tuple(ref.shape)}")
        state[key] = torch.from_numpy(array.copy()).to(dtype)
    module.load_state_dict(state)


def load_checkpoint(path) -> tuple[LagrangianModel, AutoEncoder | None, dict]:
    tensors, meta = read_container(path, CHECKPOINT_DTYPE)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file (kind={meta.get('kind')!r})")
    dtype = getattr(torch, meta.get("dtype", "float64"))
    lm = meta["lagrangian"]
    model = LagrangianModel(lm["m"], hidden=lm["hidden"], num_layers=lm["num_layers"], lam=lm["lam"])
    _load_state(model, "lagrangian", tensors, dtype)
    model.to(dtype)
    autoencoder = None
    if meta.get("autoencoder"):
        am = meta["autoencoder"]
        autoencoder = AutoEncoder(am["latent_dim"], image_size=am["image_size"], channels=am["channels"])
        _load_state(autoencoder, "autoencoder", tensors, dtype)
        autoencoder.to(dtype)
    return model, autoencoder, meta


def to_gray_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D image with values in [0, 1] as binary portable graymap (P5)."""
    pixels = to_gray_bytes(image)
    if pixels.ndim != 2:
        raise ValueError(f"graymap must be 2-D, got shape {pixels.shape}")
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 graymap with maxval 255 into a uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = data[pos + 1 :]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def image_strip(rows: list[list[np.ndarray | None]], gap: int = 1) -> np.ndarray:
    """Tile frames into a grid; ``None`` cells stay dark gray."""
    cells = [c for row in rows for c in row if c is not None]
    if not cells:
        raise ValueError("image strip needs at least one frame")
    h, w = cells[0].shape
    ncols = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + gap) - gap, ncols * (w + gap) - gap), 0.5)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            y, x = i * (h + gap), j * (w + gap)
            out[y : y + h, x : x + w] = 0.15 if cell is None else cell
    return out
