"""File utilities for the Layout Lab: tensor records, images, tables, manifests."""

import csv
import hashlib
import json
import logging
import struct
import subprocess
from pathlib import Path
from typing import Any, BinaryIO, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from ..base import CheckpointError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]


def write_tensor_record(handle: BinaryIO, array: np.ndarray) -> None:
    """Write one TNSR record: magic, version, rank, extents, f32 payload (LE)."""
    array = np.asarray(array)
    handle.write(TENSOR_MAGIC)
    handle.write(struct.pack("<II", TENSOR_VERSION, array.ndim))
    if array.ndim:
        handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
    handle.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise CheckpointError(f"Truncated tensor record: wanted {size} bytes, got {len(data)}")
    return data


def read_tensor_record(handle: BinaryIO) -> np.ndarray:
    """Read one TNSR record as a float32 array."""
    if _read_exact(handle, 4) != TENSOR_MAGIC:
        raise CheckpointError("Bad tensor magic (expected 'TNSR')")
    version, rank = struct.unpack("<II", _read_exact(handle, 8))
    if version != TENSOR_VERSION:
        raise CheckpointError(f"Unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(handle, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(handle, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        write_tensor_record(f, array)
    return path


def load_tensor(path: PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            return read_tensor_record(f)
    except OSError as e:
        raise CheckpointError(f"Cannot read tensor file {path}: {e}")


def save_ppm(path: PathLike, image: np.ndarray) -> Path:
    """Save a [3, H, W] image in [0, 1] as binary PPM (P6)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PPM")
    return path


def load_ppm(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return pixels.transpose(2, 0, 1).copy()


def save_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: PathLike, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> Path:
    """Write dict rows with a fixed column order; missing values are blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(row.get(k)) for k in columns})
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_id(version: str) -> str:
    """git-describe style identifier of the running build."""
    source_root = Path(__file__).resolve().parent.parent
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=source_root, capture_output=True, text=True, timeout=10,
        )
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git describe unavailable: {e}")

    digest = hashlib.sha1()
    for source in sorted(source_root.rglob("*.py")):
        digest.update(source.relative_to(source_root).as_posix().encode("utf-8"))
        digest.update(source.read_bytes())
    return f"v{version}-g{digest.hexdigest()[:7]}"


def write_manifest(run_dir: PathLike, command: str, config: Dict[str, Any], seed: Optional[int],
                   outputs: Sequence[PathLike], version: str) -> Path:
    """Write the run manifest beside the outputs it lists."""
    run_dir = Path(run_dir)
    listed = []
    for output in outputs:
        output = Path(output)
        try:
            listed.append(output.resolve().relative_to(run_dir.resolve()).as_posix())
        except ValueError:
            listed.append(output.as_posix())
    payload = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "build": build_id(version),
        "outputs": sorted(set(listed)),
    }
    return save_json(run_dir / MANIFEST_NAME, payload)
