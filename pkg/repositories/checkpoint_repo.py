"""Checkpoint archives: a text manifest plus one little-endian float32 blob.

    <dir>/manifest.txt
        format=1
        kind=detector
        config_hash=<16 hex>
        config=<json>
        param <name> float32 <d0,d1,...> <offset> <nbytes>
    <dir>/weights.bin
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from common.errors import CheckpointError, NotFoundError
from core.params import ParamStore

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
MANIFEST_FILE = "manifest.txt"
WEIGHTS_FILE = "weights.bin"
DTYPE = np.dtype("<f4")


def save_checkpoint(directory: Path, store: ParamStore) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    lines = [
        f"format={FORMAT_VERSION}",
        f"kind={store.kind}",
        f"config_hash={store.config_hash}",
        f"config={store.config_json}",
    ]
    offset = 0
    with (directory / WEIGHTS_FILE).open("wb") as handle:
        for name in sorted(store.tensors):
            blob = np.ascontiguousarray(store.tensors[name], dtype=DTYPE).tobytes()
            shape = ",".join(str(dim) for dim in store.tensors[name].shape)
            lines.append(f"param {name} float32 {shape} {offset} {len(blob)}")
            handle.write(blob)
            offset += len(blob)

    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Saved %s checkpoint to %s (%d bytes)", store.kind, directory, offset)
    return directory


def _parse_manifest(path: Path) -> Tuple[Dict[str, str], List[Tuple[str, Tuple[int, ...], int, int]]]:
    header: Dict[str, str] = {}
    params: List[Tuple[str, Tuple[int, ...], int, int]] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("param "):
            parts = line.split(" ")
            if len(parts) != 6 or parts[2] != "float32":
                raise CheckpointError("Malformed parameter line.", details={"file": str(path), "line": line_no})
            try:
                shape = tuple(int(dim) for dim in parts[3].split(",") if dim)
                params.append((parts[1], shape, int(parts[4]), int(parts[5])))
            except ValueError as exc:
                raise CheckpointError(
                    "Malformed parameter line.", details={"file": str(path), "line": line_no}
                ) from exc
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError("Malformed manifest line.", details={"file": str(path), "line": line_no})
        header[key] = value
    return header, params


def load_checkpoint(directory: Path) -> ParamStore:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    weights_path = directory / WEIGHTS_FILE
    if not manifest_path.exists() or not weights_path.exists():
        raise NotFoundError(f"No checkpoint archive at '{directory}'.", details={"path": str(directory)})

    header, params = _parse_manifest(manifest_path)
    for key in ("format", "kind", "config_hash", "config"):
        if key not in header:
            raise CheckpointError(f"Manifest is missing '{key}'.", details={"file": str(manifest_path)})
    if header["format"] != FORMAT_VERSION:
        raise CheckpointError("Unsupported checkpoint format.", details={"format": header["format"]})
    if header["kind"] not in ("detector", "gce"):
        raise CheckpointError("Unknown checkpoint kind.", details={"kind": header["kind"]})

    blob = weights_path.read_bytes()
    expected = sum(nbytes for *_, nbytes in params)
    if expected != len(blob):
        raise CheckpointError(
            "Weight file size disagrees with the manifest.",
            details={"expected": expected, "actual": len(blob)},
        )

    tensors: Dict[str, np.ndarray] = {}
    for name, shape, offset, nbytes in params:
        count = int(np.prod(shape)) if shape else 1
        if nbytes != count * DTYPE.itemsize or offset + nbytes > len(blob):
            raise CheckpointError(f"Byte range of '{name}' is inconsistent.", details={"param": name})
        tensors[name] = np.frombuffer(blob, dtype=DTYPE, count=count, offset=offset).reshape(shape).astype(np.float32)

    return ParamStore(
        kind=header["kind"],  # type: ignore[arg-type]
        config_json=header["config"],
        config_hash=header["config_hash"],
        tensors=tensors,
    )
