import datetime
import json
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import uuid
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, ShapeError, UsageError
from .nltv import NltvGraph
from .registration import DeformationField

FRAME_SUFFIXES = {".png": "PNG", ".pgm": "PPM"}
EDGE_DTYPE = np.dtype([("src", "<i4"), ("dst", "<i4"), ("weight", "<f8")])
FIELD_DTYPE = np.dtype("<f4")
LUMA = np.array([0.299, 0.587, 0.114])
BARE_KEY = re.compile(r"[A-Za-z0-9_-]+")


def create_output_dir(base: Path | str = ".", prefix: str = "restore") -> Path:
    timestamp = datetime.datetime.now().strftime("%Y-%m-%d_%H_%M_%S") + f"_{uuid.uuid4().hex[:8]}"
    output_path = Path(base) / f"{prefix}_{timestamp}"
    output_path.mkdir(parents=True, exist_ok=False)
    return output_path


def read_image(path: Path | str) -> np.ndarray:
    """Load an image as float64 grayscale in [0, 1]; color is reduced to luma."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            data = np.asarray(img, dtype=np.float64)
            return data / (65535.0 if data.max() > 255 else 255.0)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        data = np.asarray(img, dtype=np.float64) / 255.0
    if data.ndim == 3:
        data = data[..., :3] @ LUMA
    return data


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path | str, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write then rename so a crash never leaves a truncated file
    partial = path.with_name(path.name + ".partial")
    image_format = FRAME_SUFFIXES.get(path.suffix.lower(), "PNG")
    Image.fromarray(to_uint8(image)).save(partial, format=image_format)
    partial.replace(path)
    return path


def list_frames(directory: Path | str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"frame directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_frames(directory: Path | str) -> np.ndarray:
    """Read every PNG/PGM frame of a directory in lexicographic order as an (N, H, W) stack."""
    paths = list_frames(directory)
    if len(paths) < 2:
        raise UsageError(f"need at least 2 frames in {directory}, found {len(paths)}")
    frames = [read_image(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise UsageError(f"frames in {directory} have mixed sizes: {sorted(shapes)}")
    return np.stack(frames)


def write_frames(directory: Path | str, frames: np.ndarray, suffix: str = ".png") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(frames) - 1)))
    return [write_image(directory / f"frame_{i:0{width}d}{suffix}", frame) for i, frame in enumerate(frames)]


def write_index_map(path: Path | str, index: np.ndarray) -> Path:
    """16-bit PNG of a per-pixel frame index map."""
    index = np.asarray(index)
    if index.max(initial=0) > 65535:
        raise ShapeError("index map does not fit in 16 bits")
    Image.fromarray(index.astype(np.uint16)).save(path)
    return Path(path)


def write_field(path: Path | str, field: DeformationField) -> Path:
    """Two float32 planes, row displacement then column displacement, row-major little-endian."""
    np.asarray(field.vectors, dtype=FIELD_DTYPE).tofile(path)
    return Path(path)


def read_field(path: Path | str, shape: tuple[int, int], direction: str = "pull-back") -> DeformationField:
    data = np.fromfile(path, dtype=FIELD_DTYPE)
    if data.size != 2 * shape[0] * shape[1]:
        raise ShapeError(f"{path} holds {data.size} values, expected {2 * shape[0] * shape[1]}")
    return DeformationField(data.reshape(2, *shape).astype(np.float64), direction)


def write_edges(path: Path | str, graph: NltvGraph) -> Path:
    """Edge list as (src int32, dst int32, weight float64) little-endian records."""
    records = np.empty(graph.n_edges, dtype=EDGE_DTYPE)
    records["src"] = graph.src
    records["dst"] = graph.dst
    records["weight"] = graph.weight
    records.tofile(path)
    return Path(path)


def read_edges(path: Path | str) -> np.ndarray:
    return np.fromfile(path, dtype=EDGE_DTYPE)


def _toml_value(key: str, value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    raise ConfigurationError(f"manifest value {key!r} must be a bool, number or string, got {type(value).__name__}")


def write_manifest(path: Path | str, values: dict) -> Path:
    """Flat ``key = value`` TOML manifest.

    Only bare keys and scalar values (bool, int, float, str) are written;
    None values are skipped. Tables, arrays and nested dicts are rejected.

    Raises:
        ConfigurationError: a key is not a bare TOML key or a value is not a scalar.
    """
    for key in values:
        if not isinstance(key, str) or not BARE_KEY.fullmatch(key):
            raise ConfigurationError(f"manifest key {key!r} is not a bare TOML key")
    lines = [f"{key} = {_toml_value(key, value)}" for key, value in values.items() if value is not None]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_manifest(path: Path | str) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


class RunLog:
    """JSON-lines log, one record per pipeline stage, flushed as soon as it is written."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.write_text("")

    def stage(self, name: str, seconds: float, **values) -> dict:
        record = {"stage": name, "seconds": round(seconds, 6), **values}
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")
        return record

    def records(self) -> list[dict]:
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]
