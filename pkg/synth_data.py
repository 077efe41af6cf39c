"""
Synthetic detection scenes: soft-edged rectangles over a striped distractor
texture, with exact ground-truth boxes.

Every scene is generated from its own generator seeded by (seed, scene_id),
so the dataset is identical no matter how many worker threads render it.

File format (little-endian): magic b"CRPND1", then per scene
u32 scene_id, u32 gt count, gts as 4 x f32 (cx, cy, w, h), u32 c, u32 h, u32 w,
then c*h*w f32 pixels.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from box_geometry import Box, iou_matrix
from errors import ConfigError, FormatError, GenerationError

logger = logging.getLogger(__name__)

MAGIC = b"CRPND1"
PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class DatasetSpec:
    num_scenes: int = 640
    image_size: int = 64
    channels: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 8
    max_size: int = 32
    min_aspect: float = 0.5
    max_aspect: float = 2.0
    noise: float = 0.05
    texture_amplitude: float = 0.1
    falloff: int = 2
    max_overlap: float = 0.3
    seed: int = 7

    def __post_init__(self):
        if self.num_scenes < 1:
            raise ConfigError(f"must be >= 1, got {self.num_scenes}", "num_scenes")
        if self.image_size < 1 or self.channels < 1:
            raise ConfigError("image size and channels must be positive", "image_size")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError(f"need 1 <= min_size <= max_size, got {self.min_size}, {self.max_size}", "min_size")
        if self.max_size > self.image_size:
            raise ConfigError(f"max_size {self.max_size} exceeds image_size {self.image_size}", "max_size")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"empty object count range {self.min_objects}..{self.max_objects}", "max_objects")
        if not 0 < self.min_aspect <= self.max_aspect:
            raise ConfigError(f"empty aspect range {self.min_aspect}..{self.max_aspect}", "max_aspect")
        if self.noise < 0 or self.texture_amplitude < 0 or self.falloff < 0:
            raise ConfigError("noise, texture_amplitude and falloff must be >= 0", "noise")


@dataclass
class Scene:
    """One image (c, h, w) float32 in [0, 1] with gts (M, 4) float32 center-format boxes"""

    image: np.ndarray
    gts: np.ndarray
    scene_id: int

    @property
    def boxes(self) -> List[Box]:
        return [Box.from_array(g) for g in self.gts]

    @property
    def size(self) -> Tuple[int, int]:
        """(width, height)"""
        return self.image.shape[2], self.image.shape[1]


def _place_objects(spec: DatasetSpec, rng: np.random.Generator, scene_id: int) -> np.ndarray:
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed = []
    for k in range(count):
        for _ in range(PLACEMENT_RETRIES):
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            aspect = rng.uniform(spec.min_aspect, spec.max_aspect)
            h = int(np.clip(round(w * aspect), spec.min_size, spec.max_size))
            x1 = int(rng.integers(0, spec.image_size - w + 1))
            y1 = int(rng.integers(0, spec.image_size - h + 1))
            candidate = np.array([[x1 + w / 2, y1 + h / 2, w, h]], dtype=np.float64)
            if not placed or iou_matrix(candidate, np.array(placed)).max() <= spec.max_overlap:
                placed.append(candidate[0])
                break
        else:
            raise GenerationError(
                f"could not place object {k} in scene {scene_id} after {PLACEMENT_RETRIES} retries")
    return np.array(placed, dtype=np.float32).reshape(-1, 4)


def _rect_profile(size: int, box: np.ndarray, falloff: int) -> np.ndarray:
    """1 inside the pixel-aligned box, linear decay over `falloff` pixels outside, 0 beyond"""
    x1 = int(round(box[0] - box[2] / 2))
    y1 = int(round(box[1] - box[3] / 2))
    x2 = x1 + int(box[2]) - 1
    y2 = y1 + int(box[3]) - 1
    idx = np.arange(size)
    dist_x = np.maximum(np.maximum(x1 - idx, idx - x2), 0)
    dist_y = np.maximum(np.maximum(y1 - idx, idx - y2), 0)
    dist = np.maximum(dist_y[:, None], dist_x[None, :])
    return np.clip(1.0 - dist / (falloff + 1.0), 0.0, 1.0)


def _texture(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    image = np.zeros((spec.channels, size, size), dtype=np.float64)
    if spec.texture_amplitude == 0:
        return image
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for ch in range(spec.channels):
        freq = rng.uniform(0.15, 0.6)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        image[ch] = spec.texture_amplitude * 0.5 * (1.0 + wave)
    return image


def render_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = np.random.default_rng([spec.seed, scene_id])
    image = _texture(spec, rng)
    gts = _place_objects(spec, rng, scene_id)

    for gt in gts:
        intensity = rng.uniform(0.5, 1.0, size=spec.channels)
        profile = _rect_profile(spec.image_size, gt, spec.falloff)
        image = np.maximum(image, intensity[:, None, None] * profile[None])

    if spec.noise > 0:
        image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape)
    return Scene(np.clip(image, 0.0, 1.0).astype(np.float32), gts, scene_id)


def generate(spec: DatasetSpec, threads: int = 1) -> List[Scene]:
    """Render spec.num_scenes scenes; output is independent of `threads`"""
    ids = range(spec.num_scenes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(lambda i: render_scene(spec, i), ids))
    else:
        scenes = [render_scene(spec, i) for i in ids]
    logger.info("generated %d scenes (%dx%d, seed %d)", len(scenes), spec.image_size, spec.image_size, spec.seed)
    return scenes


def flip_scene(scene: Scene) -> Scene:
    """Horizontal flip of image and boxes"""
    width = scene.image.shape[2]
    gts = scene.gts.copy()
    gts[:, 0] = width - gts[:, 0]
    return Scene(np.ascontiguousarray(scene.image[:, :, ::-1]), gts, scene.scene_id)


def split(scenes: Sequence[Scene], num_val: int) -> Tuple[List[Scene], List[Scene]]:
    """Last num_val scenes are the validation split"""
    if not 0 <= num_val < len(scenes):
        raise ConfigError(f"need 0 <= val_scenes < {len(scenes)}, got {num_val}", "val_scenes")
    cut = len(scenes) - num_val
    return list(scenes[:cut]), list(scenes[cut:])


def save(scenes: Sequence[Scene], path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for scene in scenes:
            f.write(struct.pack("<II", scene.scene_id, len(scene.gts)))
            f.write(np.ascontiguousarray(scene.gts, dtype="<f4").tobytes())
            f.write(struct.pack("<III", *scene.image.shape))
            f.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())


class ByteReader:
    """Bounds-checked cursor over a byte buffer"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(f"truncated {what}: need {count} bytes, {len(self.data) - self.offset} left",
                              self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)


def load(path) -> List[Scene]:
    reader = ByteReader(Path(path).read_bytes())
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a CRPND1 dataset", 0)

    scenes = []
    while not reader.exhausted:
        scene_id, count = reader.unpack("<II", "scene header")
        gts = reader.floats(4 * count, "ground-truth boxes").reshape(count, 4)
        c, h, w = reader.unpack("<III", "image dims")
        image = reader.floats(c * h * w, "image data").reshape(c, h, w)
        scenes.append(Scene(image, gts, scene_id))
    return scenes
