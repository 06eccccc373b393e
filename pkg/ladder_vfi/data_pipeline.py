# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Triplet ingestion (Vimeo90K layout and generic folders of triplets), training
augmentation, synthetic desk-scale triplets and the HD-aware flow path sampler.

Vimeo90K layout::

    root/
        tri_trainlist.txt        # one <seq>/<clip> per line
        sequences/<seq>/<clip>/im1.png, im2.png, im3.png
"""
import dataclasses
import enum
import logging
import math
import os
import pathlib
import re
import tempfile
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import PIL.Image
import torch
import torch.nn.functional as F
import torch.utils.data

from ladder_vfi.synthesis import FlowMode


_LOGGER: logging.Logger = logging.getLogger(__name__)

FRAME_NAMES: Tuple[str, str, str] = ('im1.png', 'im2.png', 'im3.png')
SEQUENCES_DIR: str = 'sequences'
TRAIN_LIST_NAME: str = 'tri_trainlist.txt'
SIZE_MULTIPLE: int = 32
_LIST_ENTRY_PATTERN: re.Pattern = re.compile(r'^[^/\s]+/[^/\s]+$')
_CLIPS_PER_SEQUENCE: int = 1000
_PIXEL_MAX: float = 255.0

PathLike = Union[str, pathlib.Path]


@dataclasses.dataclass(frozen=True)
class Triplet:
    """Two input frames and the ground-truth middle frame, each ``(3, H, W)`` in ``[0, 1]``."""

    first: torch.Tensor
    middle: torch.Tensor
    last: torch.Tensor
    source_id: str = ''

    def __post_init__(self):
        shapes = {tuple(frame.shape) for frame in (self.first, self.middle, self.last)}
        if len(shapes) != 1:
            raise ValueError(f'Triplet <{self.source_id}> frames differ in shape: <{shapes}>.')
        shape = shapes.pop()
        if len(shape) != 3 or shape[0] != 3:
            raise ValueError(
                f'Triplet <{self.source_id}> frames must be (3, H, W). Got: <{shape}>.'
            )

    @property
    def size(self) -> Tuple[int, int]:
        """``(height, width)``"""
        return tuple(self.first.shape[-2:])

    def stack(self) -> torch.Tensor:
        """``(3 frames, 3, H, W)`` in temporal order."""
        return torch.stack([self.first, self.middle, self.last])

    @classmethod
    def from_stack(cls, frames: torch.Tensor, source_id: str = '') -> 'Triplet':
        """Inverse of :py:meth:`stack`."""
        return cls(first=frames[0], middle=frames[1], last=frames[2], source_id=source_id)


# ----------------------------------------------------------------------------- image IO


def read_image(path: PathLike) -> torch.Tensor:
    """
    Decodes an image file to a ``(3, H, W)`` float32 RGB tensor in ``[0, 1]``.

    Raises:
        FileNotFoundError: naming ``path`` if it does not exist.
        ValueError: if the file cannot be decoded.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Image <{path}> does not exist.')
    try:
        with PIL.Image.open(path) as image:
            pixels = np.asarray(image.convert('RGB'), dtype=np.float32)
    except (OSError, PIL.UnidentifiedImageError) as err:
        raise ValueError(f'Could not decode image <{path}>. Error: {err}') from err
    return torch.from_numpy(pixels / _PIXEL_MAX).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor in ``[0, 1]`` to an ``(H, W, 3)`` 8-bit array."""
    pixels = (img.detach().cpu().clamp(0, 1) * _PIXEL_MAX).round().to(torch.uint8)
    return pixels.permute(1, 2, 0).numpy()


def write_image(img: torch.Tensor, path: PathLike) -> pathlib.Path:
    """
    Writes a ``(3, H, W)`` tensor as an 8-bit RGB PNG, atomically (temp file + rename).
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, suffix='.png', delete=False) as tmp:
        tmp_path = pathlib.Path(tmp.name)
    try:
        PIL.Image.fromarray(to_uint8(img), mode='RGB').save(tmp_path, format='PNG')
        os.replace(tmp_path, path)
    except Exception:
        tmp_path.unlink(missing_ok=True)
        raise
    _LOGGER.debug('Wrote image <%s>.', path)
    return path


# ----------------------------------------------------------------------------- loaders


def load_triplet(directory: PathLike, source_id: Optional[str] = None) -> Triplet:
    """Reads ``im1.png``, ``im2.png`` and ``im3.png`` of one clip directory."""
    directory = pathlib.Path(directory)
    frames = [read_image(directory / name) for name in FRAME_NAMES]
    return Triplet(*frames, source_id=source_id or str(directory))


def read_list_file(list_file: PathLike) -> Iterator[Tuple[int, str]]:
    """
    Yields ``(line_number, entry)`` for every non-blank line of a triplet list.

    Raises:
        ValueError: on a line that is not ``<seq>/<clip>``, naming the line number.
    """
    list_file = pathlib.Path(list_file)
    if not list_file.is_file():
        raise FileNotFoundError(f'List file <{list_file}> does not exist.')
    with list_file.open(encoding='utf-8') as lines:
        for line_number, line in enumerate(lines, start=1):
            entry = line.strip()
            if not entry:
                continue
            if not _LIST_ENTRY_PATTERN.match(entry):
                raise ValueError(
                    f'List file <{list_file}> line {line_number}: expected "<seq>/<clip>". '
                    f'Got: <{entry}>.'
                )
            yield line_number, entry


def load_vimeo_triplets(root: PathLike, list_file: Optional[PathLike] = None) -> Iterator[Triplet]:
    """
    Streams the triplets listed in ``list_file`` in list order.

    Args:
        root: dataset root holding ``sequences/``.
        list_file: (optional) list of ``<seq>/<clip>`` entries, default
            ``root/tri_trainlist.txt``.

    Raises:
        FileNotFoundError: naming the missing frame and its clip.
        ValueError: on malformed list lines.
    """
    root = pathlib.Path(root)
    list_file = pathlib.Path(list_file) if list_file else root / TRAIN_LIST_NAME
    for _, entry in read_list_file(list_file):
        try:
            yield load_triplet(root / SEQUENCES_DIR / entry, source_id=entry)
        except FileNotFoundError as err:
            raise FileNotFoundError(f'Clip <{entry}> is incomplete. {err}') from err


class VimeoTripletSequence(Sequence):
    """Random access to the triplets of a list file, decoded on demand."""

    def __init__(self, root: PathLike, list_file: Optional[PathLike] = None):
        self._root = pathlib.Path(root)
        list_file = pathlib.Path(list_file) if list_file else self._root / TRAIN_LIST_NAME
        self._entries = [entry for _, entry in read_list_file(list_file)]
        _LOGGER.info('Found <%s> clips listed in <%s>.', len(self._entries), list_file)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, index: int) -> Triplet:
        entry = self._entries[index]
        return load_triplet(self._root / SEQUENCES_DIR / entry, source_id=entry)


def discover_triplet_folders(root: PathLike) -> List[pathlib.Path]:
    """Every directory below ``root`` holding an ``im1.png``, sorted."""
    root = pathlib.Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f'Triplet folder <{root}> does not exist.')
    return sorted({path.parent for path in root.rglob(FRAME_NAMES[0])})


def write_triplets(triplets: Sequence[Triplet], root: PathLike) -> pathlib.Path:
    """
    Persists triplets in the Vimeo90K layout with a ``tri_trainlist.txt``.

    Returns:
        The list file path.
    """
    root = pathlib.Path(root)
    entries: List[str] = []
    for index, triplet in enumerate(triplets):
        entry = (
            f'{index // _CLIPS_PER_SEQUENCE + 1:05d}/{index % _CLIPS_PER_SEQUENCE + 1:04d}'
        )
        clip_dir = root / SEQUENCES_DIR / entry
        for name, frame in zip(FRAME_NAMES, (triplet.first, triplet.middle, triplet.last)):
            write_image(frame, clip_dir / name)
        entries.append(entry)
    list_file = root / TRAIN_LIST_NAME
    list_file.write_text(''.join(f'{entry}\n' for entry in entries), encoding='utf-8')
    _LOGGER.info('Wrote <%s> triplets to <%s>.', len(entries), root)
    return list_file


# ----------------------------------------------------------------------------- augmentation


@dataclasses.dataclass(frozen=True)
class AugmentationPolicy:
    """
    Training augmentation, applied in order: scale, rotation, crop, flips,
    temporal reversal. Spatial transforms are identical for the three frames.
    """

    horizontal_flip_probability: float = 0.5
    vertical_flip_probability: float = 0.5
    scale_range: Tuple[float, float] = (1.0, 2.0)
    rotation_range: Tuple[float, float] = (-45.0, 45.0)
    temporal_reversal_probability: float = 0.5
    crop_size: Optional[int] = 256

    def __post_init__(self):
        for name in (
            'horizontal_flip_probability',
            'vertical_flip_probability',
            'temporal_reversal_probability',
        ):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f'{name} must be in [0, 1]. Got: <{getattr(self, name)}>.')
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(
                f'Scale range must satisfy 0 < low <= high. Got: <{self.scale_range}>.'
            )
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f'Rotation range is reversed. Got: <{self.rotation_range}>.')
        if self.crop_size is not None and self.crop_size < 1:
            raise ValueError(f'Crop size must be positive. Got: <{self.crop_size}>.')

    @classmethod
    def identity(cls) -> 'AugmentationPolicy':
        """Policy that leaves every triplet unchanged."""
        return cls(
            horizontal_flip_probability=0.0,
            vertical_flip_probability=0.0,
            scale_range=(1.0, 1.0),
            rotation_range=(0.0, 0.0),
            temporal_reversal_probability=0.0,
            crop_size=None,
        )

    @classmethod
    def training(cls, crop_size: int) -> 'AugmentationPolicy':
        """Flips, scale [1, 2], rotation [-45, 45] degrees, reversal and square crops."""
        return cls(crop_size=crop_size)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand((), generator=generator))


def _rotate(frames: torch.Tensor, degrees: float) -> torch.Tensor:
    radians = math.radians(degrees)
    cos, sin = math.cos(radians), math.sin(radians)
    height, width = frames.shape[-2:]
    # normalized coordinates are anisotropic for non-square frames
    theta = torch.tensor(
        [[cos, -sin * height / width, 0.0], [sin * width / height, cos, 0.0]],
        dtype=frames.dtype,
    )
    grid = F.affine_grid(
        theta.expand(frames.shape[0], 2, 3), list(frames.shape), align_corners=False
    )
    return F.grid_sample(
        frames, grid, mode='bilinear', padding_mode='border', align_corners=False
    ).clamp(0, 1)


def augment(triplet: Triplet, policy: AugmentationPolicy, rng_seed: int) -> Triplet:
    """
    Applies ``policy`` with randomness drawn only from ``rng_seed``.

    Raises:
        ValueError: if the crop is larger than the scaled frames.
    """
    generator = torch.Generator().manual_seed(rng_seed)
    frames = triplet.stack()
    scale = _uniform(generator, *policy.scale_range)
    angle = _uniform(generator, *policy.rotation_range)
    if scale != 1.0:
        height, width = frames.shape[-2:]
        size = (round(height * scale), round(width * scale))
        frames = F.interpolate(frames, size=size, mode='bilinear', align_corners=False).clamp(0, 1)
    if angle != 0.0:
        frames = _rotate(frames, angle)
    if policy.crop_size is not None:
        height, width = frames.shape[-2:]
        if policy.crop_size > min(height, width):
            raise ValueError(
                f'Crop <{policy.crop_size}> is larger than the scaled frames <{height}x{width}>.'
            )
        top = int(torch.randint(height - policy.crop_size + 1, (), generator=generator))
        left = int(torch.randint(width - policy.crop_size + 1, (), generator=generator))
        frames = frames[..., top : top + policy.crop_size, left : left + policy.crop_size]
    if float(torch.rand((), generator=generator)) < policy.horizontal_flip_probability:
        frames = frames.flip(-1)
    if float(torch.rand((), generator=generator)) < policy.vertical_flip_probability:
        frames = frames.flip(-2)
    if float(torch.rand((), generator=generator)) < policy.temporal_reversal_probability:
        frames = frames.flip(0)
    return Triplet.from_stack(frames.contiguous(), source_id=triplet.source_id)


def sample_seed(*keys: int) -> int:
    """Deterministic 63-bit seed derived from integer ``keys``."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0]) >> 1


class TripletDataset(torch.utils.data.Dataset):
    """
    Augmented training samples. Each sample's augmentation seed depends only on
    ``(seed, epoch, index)``, so prefetch workers cannot change results.

    Items are ``(3 frames, 3, H, W)`` tensors: first, middle, last.
    """

    def __init__(self, triplets: Sequence[Triplet], policy: AugmentationPolicy, seed: int = 0):
        if not len(triplets):
            raise ValueError('Training data is empty.')
        self._triplets = triplets
        self._policy = policy
        self._seed = seed
        self._epoch = 0

    def set_epoch(self, epoch: int) -> None:
        """Selects the augmentation draw of ``epoch``."""
        self._epoch = epoch

    def __len__(self) -> int:
        return len(self._triplets)

    def __getitem__(self, index: int) -> torch.Tensor:
        triplet = augment(
            self._triplets[index], self._policy, sample_seed(self._seed, self._epoch, index)
        )
        return triplet.stack()


# ----------------------------------------------------------------------------- synthetic data


class MotionKind(str, enum.Enum):
    """Motion regime of synthetic scenes."""

    STATIC = 'static'
    SMALL = 'small'
    LARGE = 'large'
    MIXED = 'mixed'
    PAN = 'pan'


@dataclasses.dataclass(frozen=True)
class MotionSpec:
    """
    ``small`` speeds stay within ``size / 32`` pixels per interval, ``large`` speeds
    lie between ``size / 16`` and ``size / 8``. ``pan`` translates the whole
    background. Speeds are even so the middle frame sits on the pixel grid.
    """

    kind: MotionKind = MotionKind.MIXED
    objects: int = 3

    def __post_init__(self):
        object.__setattr__(self, 'kind', MotionKind(self.kind))
        if self.objects < 0:
            raise ValueError(f'Object count must be non-negative. Got: <{self.objects}>.')


@dataclasses.dataclass(frozen=True)
class Texture:
    """Sum of sinusoids per channel around a base color."""

    base: Tuple[float, float, float]
    amplitude: float
    frequencies: Tuple[Tuple[float, float], ...]
    phases: Tuple[float, ...]

    def sample(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """``(H, W, 3)`` texture values at coordinates ``xs``, ``ys``."""
        wave = np.zeros(xs.shape, dtype=np.float64)
        for (fx, fy), phase in zip(self.frequencies, self.phases):
            wave += np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
        wave *= self.amplitude / max(len(self.frequencies), 1)
        channels = [
            base + wave * (1.0 if index % 2 == 0 else -1.0) for index, base in enumerate(self.base)
        ]
        return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


@dataclasses.dataclass(frozen=True)
class SceneObject:
    """Textured disk or rectangle moving with constant velocity (pixels per interval)."""

    shape: str
    center: Tuple[float, float]
    velocity: Tuple[float, float]
    half_size: Tuple[float, float]
    texture: Texture


@dataclasses.dataclass(frozen=True)
class Scene:
    """Background texture, optionally panning, and objects drawn in order."""

    background: Texture
    background_velocity: Tuple[float, float] = (0.0, 0.0)
    objects: Tuple[SceneObject, ...] = ()


def render_scene(scene: Scene, size: int, t: float) -> torch.Tensor:
    """
    Renders ``scene`` at time ``t`` in ``[0, 1]`` (0 first frame, 1 last frame).

    Returns:
        ``(3, size, size)`` float32 tensor in ``[0, 1]``.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    shift_x, shift_y = (t * value for value in scene.background_velocity)
    image = scene.background.sample(xs - shift_x, ys - shift_y)
    for obj in scene.objects:
        local_x = xs - (obj.center[0] + t * obj.velocity[0])
        local_y = ys - (obj.center[1] + t * obj.velocity[1])
        half_w, half_h = obj.half_size
        if obj.shape == 'disk':
            inside = (local_x / half_w) ** 2 + (local_y / half_h) ** 2 <= 1.0
        else:
            inside = (np.abs(local_x) <= half_w) & (np.abs(local_y) <= half_h)
        image[inside] = obj.texture.sample(local_x, local_y)[inside]
    return torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).contiguous()


def _random_texture(rng: np.random.Generator, size: int) -> Texture:
    waves = int(rng.integers(2, 5))
    return Texture(
        base=tuple(float(value) for value in rng.uniform(0.2, 0.8, 3)),
        amplitude=float(rng.uniform(0.05, 0.2)),
        frequencies=tuple(
            (float(fx), float(fy)) for fx, fy in rng.uniform(-4.0, 4.0, (waves, 2)) / size
        ),
        phases=tuple(float(value) for value in rng.uniform(0, 2 * np.pi, waves)),
    )


def _random_velocity(rng: np.random.Generator, kind: MotionKind, size: int) -> Tuple[float, float]:
    if kind == MotionKind.STATIC:
        return (0.0, 0.0)
    if kind == MotionKind.SMALL:
        speed = rng.uniform(0, max(size / 32, 2))
    else:
        speed = rng.uniform(size / 16, size / 8)
    angle = rng.uniform(0, 2 * np.pi)
    return tuple(float(2 * round(speed * trig / 2)) for trig in (np.cos(angle), np.sin(angle)))


def _random_scene(rng: np.random.Generator, spec: MotionSpec, size: int) -> Scene:
    kind = spec.kind
    if kind == MotionKind.MIXED:
        kind = MotionKind((MotionKind.STATIC, MotionKind.SMALL, MotionKind.LARGE)[rng.integers(3)])
    background = _random_texture(rng, size)
    if kind == MotionKind.PAN:
        return Scene(background=background, background_velocity=_random_velocity(rng, kind, size))
    objects = []
    for _ in range(spec.objects):
        objects.append(
            SceneObject(
                shape=('disk', 'rect')[rng.integers(2)],
                center=tuple(float(value) for value in rng.uniform(0.2 * size, 0.8 * size, 2)),
                velocity=_random_velocity(rng, kind, size),
                half_size=tuple(float(value) for value in rng.uniform(size / 12, size / 5, 2)),
                texture=_random_texture(rng, size),
            )
        )
    return Scene(background=background, objects=tuple(objects))


def generate_synthetic_triplets(
    count: int,
    size: int,
    motion_spec: MotionSpec = MotionSpec(),
    seed: int = 0,
) -> List[Triplet]:
    """
    Renders ``count`` scenes at times 0, 0.5 and 1, so each middle frame is the exact
    temporal midpoint.

    Args:
        count: number of triplets.
        size: square frame size, multiple of 32.
        motion_spec: motion regime.
        seed: random seed; the same seed gives the same dataset.
    """
    if size < SIZE_MULTIPLE or size % SIZE_MULTIPLE:
        raise ValueError(
            f'Size must be a multiple of {SIZE_MULTIPLE}. Got: <{size}>({type(size)}).'
        )
    if count < 0:
        raise ValueError(f'Count must be non-negative. Got: <{count}>.')
    result: List[Triplet] = []
    for index in range(count):
        scene = _random_scene(np.random.default_rng([seed, index]), motion_spec, size)
        frames = [render_scene(scene, size, t) for t in (0.0, 0.5, 1.0)]
        result.append(Triplet(*frames, source_id=f'synthetic-{seed}-{index:05d}'))
    _LOGGER.info(
        'Generated <%s> synthetic <%s> triplets of size <%s>.', count, motion_spec.kind.value, size
    )
    return result


def hd_flow_path_sampler(p: float = 0.5, rng: Optional[np.random.Generator] = None) -> FlowMode:
    """
    Picks the downscaled flow path with probability ``p``, the original one otherwise.
    """
    if not 0 <= p <= 1:
        raise ValueError(f'Probability must be in [0, 1]. Got: <{p}>({type(p)}).')
    rng = rng if rng is not None else np.random.default_rng()
    return FlowMode.DOWNSCALED_FLOW if rng.random() < p else FlowMode.ORIGINAL_FLOW
