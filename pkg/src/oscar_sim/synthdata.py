"""Procedural shape corpus with style-based domains.

Images are single-channel, stored in [0, 1]. A pixel array is a pure
function of (category_id, domain_id, instance_seed, size), so datasets can
be rebuilt from their metadata alone. Domains are post-hoc style
transforms: class geometry is shared, appearance shifts.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import RngStream

CATEGORY_NAMES = (
    "disc",
    "ring",
    "square",
    "hollow-square",
    "triangle",
    "cross",
    "h-bars",
    "checker",
)

STYLE_NAMES = (
    "clean",
    "dim",
    "noisy",
    "gradient-lit",
    "striped-bg",
    "textured-bg",
    "vignette",
    "bright-bg",
    "inverted",
    "posterized",
    "vstripe-bg",
    "diag-gradient",
)

STYLE_POOL_SIZE = len(STYLE_NAMES)

# disjoint instance-seed ranges per purpose; cells index category x style pool
_CELL_CAPACITY = 10_000
_PRETRAIN_BASE = 1_000_000_000
_TRAIN_BASE = 2_000_000_000
_TEST_BASE = 3_000_000_000

SYNTHETIC_DOMAIN = 0xFFFFFFFF


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    seed: int
    n_categories: int = 8
    n_domains: int = 6
    n_clients: int = 6
    images_per_category: int = 30
    test_images_per_category: int = 20
    image_size: int = 16

    def __post_init__(self):
        if not 1 <= self.n_categories <= len(CATEGORY_NAMES):
            raise CorpusError(f"n_categories must be in [1, {len(CATEGORY_NAMES)}]")
        if not 1 <= self.n_domains <= STYLE_POOL_SIZE:
            raise CorpusError(f"n_domains must be in [1, {STYLE_POOL_SIZE}]")
        if self.image_size < 8 or self.image_size % 4 != 0:
            raise CorpusError("image_size must be >= 8 and divisible by 4")
        if self.images_per_category < 1 or self.test_images_per_category < 1:
            raise CorpusError("per-category image counts must be positive")
        if self.images_per_category + self.test_images_per_category > _CELL_CAPACITY:
            raise CorpusError("per-cell image counts exceed the seed-range capacity")


@dataclass(frozen=True)
class ImageRecord:
    pixels: np.ndarray  # (size, size) float32 in [0, 1]
    category_id: int
    domain_id: int
    instance_seed: int


@dataclass(frozen=True)
class Dataset:
    """Structure-of-arrays image collection with provenance tags."""

    pixels: np.ndarray  # (n, size, size) float32
    category_ids: np.ndarray  # (n,) uint32
    domain_ids: np.ndarray  # (n,) uint32
    instance_seeds: np.ndarray  # (n,) uint64
    origin: str = "real"

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> int:
        return self.pixels.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            pixels=self.pixels[indices],
            category_ids=self.category_ids[indices],
            domain_ids=self.domain_ids[indices],
            instance_seeds=self.instance_seeds[indices],
            origin=self.origin,
        )

    def of_category(self, category_id: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.category_ids == category_id))

    def with_origin(self, origin: str) -> "Dataset":
        return replace(self, origin=origin)


def dataset_from_records(records: list[ImageRecord], origin: str) -> Dataset:
    if not records:
        raise CorpusError("cannot build a dataset from zero records")
    return Dataset(
        pixels=np.stack([r.pixels for r in records]),
        category_ids=np.array([r.category_id for r in records], dtype=np.uint32),
        domain_ids=np.array([r.domain_id for r in records], dtype=np.uint32),
        instance_seeds=np.array([r.instance_seed for r in records], dtype=np.uint64),
        origin=origin,
    )


def concat_datasets(parts: list[Dataset], origin: str | None = None) -> Dataset:
    if not parts:
        raise CorpusError("cannot concatenate zero datasets")
    return Dataset(
        pixels=np.concatenate([p.pixels for p in parts]),
        category_ids=np.concatenate([p.category_ids for p in parts]),
        domain_ids=np.concatenate([p.domain_ids for p in parts]),
        instance_seeds=np.concatenate([p.instance_seeds for p in parts]),
        origin=origin if origin is not None else parts[0].origin,
    )


# ---------------------------------------------------------------------------
# rendering


def _instance_stream(category_id: int, domain_id: int, instance_seed: int) -> RngStream:
    # pixels must not depend on any experiment seed, only on the identity triple
    key = hashlib.blake2b(
        struct.pack("<IIQ", category_id, domain_id, instance_seed), digest_size=8
    ).digest()
    return RngStream(int.from_bytes(key, "little"), "render")


def _shape_mask(category_id: int, size: int, stream: RngStream) -> np.ndarray:
    # Geometries are tuned so every pair of categories stays separable after
    # 4x4 average pooling: distinct total mass, corner occupancy, radial
    # profile, and row-band structure. Features that survive pooling are the
    # only ones the downstream embedding can see.
    dx = float(stream.uniform() * 4.0 - 2.0)
    dy = float(stream.uniform() * 4.0 - 2.0)
    scale = float(0.8 + stream.uniform() * 0.4)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2.0 + dy
    cx = (size - 1) / 2.0 + dx
    s = size * scale
    u = xx - cx
    v = yy - cy
    dist = np.hypot(u, v)
    cheb = np.maximum(np.abs(u), np.abs(v))

    name = CATEGORY_NAMES[category_id]
    if name == "disc":
        mask = dist <= 0.24 * s
    elif name == "ring":
        mask = (dist >= 0.17 * s) & (dist <= 0.33 * s)
    elif name == "square":
        mask = cheb <= 0.44 * s
    elif name == "hollow-square":
        mask = (cheb >= 0.34 * s) & (cheb <= 0.46 * s)
    elif name == "triangle":
        top = -0.45 * s
        half_width = np.clip((v - top) * 0.60, 0.0, None)
        mask = (v >= top) & (v <= 0.42 * s) & (np.abs(u) <= half_width)
    elif name == "cross":
        arm, span = 0.095 * s, 0.49 * s
        mask = ((np.abs(u) <= arm) & (np.abs(v) <= span)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= span)
        )
    elif name == "h-bars":
        in_x = np.abs(u) <= 0.45 * s
        bar1 = np.abs(v + 0.30 * s) <= 0.085 * s
        bar2 = np.abs(v - 0.30 * s) <= 0.085 * s
        mask = in_x & (bar1 | bar2)
    elif name == "checker":
        cell = np.floor(u / (0.20 * s)) + np.floor(v / (0.20 * s))
        mask = (cheb <= 0.46 * s) & (cell % 2 == 0)
    else:
        raise CorpusError(f"unknown category id {category_id}")
    return mask.astype(np.float64)


def _scene(mask: np.ndarray, size: int, stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Place the shape in a smoothly lit scene.

    Lighting is drawn per image: a tilted illumination plane, a soft
    off-center background glow, and foreground/ambient intensity jitter.
    Low-frequency fields are cheap for a smooth generative model to
    reproduce, but a raw-pixel classifier has to see many examples before
    the shape signal separates from the lighting.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1.0)
    phi = float(stream.uniform()) * 2.0 * np.pi
    tilt = 0.50 + 0.75 * float(stream.uniform())
    plane = (xx - 0.5) * np.cos(phi) + (yy - 0.5) * np.sin(phi)
    psi = float(stream.uniform()) * 2.0 * np.pi
    freq = 0.75 + 0.5 * float(stream.uniform())
    phase = float(stream.uniform()) * 2.0 * np.pi
    ripple_amp = 0.15 + 0.20 * float(stream.uniform())
    ripple = ripple_amp * np.sin(
        2.0 * np.pi * freq * (xx * np.cos(psi) + yy * np.sin(psi)) + phase
    )
    gx = 0.2 + 0.6 * float(stream.uniform())
    gy = 0.2 + 0.6 * float(stream.uniform())
    gsigma = 0.22 + 0.20 * float(stream.uniform())
    glow = np.exp(-((xx - gx) ** 2 + (yy - gy) ** 2) / (2.0 * gsigma**2))
    ambient = 0.22 + 0.28 * float(stream.uniform())
    fg = 0.72 + 0.28 * float(stream.uniform())
    # soft shadow patch: dims whatever part of the shape it crosses, so the
    # silhouette alone is not enough; averaging over instances restores it
    shadow = np.ones_like(xx)
    for _ in range(2):
        sx = 0.15 + 0.70 * float(stream.uniform())
        sy = 0.15 + 0.70 * float(stream.uniform())
        ssigma = 0.15 + 0.15 * float(stream.uniform())
        sdepth = 0.18 + 0.22 * float(stream.uniform())
        shadow = shadow * (
            1.0 - sdepth * np.exp(-((xx - sx) ** 2 + (yy - sy) ** 2) / (2.0 * ssigma**2))
        )
    light = np.clip(1.0 + tilt * plane + ripple, 0.05, None) * shadow
    img = (mask * fg + (1.0 - mask) * ambient * glow) * light
    # per-image exposure curve: monotone, smooth, but couples every pixel
    gamma = 0.65 + 0.80 * float(stream.uniform())
    img = np.clip(img, 0.0, None) ** gamma
    # row-wave interference: varies only along y with a period that divides
    # the pooling block height, so block means and horizontal gradients are
    # untouched while every raw pixel moves
    wamp = 0.06 + 0.10 * float(stream.uniform())
    wphase = float(stream.uniform()) * 2.0 * np.pi
    img = img + wamp * np.sin(2.0 * np.pi * yy * (size - 1.0) / 4.0 + wphase)
    return np.clip(img, 0.0, 1.0), mask


def _apply_style(
    img: np.ndarray, mask: np.ndarray, domain_id: int, size: int, stream: RngStream
) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    name = STYLE_NAMES[domain_id]
    if name == "clean":
        pass
    elif name == "dim":
        img = img * 0.4
    elif name == "noisy":
        img = img + stream.normal((size, size)) * 0.15
    elif name == "gradient-lit":
        img = img * (0.55 + 0.45 * xx / (size - 1))
    elif name == "striped-bg":
        stripes = 0.22 * ((yy.astype(np.int64) // 2) % 2 == 0)
        img = np.where(mask > 0, img, stripes)
    elif name == "textured-bg":
        img = np.where(mask > 0, img, stream.uniform((size, size)) * 0.22)
    elif name == "vignette":
        center = (size - 1) / 2.0
        dist2 = ((yy - center) ** 2 + (xx - center) ** 2) / (2 * center**2)
        img = img * (1.0 - 0.7 * dist2)
    elif name == "bright-bg":
        img = np.where(mask > 0, img, 0.35)
    elif name == "inverted":
        img = 1.0 - img
    elif name == "posterized":
        img = np.round(img * 3.0) / 3.0
    elif name == "vstripe-bg":
        stripes = 0.3 * ((xx.astype(np.int64) // 2) % 2 == 0)
        img = np.where(mask > 0, img, stripes)
    elif name == "diag-gradient":
        img = img * (0.4 + 0.6 * (xx + yy) / (2 * (size - 1)))
    else:
        raise CorpusError(f"unknown domain id {domain_id}")
    return img


def render_image(
    category_id: int, domain_id: int, instance_seed: int, size: int = 16
) -> ImageRecord:
    """Render one image: jittered geometry, nuisance scene, style, noise floor."""
    if size < 8:
        raise CorpusError("size must be >= 8")
    if not 0 <= category_id < len(CATEGORY_NAMES):
        raise CorpusError(f"unknown category id {category_id}")
    if not 0 <= domain_id < len(STYLE_NAMES):
        raise CorpusError(f"unknown domain id {domain_id}")
    stream = _instance_stream(category_id, domain_id, instance_seed)
    mask = _shape_mask(category_id, size, stream)
    img, scene = _scene(mask, size, stream)
    img = _apply_style(img, scene, domain_id, size, stream)
    # zero-mean sensor noise: a raw-pixel classifier has to average it out,
    # which takes data; block-averaged features attenuate it fourfold
    img = img + stream.normal((size, size)) * 0.05
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageRecord(img, category_id, domain_id, instance_seed)


# ---------------------------------------------------------------------------
# seed allocation and splits


def _cell_seed(base: int, category_id: int, domain_id: int, k: int) -> int:
    cell = category_id * STYLE_POOL_SIZE + domain_id
    return base + cell * _CELL_CAPACITY + k


@dataclass(frozen=True)
class ClientData:
    client_id: int
    train: Dataset
    test: Dataset
    domain_of_category: dict[int, int]


@dataclass(frozen=True)
class FederatedSplit:
    clients: list[ClientData]
    mode: str
    config: CorpusConfig


def _render_cell(
    category_id: int, domain_id: int, base: int, start: int, count: int, size: int
) -> list[ImageRecord]:
    return [
        render_image(category_id, domain_id, _cell_seed(base, category_id, domain_id, start + k), size)
        for k in range(count)
    ]


def build_federated_split(config: CorpusConfig, mode: str = "common") -> FederatedSplit:
    """Partition the corpus across clients.

    common: client r holds domain r for every category, so the pool size must
    equal the client count. unique: every category draws its own ordered
    domain assignment from the full style pool via the master seed.
    """
    if mode not in ("common", "unique"):
        raise CorpusError(f"unknown split mode '{mode}'")
    if config.n_clients != config.n_domains:
        raise CorpusError("n_clients must equal n_domains")
    size = config.image_size

    if mode == "common":
        assignment = {
            c: {r: r for r in range(config.n_clients)}
            for c in range(config.n_categories)
        }
    else:
        stream = RngStream(config.seed, "split/domain-assignment")
        assignment = {}
        for c in range(config.n_categories):
            order = stream.permutation(STYLE_POOL_SIZE)[: config.n_clients]
            assignment[c] = {r: int(order[r]) for r in range(config.n_clients)}

    clients = []
    for r in range(config.n_clients):
        train_records: list[ImageRecord] = []
        test_records: list[ImageRecord] = []
        domain_of_category = {}
        for c in range(config.n_categories):
            d = assignment[c][r]
            domain_of_category[c] = d
            train_records += _render_cell(c, d, _TRAIN_BASE, 0, config.images_per_category, size)
            test_records += _render_cell(c, d, _TEST_BASE, 0, config.test_images_per_category, size)
        clients.append(
            ClientData(
                client_id=r,
                train=dataset_from_records(train_records, "client-train"),
                test=dataset_from_records(test_records, "client-test"),
                domain_of_category=domain_of_category,
            )
        )
    return FederatedSplit(clients=clients, mode=mode, config=config)


def build_pretrain_corpus(
    config: CorpusConfig, images_per_cell: int = 200, domain_pool: tuple[int, ...] | None = None
) -> Dataset:
    """Server-side corpus covering every (category, domain) cell in the pool.

    Instance seeds are disjoint from every client's train and test ranges.
    """
    if images_per_cell < 1 or images_per_cell > _CELL_CAPACITY:
        raise CorpusError("images_per_cell out of range")
    pool = tuple(range(config.n_domains)) if domain_pool is None else domain_pool
    records: list[ImageRecord] = []
    for c in range(config.n_categories):
        for d in pool:
            records += _render_cell(c, d, _PRETRAIN_BASE, 0, images_per_cell, config.image_size)
    return dataset_from_records(records, "pretrain")


# ---------------------------------------------------------------------------
# OSFD on-disk format

_OSFD_MAGIC = b"OSFD"
_OSFD_VERSION = 1


class OsfdError(ValueError):
    pass


def serialize_dataset(ds: Dataset) -> bytes:
    n = len(ds)
    h = w = ds.pixels.shape[1] if n else 0
    parts = [_OSFD_MAGIC, struct.pack("<IIIII", _OSFD_VERSION, n, h, w, 1)]
    for i in range(n):
        parts.append(
            struct.pack(
                "<IIQ",
                int(ds.category_ids[i]),
                int(ds.domain_ids[i]),
                int(ds.instance_seeds[i]),
            )
        )
        parts.append(np.ascontiguousarray(ds.pixels[i], dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_dataset(ds))


def dataset_digest(ds: Dataset) -> str:
    return hashlib.sha256(serialize_dataset(ds)).hexdigest()


def read_dataset(path, origin: str = "file") -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _OSFD_MAGIC:
        raise OsfdError("not an OSFD file")
    if len(blob) < 24:
        raise OsfdError(f"short read: expected at least 24 header bytes, got {len(blob)}")
    version, n, h, w, channels = struct.unpack("<IIIII", blob[4:24])
    if version != _OSFD_VERSION:
        raise OsfdError(f"unsupported OSFD version {version}")
    if channels != 1:
        raise OsfdError(f"unsupported channel count {channels}")
    record_size = 16 + h * w * channels * 4
    expected = 24 + n * record_size
    if len(blob) != expected:
        raise OsfdError(f"short read: expected {expected} bytes, got {len(blob)}")
    if n == 0:
        return Dataset(
            pixels=np.zeros((0, h, w), dtype=np.float32),
            category_ids=np.zeros(0, dtype=np.uint32),
            domain_ids=np.zeros(0, dtype=np.uint32),
            instance_seeds=np.zeros(0, dtype=np.uint64),
            origin=origin,
        )
    categories = np.zeros(n, dtype=np.uint32)
    domains = np.zeros(n, dtype=np.uint32)
    seeds = np.zeros(n, dtype=np.uint64)
    pixels = np.zeros((n, h, w), dtype=np.float32)
    off = 24
    for i in range(n):
        categories[i], domains[i], seeds[i] = struct.unpack("<IIQ", blob[off : off + 16])
        off += 16
        pixels[i] = np.frombuffer(blob[off : off + h * w * 4], dtype="<f4").reshape(h, w)
        off += h * w * 4
    return Dataset(pixels, categories, domains, seeds, origin=origin)
