"""Volume file format, synthetic phantoms, preprocessing, and dataset assembly.

File format (one volume per block): a single JSON header line
``{"magic": "RV3D1", "dims": [nx, ny, nz], "dtype": "f32", "kind": ...}``
terminated by a newline, then nx*ny*nz little-endian float32 values in
x-fastest order. Blocks are self-delimiting, so several can be
concatenated into one stream; ``kind`` is one of "image", "prob",
"label" and tells the reader how to validate the payload.

Phantoms mimic the structure of medical volumes: a zero outside region,
an ellipsoidal "body" with baseline intensity and noise, and a brighter
target object (sphere, ellipsoid, or two overlapping blobs) whose
surface is perturbed by a smooth random field. The ground-truth mask is
the target object.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import Dims, LabelMask, ProbabilityMap, Volume3D

FORMAT_MAGIC = "RV3D1"
VOLUME_KINDS = ("image", "prob", "label")
PHANTOM_SHAPES = ("sphere", "ellipsoid", "two-blob")
INITIAL_METHODS = ("bg", "threshold", "blur-threshold", "external")


# ---------------------------------------------------------------------------
# file format

def _wrap_kind(data: np.ndarray, kind: str) -> Volume3D:
    if kind == "prob":
        return ProbabilityMap(data)
    if kind == "label":
        return LabelMask(data)
    return Volume3D(data)


def write_volume_block(stream: io.BufferedIOBase, vol: Volume3D, kind: str) -> None:
    if kind not in VOLUME_KINDS:
        raise ValueError(f"kind must be one of {VOLUME_KINDS}, got {kind!r}")
    _wrap_kind(vol.data, kind)  # validate payload against the declared kind
    header = {"magic": FORMAT_MAGIC, "dims": list(vol.dims), "dtype": "f32",
              "kind": kind}
    stream.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    stream.write(vol.flat().astype("<f4").tobytes())


def read_volume_block(stream: io.BufferedIOBase) -> tuple[Volume3D, str] | None:
    """Read one block; None at a clean end of stream."""
    line = bytearray()
    while True:
        ch = stream.read(1)
        if not ch:
            if line:
                raise ValueError("truncated volume header")
            return None
        if ch == b"\n":
            break
        line += ch
        if len(line) > 4096:
            raise ValueError("volume header too long; not a volume stream?")
    try:
        header = json.loads(bytes(line))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed volume header: {exc}") from exc
    if header.get("magic") != FORMAT_MAGIC:
        raise ValueError("bad magic; not a volume stream")
    if header.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    kind = header.get("kind")
    if kind not in VOLUME_KINDS:
        raise ValueError(f"unsupported volume kind {kind!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"bad dims {dims}")
    count = dims[0] * dims[1] * dims[2]
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated volume payload")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    data = flat.reshape(dims, order="F")
    return _wrap_kind(data, kind), kind


def write_volume(path: str | Path, vol: Volume3D, kind: str) -> None:
    with open(path, "wb") as f:
        write_volume_block(f, vol, kind)


def read_volume(path: str | Path) -> tuple[Volume3D, str]:
    with open(path, "rb") as f:
        block = read_volume_block(f)
        if block is None:
            raise ValueError(f"{path} is empty")
        if f.read(1):
            raise ValueError(f"{path} holds more than one volume")
    return block


def read_volume_stream(data: bytes) -> list[tuple[Volume3D, str]]:
    """Decode a concatenation of volume blocks."""
    stream = io.BytesIO(data)
    out = []
    while True:
        block = read_volume_block(stream)
        if block is None:
            return out
        out.append(block)


# ---------------------------------------------------------------------------
# phantoms

@dataclass(frozen=True)
class PhantomConfig:
    dims: Dims = (24, 24, 12)
    shape: str = "sphere"
    contrast: float = 0.6
    noise_sigma: float = 0.08
    perturb_amplitude: float = 0.25
    body_baseline: float = 0.35
    radius_fraction: float = 0.27
    seed: int = 0

    def __post_init__(self) -> None:
        if self.shape not in PHANTOM_SHAPES:
            raise ValueError(f"shape must be one of {PHANTOM_SHAPES}, got {self.shape!r}")
        if min(self.dims) < 4:
            raise ValueError("phantom dims must be at least 4 per axis")
        if self.noise_sigma < 0 or self.perturb_amplitude < 0:
            raise ValueError("noise and perturbation must be non-negative")
        if not 0 < self.radius_fraction < 0.5:
            raise ValueError("radius_fraction must be in (0, 0.5)")


def _smooth_field(rng: np.random.Generator, dims: Dims) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=dims), sigma=2.0)
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _radial(dims: Dims, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    acc = np.zeros(dims)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return np.sqrt(acc)


def _blob(dims, center, radii, amp, field_) -> np.ndarray:
    return _radial(dims, center, radii) <= 1.0 + amp * field_


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume3D, LabelMask]:
    """Synthesize one (image, ground truth) pair."""
    rng = np.random.default_rng(cfg.seed)
    dims = np.asarray(cfg.dims)
    center = dims / 2.0 - 0.5 + rng.uniform(-0.08, 0.08, size=3) * dims
    base_r = cfg.radius_fraction * dims.min()
    field_ = _smooth_field(rng, cfg.dims)

    if cfg.shape == "sphere":
        r = base_r * rng.uniform(0.85, 1.15)
        mask = _blob(cfg.dims, center, np.full(3, r), cfg.perturb_amplitude, field_)
    elif cfg.shape == "ellipsoid":
        radii = base_r * rng.uniform(0.7, 1.3, size=3)
        mask = _blob(cfg.dims, center, radii, cfg.perturb_amplitude, field_)
    else:  # two-blob
        offset = rng.uniform(0.5, 0.9) * base_r * _unit(rng)
        r = base_r * 0.75
        mask = _blob(cfg.dims, center + offset, np.full(3, r),
                     cfg.perturb_amplitude, field_)
        mask |= _blob(cfg.dims, center - offset, np.full(3, r * rng.uniform(0.8, 1.0)),
                      cfg.perturb_amplitude, field_)

    if cfg.body_baseline > 0:
        body = _radial(cfg.dims, dims / 2.0 - 0.5, dims * 0.46) <= 1.0
        body |= mask  # the object always sits inside scanned tissue
    else:
        body = np.ones(cfg.dims, dtype=bool)

    truth = mask.astype(np.float64)
    if truth.sum() == 0 or truth.sum() == truth.size:
        raise ValueError("degenerate phantom: object empty or filling the volume")
    image = np.zeros(cfg.dims)
    image[body] = cfg.body_baseline
    image[mask] = cfg.body_baseline + cfg.contrast
    if cfg.noise_sigma > 0:
        image[body] += rng.normal(0.0, cfg.noise_sigma, size=int(body.sum()))
    return Volume3D(image), LabelMask(truth)


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# preprocessing

def nonzero_bbox(vol: Volume3D) -> tuple[slice, slice, slice]:
    nz = np.nonzero(vol.data)
    if nz[0].size == 0:
        raise ValueError("volume is identically zero; no bounding box")
    return tuple(slice(int(a.min()), int(a.max()) + 1) for a in nz)  # type: ignore[return-value]


def extend_bbox(bbox: tuple[slice, slice, slice], dims: Dims, extension: int,
                rng: np.random.Generator) -> tuple[slice, slice, slice]:
    """Widen each of the six sides by an independent draw from [0, extension]."""
    if extension < 0:
        raise ValueError("extension must be >= 0")
    out = []
    for sl, n in zip(bbox, dims):
        lo = max(0, sl.start - int(rng.integers(0, extension + 1))) if extension else sl.start
        hi = min(n, sl.stop + int(rng.integers(0, extension + 1))) if extension else sl.stop
        out.append(slice(lo, hi))
    return tuple(out)  # type: ignore[return-value]


def crop(vol: Volume3D, bbox: tuple[slice, slice, slice]) -> Volume3D:
    return Volume3D(vol.data[bbox].copy())


def resize_volume(vol: Volume3D, target: Dims, method: str = "trilinear") -> Volume3D:
    """Resample to exact target dims with pixel-center alignment."""
    if method not in ("trilinear", "nearest"):
        raise ValueError(f"method must be 'trilinear' or 'nearest', got {method!r}")
    if min(target) < 1:
        raise ValueError("target dims must be positive")
    src = vol.dims
    if tuple(target) == src:
        return vol
    axes = [(np.arange(t) + 0.5) * (s / t) - 0.5 for t, s in zip(target, src)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    order = 1 if method == "trilinear" else 0
    vals = ndimage.map_coordinates(vol.data, coords, order=order, mode="nearest")
    return Volume3D(vals.reshape(target))


def preprocess(image: Volume3D, extension: int, target: Dims,
               rng: np.random.Generator | None = None,
               companions: dict[str, tuple[Volume3D, str]] | None = None
               ) -> tuple[Volume3D, dict[str, Volume3D]]:
    """Crop to the image's nonzero box (randomly extended), then resize.

    Companion volumes (labels, probabilities) are cut with the image's
    box and resized with an interpolation order fitting their kind.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    bbox = extend_bbox(nonzero_bbox(image), image.dims, extension, rng)
    out_img = resize_volume(crop(image, bbox), target)
    extras: dict[str, Volume3D] = {}
    for name, (vol, kind) in (companions or {}).items():
        if vol.dims != image.dims:
            raise ValueError(f"companion {name} dims differ from the image")
        cropped = crop(vol, bbox)
        if kind == "label":
            extras[name] = LabelMask(resize_volume(cropped, target, "nearest").data)
        elif kind == "prob":
            resized = resize_volume(cropped, target, "trilinear")
            extras[name] = ProbabilityMap(np.clip(resized.data, 0.0, 1.0))
        else:
            extras[name] = resize_volume(cropped, target, "trilinear")
    return out_img, extras


def normalize_images(images: list[Volume3D]) -> list[Volume3D]:
    """Z-score with moments pooled over the whole list."""
    if not images:
        return []
    stacked = np.concatenate([v.flat() for v in images])
    mean = stacked.mean()
    std = stacked.std()
    if std < 1e-12:
        raise ValueError("zero variance; cannot normalize")
    return [Volume3D((v.data - mean) / std) for v in images]


# ---------------------------------------------------------------------------
# initial segmentations

def initial_segmentation(image: Volume3D, method: str = "bg",
                         path: str | Path | None = None,
                         steepness: float = 8.0) -> ProbabilityMap:
    """Cheap whole-volume starting probabilities for the refinement loop."""
    if method not in INITIAL_METHODS:
        raise ValueError(f"method must be one of {INITIAL_METHODS}, got {method!r}")
    if method == "bg":
        return ProbabilityMap(np.zeros(image.dims))
    if method == "external":
        if path is None:
            raise ValueError("external initial segmentation needs a path")
        vol, kind = read_volume(path)
        if kind != "prob":
            raise ValueError(f"{path} holds {kind!r}, expected a probability volume")
        if vol.dims != image.dims:
            raise ValueError("external probability dims differ from the image")
        return ProbabilityMap(vol.data)
    data = image.data
    if method == "blur-threshold":
        data = ndimage.uniform_filter(data, size=3)
    lo, hi = data.min(), data.max()
    if hi - lo < 1e-12:
        return ProbabilityMap(np.full(image.dims, 0.5))
    unit = (data - lo) / (hi - lo)
    return ProbabilityMap(1.0 / (1.0 + np.exp(-steepness * (unit - 0.5))))


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    image_path: str
    label_path: str
    initial_prob_path: str | None = None


@dataclass
class DatasetManifest:
    target_dims: Dims
    seed: int
    initial_method: str
    cases: list[CaseEntry] = field(default_factory=list)
    split: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = asdict(self)
        payload["target_dims"] = list(self.target_dims)
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> DatasetManifest:
        raw = json.loads(text)
        raw["target_dims"] = tuple(raw["target_dims"])
        raw["cases"] = [CaseEntry(**c) for c in raw["cases"]]
        return cls(**raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        return cls.from_json(Path(path).read_text())

    def entries(self, split: str) -> list[CaseEntry]:
        ids = set(self.split.get(split, []))
        missing = ids - {c.case_id for c in self.cases}
        if missing:
            raise ValueError(f"split {split!r} names unknown cases {sorted(missing)}")
        return [c for c in self.cases if c.case_id in ids]


def split_dataset(case_ids: list[str], n_train1: int, n_train2: int,
                  seed: int) -> dict[str, list[str]]:
    """Shuffle and cut into train1 / train2 / test, deterministically."""
    if n_train1 < 0 or n_train2 < 0 or n_train1 + n_train2 > len(case_ids):
        raise ValueError("split sizes exceed the dataset")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    shuffled = [case_ids[i] for i in order]
    return {
        "train1": sorted(shuffled[:n_train1]),
        "train2": sorted(shuffled[n_train1:n_train1 + n_train2]),
        "test": sorted(shuffled[n_train1 + n_train2:]),
    }


def build_dataset(out_dir: str | Path, n_cases: int, template: PhantomConfig,
                  raw_dims: Dims | None = None, extension: int = 10,
                  n_train1: int | None = None, n_train2: int | None = None,
                  initial_method: str = "bg", seed: int = 0) -> DatasetManifest:
    """Generate phantoms, preprocess, normalize, split, and write everything."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shapes = PHANTOM_SHAPES
    raw = raw_dims or tuple(int(round(d * 1.5)) for d in template.dims)

    images, labels, ids = [], [], []
    for i in range(n_cases):
        cfg = replace(template, dims=raw, shape=shapes[i % len(shapes)],
                      seed=int(rng.integers(0, 2**31)))
        image, truth = generate_phantom(cfg)
        image, extras = preprocess(image, extension, template.dims, rng,
                                   companions={"label": (truth, "label")})
        images.append(image)
        labels.append(extras["label"])
        ids.append(f"case{i:03d}")
    images = normalize_images(images)

    if n_train1 is None:
        n_train1 = int(round(n_cases * 0.43))
    if n_train2 is None:
        n_train2 = int(round(n_cases * 0.43))
    split = split_dataset(ids, n_train1, n_train2, seed)
    needs_prob = set(split["train2"]) | set(split["test"])

    cases = []
    for cid, image, label in zip(ids, images, labels):
        img_path = f"{cid}_image.rv3d"
        lab_path = f"{cid}_label.rv3d"
        write_volume(out / img_path, image, "image")
        write_volume(out / lab_path, LabelMask(label.data), "label")
        prob_path = None
        if cid in needs_prob:
            prob = initial_segmentation(image, initial_method)
            prob_path = f"{cid}_prob.rv3d"
            write_volume(out / prob_path, prob, "prob")
        cases.append(CaseEntry(cid, img_path, lab_path, prob_path))

    manifest = DatasetManifest(target_dims=template.dims, seed=seed,
                               initial_method=initial_method, cases=cases, split=split)
    manifest.save(out / "manifest.json")
    return manifest


def load_case(root: str | Path, entry: CaseEntry
              ) -> tuple[Volume3D, ProbabilityMap, LabelMask]:
    root = Path(root)
    image, kind = read_volume(root / entry.image_path)
    if kind != "image":
        raise ValueError(f"{entry.image_path} is not an image volume")
    label, kind = read_volume(root / entry.label_path)
    if kind != "label":
        raise ValueError(f"{entry.label_path} is not a label volume")
    if entry.initial_prob_path is not None:
        prob, kind = read_volume(root / entry.initial_prob_path)
        if kind != "prob":
            raise ValueError(f"{entry.initial_prob_path} is not a probability volume")
        prob = ProbabilityMap(prob.data)
    else:
        prob = ProbabilityMap(np.zeros(image.dims))
    return image, prob, LabelMask(label.data)  # type: ignore[return-value]
