"""Portable tensor files, dataset manifests, and synthetic feature generation.

Tensor file layout (little-endian throughout):
    magic   4 bytes  b"AAHR"
    version u16      currently 1
    ndim    u8
    dims    u32 * ndim
    payload f32 * prod(dims), row-major

The manifest is UTF-8 JSON; see ``save_manifest`` for the schema.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError

MAGIC = b"AAHR"
VERSION = 1
TENSOR_SUFFIX = ".aahr"

_HEADER_FMT = "<4sHB"  # magic, version, ndim
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def tensor_to_bytes(t) -> bytes:
    """Serialize a dense float tensor (any numpy-convertible) to the wire format."""
    arr = np.ascontiguousarray(t, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to serialize non-finite tensor")
    if any(d < 1 for d in arr.shape):
        raise FormatError(f"all dims must be >= 1, got shape {arr.shape}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError(f"dims do not fit in 32 bits: {arr.shape}")
    header = struct.pack(_HEADER_FMT, MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    """Parse the wire format back into a float32 array."""
    if len(buf) < _HEADER_SIZE:
        raise FormatError(f"tensor blob too short: {len(buf)} bytes")
    magic, version, ndim = struct.unpack_from(_HEADER_FMT, buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if ndim < 1:
        raise FormatError("ndim must be >= 1")
    dims_end = _HEADER_SIZE + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("tensor blob truncated inside dims block")
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEADER_SIZE)
    if any(d < 1 for d in dims):
        raise FormatError(f"all dims must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if len(buf) != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes for dims {dims}, got {len(buf)}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end)
    return arr.reshape(dims).copy()


def write_tensor(t, path) -> None:
    """Write a tensor to ``path``; round-trips bit-exactly for float32 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read tensor file {path}: {exc}") from exc
    try:
        return tensor_from_bytes(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass
class FeatureBundle:
    """Precomputed features for one image-caption pair."""

    regions: np.ndarray       # n_r x d_v
    words: np.ndarray         # n_t x d_w
    global_image: np.ndarray  # d_g
    global_text: np.ndarray   # d_g
    pair_id: str = ""

    def validate(self) -> "FeatureBundle":
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise FormatError(f"regions must be a nonempty matrix, got {self.regions.shape}")
        if self.words.ndim != 2 or self.words.shape[0] < 1:
            raise FormatError(f"words must be a nonempty matrix, got {self.words.shape}")
        if self.global_image.ndim != 1 or self.global_text.ndim != 1:
            raise FormatError("global features must be vectors")
        for name in ("regions", "words", "global_image", "global_text"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FormatError(f"{name} of pair {self.pair_id!r} contains non-finite values")
        return self


@dataclass
class PairRecord:
    pair_id: str
    image_id: str
    caption_id: str
    files: dict  # keys: regions, words, global_image, global_text -> relative paths


@dataclass
class DatasetManifest:
    name: str
    dims: dict                      # d_v, d_w, d_g and optionally n_r, n_t
    pairs: list
    image_to_captions: dict         # image_id -> sorted list of caption_ids
    caption_to_images: dict
    root: Path = field(default_factory=Path)  # directory file paths are relative to

    def pair(self, pair_id: str) -> PairRecord:
        for p in self.pairs:
            if p.pair_id == pair_id:
                return p
        raise DatasetError(f"pair {pair_id!r} not in manifest {self.name!r}")


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "name": manifest.name,
        "dims": manifest.dims,
        "pairs": [asdict(p) for p in manifest.pairs],
        "positives": {
            "image_to_captions": manifest.image_to_captions,
            "caption_to_images": manifest.caption_to_images,
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    try:
        pairs = [PairRecord(**p) for p in doc["pairs"]]
        manifest = DatasetManifest(
            name=doc["name"],
            dims=doc["dims"],
            pairs=pairs,
            image_to_captions=doc["positives"]["image_to_captions"],
            caption_to_images=doc["positives"]["caption_to_images"],
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest {path} is missing required fields: {exc}") from exc
    for p in manifest.pairs:
        caps = manifest.image_to_captions.get(p.image_id, [])
        imgs = manifest.caption_to_images.get(p.caption_id, [])
        if p.caption_id not in caps or p.image_id not in imgs:
            raise FormatError(
                f"pair {p.pair_id!r} is not listed in positives for its own image/caption"
            )
    return manifest


def read_bundle(manifest: DatasetManifest, pair_id: str) -> FeatureBundle:
    """Load one pair's features, checking dims against the manifest declarations."""
    rec = manifest.pair(pair_id)
    tensors = {}
    for key in ("regions", "words", "global_image", "global_text"):
        rel = rec.files.get(key)
        if rel is None:
            raise DatasetError(f"pair {pair_id!r} has no {key} file")
        fpath = manifest.root / rel
        if not fpath.exists():
            raise DatasetError(f"missing tensor file {fpath} for pair {pair_id!r}")
        tensors[key] = read_tensor(fpath)
    d = manifest.dims
    checks = [
        ("regions", tensors["regions"].shape[-1], d.get("d_v")),
        ("words", tensors["words"].shape[-1], d.get("d_w")),
        ("global_image", tensors["global_image"].shape[0], d.get("d_g")),
        ("global_text", tensors["global_text"].shape[0], d.get("d_g")),
        ("regions rows", tensors["regions"].shape[0], d.get("n_r")),
        ("words rows", tensors["words"].shape[0], d.get("n_t")),
    ]
    for name, actual, expected in checks:
        if expected is not None and actual != expected:
            raise FormatError(
                f"pair {pair_id!r}: {name} dim mismatch, expected {expected}, got {actual}"
            )
    return FeatureBundle(
        regions=tensors["regions"],
        words=tensors["words"],
        global_image=tensors["global_image"],
        global_text=tensors["global_text"],
        pair_id=pair_id,
    ).validate()


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check that every referenced file exists and parses with declared dims."""
    for rec in manifest.pairs:
        read_bundle(manifest, rec.pair_id)


@dataclass
class SynthSpec:
    """Parameters for the latent-concept synthetic dataset generator."""

    num_concepts: int = 8
    pairs_per_concept: int = 25
    d_v: int = 64
    d_w: int = 64
    d_g: int = 32
    n_r: int = 8
    n_t: int = 6
    noise_sigma: float = 0.1
    seed: int = 42
    name: str = "synthetic"

    def validate(self) -> "SynthSpec":
        if self.num_concepts < 2:
            raise FormatError("num_concepts must be >= 2")
        if self.noise_sigma < 0:
            raise FormatError("noise_sigma must be >= 0")
        if min(self.d_v, self.d_w, self.d_g, self.n_r, self.n_t, self.pairs_per_concept) < 1:
            raise FormatError("dims and counts must be >= 1")
        return self


def _orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    g = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(g)
    # fix signs so the map is stable under the QR implementation's conventions
    q = q * np.sign(np.diag(r))
    return q


def _split_rng(seed: int, split: str) -> np.random.Generator:
    digest = hashlib.sha256(split.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def generate_synthetic(spec: SynthSpec, out_dir, split: str = "train") -> DatasetManifest:
    """Generate a synthetic dataset and write it under ``out_dir``.

    Each concept owns a unit latent vector; each pair perturbs it by Gaussian
    noise of scale ``noise_sigma`` (re-normalized), then projects the pair
    latent into every modality through fixed orthonormal maps, adding
    per-draw observation noise of the same scale.  Concept latents and the
    modality maps depend only on ``spec.seed``, so manifests generated with
    different ``split`` names share the same underlying concepts and are
    valid train/held-out companions.  Positives link each image only to its
    own caption; concept mates stay unlabeled.
    """
    spec.validate()
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)

    latent_dim = min(spec.d_v, spec.d_w, spec.d_g)
    rng = np.random.default_rng(spec.seed)
    mu = rng.standard_normal((spec.num_concepts, latent_dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    map_regions = _orthonormal_columns(rng, spec.d_v, latent_dim)
    map_words = _orthonormal_columns(rng, spec.d_w, latent_dim)
    map_gimg = _orthonormal_columns(rng, spec.d_g, latent_dim)
    map_gtxt = _orthonormal_columns(rng, spec.d_g, latent_dim)

    pair_rng = _split_rng(spec.seed, split)
    sigma = spec.noise_sigma
    pairs = []
    image_to_captions = {}
    caption_to_images = {}
    for c in range(spec.num_concepts):
        for p in range(spec.pairs_per_concept):
            pid = f"{split}-c{c:02d}-p{p:03d}"
            latent = mu[c] + sigma * pair_rng.standard_normal(latent_dim)
            latent /= np.linalg.norm(latent)
            regions = latent @ map_regions.T + sigma * pair_rng.standard_normal((spec.n_r, spec.d_v))
            words = latent @ map_words.T + sigma * pair_rng.standard_normal((spec.n_t, spec.d_w))
            gimg = map_gimg @ latent + sigma * pair_rng.standard_normal(spec.d_g)
            gtxt = map_gtxt @ latent + sigma * pair_rng.standard_normal(spec.d_g)
            files = {
                "regions": f"tensors/{pid}.regions{TENSOR_SUFFIX}",
                "words": f"tensors/{pid}.words{TENSOR_SUFFIX}",
                "global_image": f"tensors/{pid}.gimg{TENSOR_SUFFIX}",
                "global_text": f"tensors/{pid}.gtxt{TENSOR_SUFFIX}",
            }
            write_tensor(regions, out_dir / files["regions"])
            write_tensor(words, out_dir / files["words"])
            write_tensor(gimg, out_dir / files["global_image"])
            write_tensor(gtxt, out_dir / files["global_text"])
            image_id = f"img-{pid}"
            caption_id = f"cap-{pid}"
            pairs.append(PairRecord(pid, image_id, caption_id, files))
            image_to_captions[image_id] = [caption_id]
            caption_to_images[caption_id] = [image_id]

    manifest = DatasetManifest(
        name=f"{spec.name}-{split}",
        dims={
            "d_v": spec.d_v,
            "d_w": spec.d_w,
            "d_g": spec.d_g,
            "n_r": spec.n_r,
            "n_t": spec.n_t,
        },
        pairs=pairs,
        image_to_captions=image_to_captions,
        caption_to_images=caption_to_images,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
