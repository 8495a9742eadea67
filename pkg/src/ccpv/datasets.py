"""Manifest ingestion, protocol splits, identity-paired batching and synthetic data."""

import csv
import enum
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (
    BatchTooLarge,
    DatasetIoError,
    IdentityWithoutBothHands,
    InsufficientSamples,
    MissingColumn,
    UnknownChirality,
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("path", "identity", "chirality", "session", "spectrum")


class Chirality(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        token = str(value).strip().upper()
        aliases = {"L": cls.LEFT, "LEFT": cls.LEFT, "R": cls.RIGHT, "RIGHT": cls.RIGHT}
        if token not in aliases:
            raise UnknownChirality(f"unknown chirality {value!r}")
        return aliases[token]

    def opposite(self):
        return Chirality.RIGHT if self is Chirality.LEFT else Chirality.LEFT


class Spectrum(str, enum.Enum):
    RED = "RED"
    GREEN = "GREEN"
    BLUE = "BLUE"
    NIR = "NIR"
    WHITE = "WHITE"
    SYNTH = "SYNTH"


@dataclass(frozen=True)
class PalmSample:
    image_path: Path
    identity: str
    chirality: Chirality
    session: int = 1
    spectrum: Spectrum = Spectrum.SYNTH

    def __post_init__(self):
        if not self.identity:
            raise ValueError("identity must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self):
        return len(self.samples)

    def identities(self):
        """Distinct identity keys in first-appearance order."""
        return list(OrderedDict.fromkeys(s.identity for s in self.samples))

    def spectra(self):
        return list(OrderedDict.fromkeys(s.spectrum for s in self.samples))

    def by_identity(self):
        """``{identity: {Chirality: [samples in manifest order]}}``."""
        out = OrderedDict()
        for s in self.samples:
            out.setdefault(s.identity, {Chirality.LEFT: [], Chirality.RIGHT: []})[s.chirality].append(s)
        return out

    def filter(self, predicate, name=None):
        return DatasetManifest([s for s in self.samples if predicate(s)], name or self.name)

    def missing_hands(self):
        return [ident for ident, hands in self.by_identity().items()
                if not hands[Chirality.LEFT] or not hands[Chirality.RIGHT]]

    def require_both_hands(self):
        bad = self.missing_hands()
        if bad:
            raise IdentityWithoutBothHands(bad)

    def write_csv(self, path):
        """Write as a manifest CSV; image paths are stored relative to the CSV's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for s in self.samples:
                rel = os.path.relpath(Path(s.image_path).resolve(), base)
                writer.writerow([Path(rel).as_posix(), s.identity, s.chirality.value,
                                 s.session, s.spectrum.value])
        return path


def load_manifest(path, require_both_hands=True):
    """Parse a manifest CSV (``path,identity,chirality,session,spectrum``).

    Relative image paths are resolved against the manifest's directory. Row
    order is preserved. Images are not decoded here.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        samples = []
        for row in reader:
            img = Path(row["path"])
            if not img.is_absolute():
                img = path.parent / img
            spectrum = (row["spectrum"] or "SYNTH").strip().upper()
            samples.append(PalmSample(
                image_path=img,
                identity=row["identity"].strip(),
                chirality=Chirality.parse(row["chirality"]),
                session=int(row["session"] or 1),
                spectrum=Spectrum(spectrum),
            ))
    manifest = DatasetManifest(samples, name=path.stem)
    if require_both_hands:
        manifest.require_both_hands()
    return manifest


def load_image(path):
    """Decode an image file to an ``(H, W)`` uint8 array (colour is converted to luminance)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except OSError as exc:
        raise DatasetIoError(f"cannot decode image {path}: {exc}") from exc


@dataclass(frozen=True)
class SplitSpec:
    per_identity_train_left: int = 5
    per_identity_train_right: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.per_identity_train_left < 1 or self.per_identity_train_right < 1:
            raise ValueError("per-identity train counts must be >= 1")


def build_splits(manifest, spec):
    """Per identity, move a seeded random subset of each hand to train; the rest is test.

    Both outputs keep the input's row order.
    """
    rng = np.random.default_rng(spec.seed)
    need = {Chirality.LEFT: spec.per_identity_train_left,
            Chirality.RIGHT: spec.per_identity_train_right}
    train_keys = set()
    for ident, hands in manifest.by_identity().items():
        for chir in (Chirality.LEFT, Chirality.RIGHT):
            pool = hands[chir]
            if len(pool) < need[chir]:
                raise InsufficientSamples(ident, chir.name, len(pool), need[chir])
            for i in rng.permutation(len(pool))[: need[chir]]:
                train_keys.add(id(pool[i]))
    train = [s for s in manifest.samples if id(s) in train_keys]
    test = [s for s in manifest.samples if id(s) not in train_keys]
    return (DatasetManifest(train, f"{manifest.name}-train"),
            DatasetManifest(test, f"{manifest.name}-test"))


def sample_identity_batch(train, n_identities, rng_seed):
    """Draw ``n_identities`` distinct identities and one (left, right) sample of each.

    Returns a list of ``(x_l, x_r, identity)`` triples.
    """
    groups = train.by_identity()
    idents = [k for k, h in groups.items() if h[Chirality.LEFT] and h[Chirality.RIGHT]]
    if n_identities > len(idents):
        raise BatchTooLarge(f"requested {n_identities} identities, only {len(idents)} available")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(idents), size=n_identities, replace=False)
    batch = []
    for i in chosen:
        hands = groups[idents[i]]
        left = hands[Chirality.LEFT][rng.integers(len(hands[Chirality.LEFT]))]
        right = hands[Chirality.RIGHT][rng.integers(len(hands[Chirality.RIGHT]))]
        batch.append((left, right, idents[i]))
    return batch


def epoch_pair_batches(train, batch_identities, rng):
    """Yield one epoch of identity-paired batches.

    Each identity's left and right samples are shuffled and zipped into
    ``max(n_left, n_right)`` pairs (the shorter hand is cycled). Round ``k``
    takes the ``k``-th pair of every identity; identities are shuffled and
    chunked so no batch repeats an identity. Every sample is visited at
    least once per epoch.
    """
    groups = train.by_identity()
    pairs = {}
    for ident, hands in groups.items():
        lefts = [hands[Chirality.LEFT][i] for i in rng.permutation(len(hands[Chirality.LEFT]))]
        rights = [hands[Chirality.RIGHT][i] for i in rng.permutation(len(hands[Chirality.RIGHT]))]
        if not lefts or not rights:
            raise IdentityWithoutBothHands([ident])
        k = max(len(lefts), len(rights))
        pairs[ident] = [(lefts[i % len(lefts)], rights[i % len(rights)]) for i in range(k)]
    idents = list(pairs)
    n_rounds = max(len(p) for p in pairs.values())
    for r in range(n_rounds):
        active = [idents[i] for i in rng.permutation(len(idents)) if r < len(pairs[idents[i]])]
        for start in range(0, len(active), batch_identities):
            chunk = active[start:start + batch_identities]
            yield [(pairs[ident][r][0], pairs[ident][r][1], ident) for ident in chunk]


# ---------------------------------------------------------------------------
# synthetic data

# Ridge patches share one carrier frequency (cycles per image side), so
# identity lives in their placement and orientation, which a flip changes,
# rather than in a mirror-invariant frequency signature.
RIDGE_FREQ = 10.0


def palm_texture(rng, side=128, ridge_freq=RIDGE_FREQ):
    """Procedural palm-like texture in [0, 1].

    A few long curved creases plus many short oriented ridge patches. The
    pattern has no mirror symmetry, so a horizontal flip changes it.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    img = np.zeros((side, side))

    for _ in range(rng.integers(3, 6)):
        # quadratic Bezier crease
        p0, p1, p2 = rng.uniform(0.05, 0.95, size=(3, 2))
        t = np.linspace(0.0, 1.0, 4 * side)[:, None]
        curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        width = rng.uniform(0.008, 0.02)
        depth = rng.uniform(0.6, 1.0)
        mask = np.zeros((side, side))
        ij = np.clip((curve * side).astype(int), 0, side - 1)
        mask[ij[:, 1], ij[:, 0]] = 1.0
        img -= depth * np.minimum(gaussian_filter(mask, width * side) * (width * side) * 2.5, 1.0)

    for _ in range(rng.integers(25, 40)):
        cx, cy = rng.uniform(0, 1, size=2)
        theta = rng.uniform(0, np.pi)
        sigma = rng.uniform(0.06, 0.14)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        img += rng.uniform(0.2, 0.5) * envelope * np.cos(2 * np.pi * ridge_freq * u + rng.uniform(0, 2 * np.pi))

    img = gaussian_filter(img, 0.6)
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.1 + 0.8 * img


def _to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic_dataset(n_identities, images_per_palm, noise_sigma, out_dir, seed,
                               side=128, name="synthetic"):
    """Write a mirror-symmetric synthetic palm dataset and its manifest.

    Each identity gets one base texture. LEFT samples are the base plus
    Gaussian noise of std ``noise_sigma``; RIGHT samples are the horizontally
    flipped base plus independent noise. With ``noise_sigma == 0`` a flipped
    RIGHT image equals the quantized LEFT base exactly.

    Images go to ``out_dir`` as 8-bit PNGs alongside ``manifest.csv``.
    """
    if n_identities < 2:
        raise ValueError("n_identities must be >= 2")
    if images_per_palm < 1:
        raise ValueError("images_per_palm must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIoError(f"cannot create {out_dir}: {exc}") from exc

    width = len(str(n_identities - 1))
    root = np.random.SeedSequence(seed)
    samples = []
    for ident_idx, child in enumerate(root.spawn(n_identities)):
        base_seq, noise_seq = child.spawn(2)
        base = palm_texture(np.random.default_rng(base_seq), side)
        base_q = _to_uint8(base).astype(np.float64) / 255.0
        ident = f"id{ident_idx:0{width}d}"
        noise_rngs = [np.random.default_rng(s) for s in noise_seq.spawn(2 * images_per_palm)]
        for c_idx, chir in enumerate((Chirality.LEFT, Chirality.RIGHT)):
            oriented = base_q if chir is Chirality.LEFT else base_q[:, ::-1]
            for k in range(images_per_palm):
                rng = noise_rngs[c_idx * images_per_palm + k]
                img = oriented if noise_sigma == 0 else oriented + rng.normal(0.0, noise_sigma, oriented.shape)
                fname = f"{ident}_{chir.value}_{k:02d}.png"
                try:
                    Image.fromarray(_to_uint8(img), mode="L").save(out_dir / fname)
                except OSError as exc:
                    raise DatasetIoError(f"cannot write {out_dir / fname}: {exc}") from exc
                session = 1 if k < (images_per_palm + 1) // 2 else 2
                samples.append(PalmSample(out_dir / fname, ident, chir, session, Spectrum.SYNTH))
    manifest = DatasetManifest(samples, name)
    manifest.write_csv(out_dir / "manifest.csv")
    logger.info("wrote %d synthetic samples to %s", len(samples), out_dir)
    return manifest
