"""Angular matching distance, the four-matching rule and the enrollment gallery."""

import csv
import enum
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    DimMismatch,
    DuplicateIdentity,
    EmptyGallery,
    GalleryFormatError,
    UnknownIdentity,
    ZeroNormTemplate,
)
from .model import embed
from .transforms import flip

GALLERY_MAGIC = b"CCPVGAL\x00"
GALLERY_VERSION = 1


class MatchRule(str, enum.Enum):
    MEAN4 = "mean4"
    COMPETITION = "competition"
    SINGLE = "single"


class Pairing(str, enum.Enum):
    CROSS_PRODUCT = "cross_product"
    AS_WRITTEN = "as_written"


class SourceChirality(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"
    UNKNOWN = "U"


_CHIR_BYTE = {SourceChirality.LEFT: 0, SourceChirality.RIGHT: 1, SourceChirality.UNKNOWN: 2}
_BYTE_CHIR = {v: k for k, v in _CHIR_BYTE.items()}


def _as_source(chirality):
    if chirality is None:
        return SourceChirality.UNKNOWN
    return SourceChirality(getattr(chirality, "value", chirality))


def distance(e_g, e_q, beta=1.0):
    """``arccos(cos_sim(e_g, e_q)) / beta``, in ``[0, pi / beta]``."""
    e_g = np.asarray(e_g, dtype=np.float64)
    e_q = np.asarray(e_q, dtype=np.float64)
    if e_g.shape != e_q.shape:
        raise DimMismatch(f"template shapes differ: {e_g.shape} vs {e_q.shape}")
    ng, nq = np.linalg.norm(e_g), np.linalg.norm(e_q)
    if ng == 0 or nq == 0:
        raise ZeroNormTemplate("cannot match a zero-norm template")
    cos = float(np.dot(e_g, e_q) / (ng * nq))
    return math.acos(min(1.0, max(-1.0, cos))) / beta


def distance_matrix(gallery, queries, beta=1.0):
    """Pairwise distances, ``out[i, j] = distance(gallery[i], queries[j])``."""
    g = np.asarray(gallery, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    ng = np.linalg.norm(g, axis=1, keepdims=True)
    nq = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(ng == 0) or np.any(nq == 0):
        raise ZeroNormTemplate("cannot match a zero-norm template")
    cos = (g / ng) @ (q / nq).T
    return np.arccos(np.clip(cos, -1.0, 1.0)) / beta


@dataclass(frozen=True)
class TemplatePair:
    original: np.ndarray
    flipped: np.ndarray
    identity: str = ""
    source_chirality: SourceChirality = SourceChirality.UNKNOWN


@dataclass(frozen=True)
class MatchResult:
    d1: float
    d2: float
    d3: float
    d4: float
    aggregate: float
    rule: MatchRule

    @property
    def distances(self):
        return (self.d1, self.d2, self.d3, self.d4)

    def to_dict(self):
        return {"d1": self.d1, "d2": self.d2, "d3": self.d3, "d4": self.d4,
                "aggregate": self.aggregate, "rule": self.rule.value}


def aggregate_distances(d, rule=MatchRule.MEAN4):
    """Combine four distances: mean (four-matching), min (competition) or ``d[0]`` (single)."""
    rule = MatchRule(rule)
    d1, d2, d3, d4 = (float(x) for x in d)
    if rule is MatchRule.MEAN4:
        return (d1 + d2 + d3 + d4) / 4
    if rule is MatchRule.COMPETITION:
        return min(d1, d2, d3, d4)
    return d1


def four_match(gallery, query, beta=1.0, pairing=Pairing.CROSS_PRODUCT, rule=MatchRule.MEAN4):
    """Match (original, flipped) template pairs of a gallery and a query.

    ``CROSS_PRODUCT`` uses the full {orig, flipped} x {orig, flipped} product.
    ``AS_WRITTEN`` replaces the second pair with the gallery against its own
    flip, ``d2 = dis(g, g_f)``.
    """
    if np.shape(gallery.original) != np.shape(query.original):
        raise DimMismatch("gallery and query template dimensions differ")
    g, gf, q, qf = gallery.original, gallery.flipped, query.original, query.flipped
    d1 = distance(g, q, beta)
    d2 = distance(g, gf, beta) if Pairing(pairing) is Pairing.AS_WRITTEN else distance(g, qf, beta)
    d3 = distance(gf, q, beta)
    d4 = distance(gf, qf, beta)
    rule = MatchRule(rule)
    return MatchResult(d1, d2, d3, d4, aggregate_distances((d1, d2, d3, d4), rule), rule)


def four_match_matrix(g, gf, q, qf, beta=1.0, pairing=Pairing.CROSS_PRODUCT, rule=MatchRule.MEAN4):
    """Vectorized :func:`four_match` over all gallery x query pairs.

    Returns ``(aggregate, d)`` where ``d`` has shape ``(4, G, Q)``.
    """
    d1 = distance_matrix(g, q, beta)
    if Pairing(pairing) is Pairing.AS_WRITTEN:
        self_d = np.arccos(np.clip(np.sum(_unit(g) * _unit(gf), axis=1), -1, 1)) / beta
        d2 = np.repeat(self_d[:, None], d1.shape[1], axis=1)
    else:
        d2 = distance_matrix(g, qf, beta)
    d = np.stack([d1, d2, distance_matrix(gf, q, beta), distance_matrix(gf, qf, beta)])
    rule = MatchRule(rule)
    if rule is MatchRule.MEAN4:
        agg = (d[0] + d[1] + d[2] + d[3]) / 4
    elif rule is MatchRule.COMPETITION:
        agg = d.min(axis=0)
    else:
        agg = d[0]
    return agg, d


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def embed_pairs(model, images, batch_size=256):
    """Embed images and their horizontal flips in eval mode.

    ``images`` are preprocessed ``(S, S)`` arrays. Returns two ``(N, D)``
    float64 arrays ``(original, flipped)``.
    """
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    orig, flipped = [], []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = np.stack([np.asarray(im) for im in images[start:start + batch_size]])
                x = torch.as_tensor(chunk[:, None], dtype=dtype)
                out = embed(model, torch.cat([x, flip(x)])).double().numpy()
                orig.append(out[: len(chunk)])
                flipped.append(out[len(chunk):])
    finally:
        model.train(was_training)
    dim = model.cfg.embedding_dim
    if not orig:
        return np.zeros((0, dim)), np.zeros((0, dim))
    return np.concatenate(orig), np.concatenate(flipped)


class GalleryStore:
    """One (original, flipped) template pair per enrolled identity.

    Reads take a snapshot under a lock, writes are exclusive, so concurrent
    verification during enrollment sees a consistent store.
    """

    def __init__(self, dim, beta=1.0):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.dim = int(dim)
        self.beta = float(beta)
        self._entries = {}
        self._lock = threading.RLock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, identity):
        return identity in self._entries

    @property
    def entries(self):
        with self._lock:
            return dict(self._entries)

    def identities(self):
        return sorted(self.entries)

    def get(self, identity):
        with self._lock:
            if identity not in self._entries:
                raise UnknownIdentity(f"identity {identity!r} is not enrolled")
            return self._entries[identity]

    def add(self, pair, overwrite=False):
        if np.shape(pair.original) != (self.dim,) or np.shape(pair.flipped) != (self.dim,):
            raise DimMismatch(f"expected templates of dimension {self.dim}")
        with self._lock:
            if pair.identity in self._entries and not overwrite:
                raise DuplicateIdentity(f"identity {pair.identity!r} already enrolled")
            self._entries[pair.identity] = pair
        return self

    def matrices(self, identities=None):
        """Stacked ``(ids, originals, flipped)`` in sorted identity order."""
        entries = self.entries
        ids = sorted(entries) if identities is None else list(identities)
        if not ids:
            return [], np.zeros((0, self.dim)), np.zeros((0, self.dim))
        g = np.stack([entries[i].original for i in ids]).astype(np.float64)
        gf = np.stack([entries[i].flipped for i in ids]).astype(np.float64)
        return ids, g, gf

    # -- persistence --------------------------------------------------------

    def save(self, path):
        """Binary gallery: header then one record per entry.

        Header: magic, version (u16), D (u32), beta (f64), count (u32).
        Record: identity length (u16) + UTF-8 bytes, ``2 x D`` little-endian
        float32 (original then flipped), chirality byte (0=L, 1=R, 2=unknown).
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = self.entries
        with open(path, "wb") as fh:
            fh.write(GALLERY_MAGIC)
            fh.write(struct.pack("<HIdI", GALLERY_VERSION, self.dim, self.beta, len(entries)))
            for ident in sorted(entries):
                pair = entries[ident]
                raw = ident.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                vec = np.concatenate([pair.original, pair.flipped]).astype("<f4")
                fh.write(vec.tobytes())
                fh.write(bytes([_CHIR_BYTE[pair.source_chirality]]))
        return path

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if not data.startswith(GALLERY_MAGIC):
            raise GalleryFormatError(f"{path} is not a gallery file")
        off = len(GALLERY_MAGIC)
        head = struct.calcsize("<HIdI")
        version, dim, beta, count = struct.unpack_from("<HIdI", data, off)
        if version != GALLERY_VERSION:
            raise GalleryFormatError(f"unsupported gallery version {version}")
        off += head
        store = cls(dim, beta)
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, off)
                off += 2
                ident = data[off:off + n].decode("utf-8")
                off += n
                vec = np.frombuffer(data, dtype="<f4", count=2 * dim, offset=off).astype(np.float64)
                off += 8 * dim
                chir = _BYTE_CHIR[data[off]]
                off += 1
                store.add(TemplatePair(vec[:dim], vec[dim:], ident, chir))
        except (struct.error, ValueError, IndexError, KeyError) as exc:
            raise GalleryFormatError(f"truncated or corrupt gallery {path}: {exc}") from exc
        return store

    def export_csv(self, path):
        """Human-readable dump: ``identity,chirality,view,v0..v{D-1}``."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["identity", "chirality", "view"] + [f"v{i}" for i in range(self.dim)])
            for ident, pair in sorted(self.entries.items()):
                for view, vec in (("original", pair.original), ("flipped", pair.flipped)):
                    w.writerow([ident, pair.source_chirality.value, view] + [f"{x:.8g}" for x in vec])
        return path


def template_pair(model, image, identity="", chirality=None):
    orig, flipped = embed_pairs(model, [image])
    return TemplatePair(orig[0], flipped[0], identity, _as_source(chirality))


def enroll(store, identity, image, model, chirality=None, overwrite=False):
    """Embed one preprocessed palm image and its flip and store them under ``identity``."""
    if identity in store and not overwrite:
        raise DuplicateIdentity(f"identity {identity!r} already enrolled")
    return store.add(template_pair(model, image, identity, chirality), overwrite=overwrite)


def verify(store, identity, query_image, model, threshold, rule=MatchRule.MEAN4,
           pairing=Pairing.CROSS_PRODUCT):
    """Four-match a query image against an enrolled identity.

    Returns ``(accept, MatchResult)`` with ``accept = aggregate <= threshold``.
    """
    enrolled = store.get(identity)
    query = template_pair(model, query_image)
    result = four_match(enrolled, query, store.beta, pairing, rule)
    return result.aggregate <= threshold, result


def identify(store, query_image, model, rule=MatchRule.MEAN4, pairing=Pairing.CROSS_PRODUCT):
    """Rank every enrolled identity by aggregate distance (ties by identity key)."""
    if len(store) == 0:
        raise EmptyGallery("cannot identify against an empty gallery")
    query = template_pair(model, query_image)
    ranked = [(ident, four_match(pair, query, store.beta, pairing, rule).aggregate)
              for ident, pair in store.entries.items()]
    ranked.sort(key=lambda t: (t[1], t[0]))
    return ranked
