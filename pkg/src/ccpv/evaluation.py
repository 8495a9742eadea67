"""Evaluation protocols: enrollment, score collection and metrics reports.

Protocol tokens:

``l2l``, ``r2r``, ``l2r``, ``r2l``
    gallery hand -> query hand on the same data.
``xspec:<a>:<b>``
    left palms in spectrum ``a`` enrolled, right palms in spectrum ``b``
    queried (append ``:l2l`` etc. to pick other hands).
``xdata``
    open-set: the test identities must be disjoint from the training ones;
    evaluated as ``l2r``.
``all``
    the four hand protocols plus every ordered spectrum pair when the data
    has more than one spectrum.
"""

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import Chirality, Spectrum
from .errors import EmptyProtocolSelection, ProtocolDataMissing
from .matching import (
    GalleryStore,
    MatchRule,
    Pairing,
    SourceChirality,
    TemplatePair,
    embed_pairs,
    four_match_matrix,
)
from .metrics import DEFAULT_FAR_TARGETS, ScoreSet, metrics_report, rank1_acc, roc
from .training import Framework, ImageBank

logger = logging.getLogger(__name__)

HAND_PROTOCOLS = ("l2l", "r2r", "l2r", "r2l")

# evaluation rule of each framework when none is requested
DEFAULT_RULES = {
    Framework.CCPV: MatchRule.MEAN4,
    Framework.NAIVE: MatchRule.SINGLE,
    Framework.TRADITIONAL: MatchRule.SINGLE,
    Framework.LRPR: MatchRule.SINGLE,
}


@dataclass(frozen=True)
class Protocol:
    name: str
    gallery_chirality: Chirality
    query_chirality: Chirality
    gallery_spectrum: Spectrum = None
    query_spectrum: Spectrum = None
    open_set: bool = False

    @property
    def slug(self):
        return self.name.replace(":", "_")


def _hands(token):
    token = token.lower()
    if token not in HAND_PROTOCOLS:
        raise ValueError(f"unknown hand protocol {token!r}")
    return Chirality.parse(token[0]), Chirality.parse(token[2])


def parse_protocol(token):
    token = token.strip()
    low = token.lower()
    if low in HAND_PROTOCOLS:
        g, q = _hands(low)
        return Protocol(low, g, q)
    if low == "xdata":
        return Protocol("xdata", Chirality.LEFT, Chirality.RIGHT, open_set=True)
    if low.startswith("xspec:"):
        parts = token.split(":")
        if len(parts) not in (3, 4):
            raise ValueError(f"bad cross-spectral protocol {token!r}")
        g, q = _hands(parts[3]) if len(parts) == 4 else (Chirality.LEFT, Chirality.RIGHT)
        a, b = Spectrum(parts[1].upper()), Spectrum(parts[2].upper())
        return Protocol(f"xspec:{a.value.lower()}:{b.value.lower()}" + (f":{parts[3].lower()}" if len(parts) == 4 else ""),
                        g, q, a, b)
    raise ValueError(f"unknown protocol {token!r}")


def expand_protocols(tokens, test_set):
    """Parse protocol tokens; ``all`` expands by the spectra present in ``test_set``."""
    if isinstance(tokens, str):
        tokens = [t for t in tokens.split(",") if t.strip()]
    out = []
    for tok in tokens:
        if tok.strip().lower() == "all":
            out += [parse_protocol(t) for t in HAND_PROTOCOLS]
            spectra = test_set.spectra()
            if len(spectra) < 2:
                warnings.warn("single-spectrum data: skipping cross-spectral protocols",
                              RuntimeWarning, stacklevel=2)
            else:
                out += [parse_protocol(f"xspec:{a.value}:{b.value}")
                        for a in spectra for b in spectra if a is not b]
        else:
            out.append(parse_protocol(tok))
    return out


def _spectrum_ok(sample, spectrum):
    return spectrum is None or sample.spectrum is spectrum


def select_protocol_data(test_set, protocol):
    """Pick gallery and query samples for a protocol.

    The first sample (manifest order) of each identity's gallery hand is
    enrolled; every remaining sample of the query hand is a query.
    """
    enrolled, gallery = set(), []
    for s in test_set.samples:
        if (s.chirality is protocol.gallery_chirality and _spectrum_ok(s, protocol.gallery_spectrum)
                and s.identity not in enrolled):
            enrolled.add(s.identity)
            gallery.append(s)
    used = {id(s) for s in gallery}
    queries = [s for s in test_set.samples
               if s.chirality is protocol.query_chirality and _spectrum_ok(s, protocol.query_spectrum)
               and id(s) not in used]
    if not gallery or not queries:
        raise ProtocolDataMissing(f"protocol {protocol.name}: {len(gallery)} gallery and "
                                  f"{len(queries)} query samples available")
    return gallery, queries


def _images(bank, samples, canonicalize):
    out = []
    for s in samples:
        img = bank.array(s)
        if canonicalize and s.chirality is Chirality.RIGHT:
            img = np.ascontiguousarray(img[:, ::-1])
        out.append(img)
    return out


def build_gallery(model, bank, samples, beta, canonicalize=False):
    """Enroll one image per identity into a fresh :class:`GalleryStore`."""
    store = GalleryStore(model.cfg.embedding_dim, beta)
    orig, flipped = embed_pairs(model, _images(bank, samples, canonicalize))
    for s, o, f in zip(samples, orig, flipped):
        store.add(TemplatePair(o, f, s.identity, SourceChirality(s.chirality.value)))
    return store


def match_queries(store, queries, model, protocol=None, rule=MatchRule.MEAN4,
                  pairing=Pairing.CROSS_PRODUCT, bank=None, canonicalize=False):
    """Aggregate distances of every (gallery entry, query).

    ``queries`` is a list of ``(PalmSample, identity)``. When ``protocol`` is
    given, only gallery entries of its gallery hand and queries of its query
    hand (and spectrum) take part. Returns ``(gallery_ids, query_ids, D)``
    with ``D`` of shape ``(G, Q)``.
    """
    entries = store.entries
    gal_ids = sorted(entries)
    if protocol is not None:
        want = SourceChirality(protocol.gallery_chirality.value)
        gal_ids = [i for i in gal_ids if entries[i].source_chirality is want]
        queries = [(s, ident) for s, ident in queries
                   if s.chirality is protocol.query_chirality and _spectrum_ok(s, protocol.query_spectrum)]
    if not gal_ids or not queries:
        name = protocol.name if protocol is not None else "(none)"
        raise EmptyProtocolSelection(f"protocol {name} selects {len(gal_ids)} gallery entries "
                                     f"and {len(queries)} queries")
    if bank is None:
        bank = ImageBank(model.cfg.image_side)
    _, g, gf = store.matrices(gal_ids)
    q, qf = embed_pairs(model, _images(bank, [s for s, _ in queries], canonicalize))
    agg, _ = four_match_matrix(g, gf, q, qf, store.beta, pairing, rule)
    return gal_ids, [ident for _, ident in queries], agg


def scores_from_matrix(gal_ids, query_ids, agg):
    index = {ident: i for i, ident in enumerate(gal_ids)}
    genuine_mask = np.zeros(agg.shape, dtype=bool)
    for j, ident in enumerate(query_ids):
        if ident in index:
            genuine_mask[index[ident], j] = True
    return ScoreSet(agg.T[genuine_mask.T], agg.T[~genuine_mask.T])


def collect_scores(store, queries, model, protocol, rule=MatchRule.MEAN4,
                   pairing=Pairing.CROSS_PRODUCT, bank=None, canonicalize=False):
    """Genuine and impostor aggregate distances for a protocol.

    Each query yields one genuine score (its own identity, when enrolled)
    and one impostor score per other gallery entry.
    """
    gal_ids, query_ids, agg = match_queries(store, queries, model, protocol, rule, pairing,
                                            bank, canonicalize)
    return scores_from_matrix(gal_ids, query_ids, agg)


def rankings_from_matrix(gal_ids, query_ids, agg):
    """Per query ``(true_identity, identities ranked by distance then key)``."""
    key_order = np.argsort(np.array(gal_ids, dtype=object), kind="stable")
    out = []
    for j, truth in enumerate(query_ids):
        col = agg[key_order, j]
        ranked = key_order[np.argsort(col, kind="stable")]
        out.append((truth, [gal_ids[i] for i in ranked]))
    return out


def evaluate(checkpoint, test_set, protocols, rule=None, pairing=Pairing.CROSS_PRODUCT,
             far_targets=DEFAULT_FAR_TARGETS, out_dir=None, return_scores=False):
    """Run each protocol and build one metrics report per protocol.

    ``rule`` defaults to the framework's own matching rule (four-matching
    for CCPV, single-pair otherwise). LRPR models see right palms flipped to
    left orientation. With ``out_dir`` set, writes ``report_<p>.json``,
    ``roc_<p>.csv`` and ``scores_<p>.csv`` per protocol.
    """
    cfg = checkpoint.train_config
    framework = Framework(cfg.get("framework", "ccpv"))
    rule = DEFAULT_RULES[framework] if rule is None else MatchRule(rule)
    canonicalize = framework is Framework.LRPR
    beta = float(cfg.get("beta", 1.0))
    model = checkpoint.model
    bank = ImageBank(model.cfg.image_side, bool(cfg.get("standardize", False)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if isinstance(protocols, str) or (protocols and not isinstance(protocols[0], Protocol)):
        protocols = expand_protocols(protocols, test_set)

    train_ids = {lbl.rsplit("_", 1)[0] if framework is Framework.TRADITIONAL else lbl
                 for lbl in checkpoint.labels}
    reports, all_scores = [], {}
    for proto in protocols:
        if proto.open_set and train_ids & set(test_set.identities()):
            raise ProtocolDataMissing("open-set protocol requires test identities unseen in training")
        gallery, queries = select_protocol_data(test_set, proto)
        store = build_gallery(model, bank, gallery, beta, canonicalize)
        gal_ids, query_ids, agg = match_queries(
            store, [(s, s.identity) for s in queries], model, proto, rule, pairing, bank, canonicalize)
        scores = scores_from_matrix(gal_ids, query_ids, agg)
        acc = rank1_acc(rankings_from_matrix(gal_ids, query_ids, agg))
        report = metrics_report(proto.name, scores, acc, far_targets)
        report["rule"] = rule.value
        report["framework"] = framework.value
        reports.append(report)
        all_scores[proto.name] = scores
        logger.info("%s: EER %.4f%% ACC %.2f%% (%d genuine / %d impostor)", proto.name,
                    100 * report["eer"], 100 * acc, report["n_genuine"], report["n_impostor"])
        if out_dir is not None:
            (out_dir / f"report_{proto.slug}.json").write_text(json.dumps(report, indent=2) + "\n")
            roc(scores).to_csv(out_dir / f"roc_{proto.slug}.csv")
            scores.to_csv(out_dir / f"scores_{proto.slug}.csv")
    return (reports, all_scores) if return_scores else reports
