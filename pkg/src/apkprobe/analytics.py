"""Verdict-delta analytics: flips, rates, attribution, entities.

Everything here consumes immutable reports and transform records. The
boolean view of a verdict counts only the "malicious" category; suspicious
rows count as not-malicious. Positive flips go malicious -> not-malicious
under a transformation, negative flips the reverse, and label changes are
two malicious verdicts whose normalized families differ.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .errors import ValidationError
from .labels import normalize_label
from .reports import EngineVerdict, ScanReport

POSITIVE = "positive"
NEGATIVE = "negative"
LABEL_CHANGE = "label-change"
NONE = "none"

FLIP_KINDS = (POSITIVE, NEGATIVE, LABEL_CHANGE, NONE)


@dataclass(frozen=True)
class FlipEvent:
    engine: str
    kind: str


@dataclass(frozen=True)
class FlipRates:
    engine: str
    transform: str
    pfr: Optional[float]
    nfr: Optional[float]
    malware_labels: int        # PFR denominator
    non_malware_labels: int    # NFR denominator
    positive_flips: int
    negative_flips: int
    pfr_reason: Optional[str] = None
    nfr_reason: Optional[str] = None


@dataclass
class PairedVerdicts:
    """Per-engine (before, after) rows for one app/variant pair."""

    pairs: dict = field(default_factory=dict)   # engine -> (before, after)
    degraded: set = field(default_factory=set)  # version/update mismatch
    coverage_notes: list = field(default_factory=list)


@dataclass
class InteractionRecord:
    """One probe: original u, variant v = Tr(u), and the verdict deltas."""

    original_sha256: str
    variant_sha256: str
    transform_kind: str
    pairs: dict                     # engine -> (before, after)
    degraded: set = field(default_factory=set)


# -- core measures -------------------------------------------------------------

def maliciousness(report: ScanReport, allowlist) -> int:
    """Number of allowlisted engines calling the app malicious."""
    allowed = set(allowlist)
    return sum(1 for name, verdict in report.verdicts.items()
               if name in allowed and verdict.is_malicious)


def classify_delta(before: EngineVerdict, after: EngineVerdict) -> FlipEvent:
    if before.engine_name != after.engine_name:
        raise ValidationError("cannot pair verdicts from different engines")
    b, a = before.is_malicious, after.is_malicious
    if b and not a:
        kind = POSITIVE
    elif not b and a:
        kind = NEGATIVE
    elif b and a and not _same_family(before.result, after.result):
        kind = LABEL_CHANGE
    else:
        kind = NONE
    return FlipEvent(before.engine_name, kind)


def _same_family(label_a: Optional[str], label_b: Optional[str]) -> bool:
    if label_a is None or label_b is None:
        return label_a == label_b
    return normalize_label(label_a).family == normalize_label(label_b).family


def compute_flip_rates(records, engine: str, transform: str) -> FlipRates:
    """PFR/NFR for one engine: flips over eligible before-labels."""
    records = list(records)
    if not records:
        raise ValidationError("no records to aggregate")
    for record in records:
        if record.transform_kind != transform:
            raise ValidationError(
                "record with transform %r mixed into %r aggregation"
                % (record.transform_kind, transform))

    malware_labels = non_malware_labels = 0
    positive = negative = 0
    for record in records:
        pair = record.pairs.get(engine)
        if pair is None:
            continue
        before, after = pair
        event = classify_delta(before, after)
        if before.is_malicious:
            malware_labels += 1
            positive += event.kind == POSITIVE
        else:
            non_malware_labels += 1
            negative += event.kind == NEGATIVE

    pfr = positive / malware_labels if malware_labels else None
    nfr = negative / non_malware_labels if non_malware_labels else None
    return FlipRates(
        engine, transform, pfr, nfr, malware_labels, non_malware_labels,
        positive, negative,
        pfr_reason=None if malware_labels else "no before-malicious labels",
        nfr_reason=None if non_malware_labels else "no before-benign labels")


def count_flips(records) -> Counter:
    """(engine, transform, kind) -> count over all paired rows."""
    out: Counter = Counter()
    for record in records:
        for engine, (before, after) in record.pairs.items():
            event = classify_delta(before, after)
            out[(engine, record.transform_kind, event.kind)] += 1
    return out


# -- pairing -----------------------------------------------------------------

def pair_versions(first: ScanReport, later: ScanReport) -> PairedVerdicts:
    """Pair per-engine rows; mismatched engine versions are kept but marked.

    Engines present on only one side are excluded and listed in the
    coverage notes.
    """
    out = PairedVerdicts()
    for engine, before in first.verdicts.items():
        after = later.verdicts.get(engine)
        if after is None:
            out.coverage_notes.append("%s: only in first report" % engine)
            continue
        out.pairs[engine] = (before, after)
        if (before.engine_version != after.engine_version
                or before.engine_update != after.engine_update):
            out.degraded.add(engine)
    for engine in later.verdicts:
        if engine not in first.verdicts:
            out.coverage_notes.append("%s: only in later report" % engine)
    return out


def build_interaction_records(transform_records, report_lookup) -> list:
    """Join transform provenance with reports.

    ``report_lookup`` maps sha256 -> ScanReport (e.g. latest first snapshot).
    Transforms whose input and output digests are equal (no-ops) and apps
    with a missing report are skipped.
    """
    out = []
    for record in transform_records:
        if record.input_sha256 == record.output_sha256:
            continue
        before = report_lookup(record.input_sha256)
        after = report_lookup(record.output_sha256)
        if before is None or after is None:
            continue
        paired = pair_versions(before, after)
        out.append(InteractionRecord(record.input_sha256, record.output_sha256,
                                     record.kind, paired.pairs, paired.degraded))
    return out


# -- label comparison ----------------------------------------------------------

MATCHES_U_ONLY = "matches-u-only"
MATCHES_V_ONLY = "matches-v-only"
MATCHES_BOTH = "matches-both"
MATCHES_NEITHER = "matches-neither"
ANY_UNDETECTED = "any-undetected"


def compare_fusion_labels(label_u: Optional[str], label_v: Optional[str],
                          label_w: Optional[str]) -> str:
    """Compare the fused app's family with its two parents' families."""
    if label_u is None or label_v is None or label_w is None:
        return ANY_UNDETECTED
    w = normalize_label(label_w).family
    matches_u = w == normalize_label(label_u).family
    matches_v = w == normalize_label(label_v).family
    if matches_u and matches_v:
        return MATCHES_BOTH
    if matches_u:
        return MATCHES_U_ONLY
    if matches_v:
        return MATCHES_V_ONLY
    return MATCHES_NEITHER


# -- distributions -------------------------------------------------------------

def histogram_by_maliciousness(reports, allowlist) -> list:
    """[(m, app count)] with zero bins up to the maximum observed m."""
    values = [maliciousness(r, allowlist) for r in reports]
    if not values:
        return []
    counts = Counter(values)
    return [(m, counts.get(m, 0)) for m in range(max(values) + 1)]


def mean_maliciousness(reports, allowlist) -> float:
    values = [maliciousness(r, allowlist) for r in reports]
    return sum(values) / len(values) if values else 0.0


def maliciousness_drop(before_reports, after_reports, allowlist) -> dict:
    """Relative drop under a transformation, in both natural weightings.

    ``per_label`` divides the total lost label count by the total before
    count; ``per_app`` averages each app's own relative drop (apps with a
    zero before-count are skipped there). The two differ whenever apps carry
    unequal weight, so both are reported.
    """
    before = [maliciousness(r, allowlist) for r in before_reports]
    after = [maliciousness(r, allowlist) for r in after_reports]
    if len(before) != len(after):
        raise ValidationError("before/after report counts differ")
    total_before, total_after = sum(before), sum(after)
    per_label = ((total_before - total_after) / total_before
                 if total_before else None)
    ratios = [(b - a) / b for b, a in zip(before, after) if b]
    per_app = sum(ratios) / len(ratios) if ratios else None
    return {"per_label": per_label, "per_app": per_app,
            "apps_counted": len(ratios)}


# -- module attribution --------------------------------------------------------

@dataclass
class ModuleAttribution:
    original_m: int
    baseline_m: int
    scores: dict                   # cluster id -> floored score
    pareto: list                   # [(fraction of clusters, cumulative share)]


def attribute_modules(original_report: ScanReport,
                      baseline_report: Optional[ScanReport],
                      variant_reports: dict, allowlist) -> ModuleAttribution:
    """Score each module by the maliciousness its keep-one variant retains
    over the all-stubbed baseline, floored at zero, plus the Pareto curve."""
    if baseline_report is None:
        raise ValidationError("module attribution needs the baseline report")
    if not variant_reports:
        raise ValidationError("no module variants supplied")
    baseline_m = maliciousness(baseline_report, allowlist)
    scores = {}
    for cluster_id, report in variant_reports.items():
        scores[cluster_id] = max(0, maliciousness(report, allowlist) - baseline_m)

    ordered = sorted(scores, key=lambda cid: (-scores[cid], cid))
    total = sum(scores.values())
    pareto = [(0.0, 0.0)]
    running = 0
    for index, cluster_id in enumerate(ordered, 1):
        running += scores[cluster_id]
        share = running / total if total else 0.0
        pareto.append((index / len(ordered), share))
    return ModuleAttribution(
        maliciousness(original_report, allowlist), baseline_m, scores, pareto)


# -- entity grouping -----------------------------------------------------------

@dataclass
class EntityGroup:
    network: str
    members: list
    metadata: dict
    request_count: int


def _slash24(address: str) -> Optional[str]:
    parts = address.split(".")
    if len(parts) == 4 and all(p.isdigit() and int(p) < 256 for p in parts):
        return ".".join(parts[:3]) + ".0/24"
    return None


def group_entities(entries, metadata_lookup) -> list:
    """Group tracking sources into scanning entities.

    Two addresses belong together when they share a /24 network and their
    metadata is identical. Addresses whose lookup fails stand alone with
    metadata {"status": "unknown"}.
    """
    requests_per_address: Counter = Counter()
    for entry in entries:
        requests_per_address[entry.source] += 1

    groups: dict = {}
    for address in sorted(requests_per_address):
        try:
            metadata = metadata_lookup(address)
        except Exception:
            metadata = None
        network = _slash24(address)
        if metadata is None or network is None:
            key = ("unknown", address)
            metadata = {"status": "unknown"}
        else:
            key = (network, tuple(sorted(metadata.items())))
        bucket = groups.setdefault(key, {"network": network or address,
                                         "metadata": metadata, "members": []})
        bucket["members"].append(address)

    out = [EntityGroup(g["network"], g["members"], g["metadata"],
                       sum(requests_per_address[a] for a in g["members"]))
           for g in groups.values()]
    out.sort(key=lambda g: (-g.request_count, g.network))
    return out


# -- CSV exports ---------------------------------------------------------------

def flips_csv(records) -> str:
    counts = count_flips(records)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["engine", "transform", "kind", "count"])
    for (engine, transform, kind), n in sorted(counts.items()):
        writer.writerow([engine, transform, kind, n])
    return buf.getvalue()


def rates_csv(rates) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["engine", "transform", "pfr", "nfr",
                     "malware_labels", "non_malware_labels",
                     "positive_flips", "negative_flips", "note"])
    for r in rates:
        note = "; ".join(filter(None, (r.pfr_reason, r.nfr_reason)))
        writer.writerow([r.engine, r.transform,
                         "" if r.pfr is None else "%.6f" % r.pfr,
                         "" if r.nfr is None else "%.6f" % r.nfr,
                         r.malware_labels, r.non_malware_labels,
                         r.positive_flips, r.negative_flips, note])
    return buf.getvalue()


def histogram_csv(rows_by_tag: dict) -> str:
    """``rows_by_tag``: corpus tag -> [(m, count)]."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["corpus", "maliciousness", "apps"])
    for tag, rows in rows_by_tag.items():
        for m, count in rows:
            writer.writerow([tag, m, count])
    return buf.getvalue()


def modules_csv(app_sha256: str, attribution: ModuleAttribution) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["app_sha256", "cluster_id", "score", "share",
                     "cumulative_share", "original_m", "baseline_m"])
    total = sum(attribution.scores.values())
    running = 0
    for cluster_id in sorted(attribution.scores,
                             key=lambda c: (-attribution.scores[c], c)):
        score = attribution.scores[cluster_id]
        running += score
        writer.writerow([app_sha256, cluster_id, score,
                         "%.6f" % (score / total if total else 0.0),
                         "%.6f" % (running / total if total else 0.0),
                         attribution.original_m, attribution.baseline_m])
    return buf.getvalue()


def entities_csv(groups) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["network", "members", "requests", "metadata"])
    for g in groups:
        meta = ";".join("%s=%s" % kv for kv in sorted(g.metadata.items()))
        writer.writerow([g.network, " ".join(g.members), g.request_count, meta])
    return buf.getvalue()
