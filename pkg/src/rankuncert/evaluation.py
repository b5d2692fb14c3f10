"""Retrieval evaluation: deterministic ranking and recall reports.

Deployment semantics: only the combined query feature and the raw target
features participate; nothing here touches augmenter state. Cosine ties are
broken by ascending gallery id so ranks are reproducible across runs and
platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Gallery:
    ids: list
    features: np.ndarray  # (G, d)

    def __post_init__(self):
        if len(self.ids) != self.features.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids for {self.features.shape[0]} rows")
        if self.features.shape[0] == 0:
            raise ValueError("gallery is empty")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        feats = self.features.astype(np.float64)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        bad = np.nonzero(norms[:, 0] < 1e-12)[0]
        if bad.size:
            raise ValueError(
                f"zero-norm gallery rows: {[self.ids[i] for i in bad[:8]]}")
        self.unit = feats / norms
        self.id_array = np.asarray(self.ids)
        self.index = {g: i for i, g in enumerate(self.ids)}


@dataclass
class Query:
    id: str
    combined_feature: np.ndarray
    target_id: str
    subset_ids: list | None = None


@dataclass
class RecallReport:
    ks: list
    recalls: dict                      # K -> fraction in [0, 1]
    per_category: dict | None = None   # category -> {K -> fraction}
    subset_ks: list | None = None
    subset_recalls: dict | None = None
    overall: float | None = None       # (R@5 + R_subset@1) / 2 when defined

    def to_json_dict(self) -> dict:
        out = {"ks": list(self.ks),
               "recalls": {str(k): v for k, v in self.recalls.items()}}
        if self.per_category is not None:
            out["per_category"] = {
                c: {str(k): v for k, v in r.items()}
                for c, r in self.per_category.items()}
        if self.subset_recalls is not None:
            out["subset_ks"] = list(self.subset_ks)
            out["subset_recalls"] = {str(k): v
                                     for k, v in self.subset_recalls.items()}
        if self.overall is not None:
            out["overall"] = self.overall
        return out


def _query_sims(q: Query, gallery: Gallery) -> np.ndarray:
    f = np.asarray(q.combined_feature, dtype=np.float64)
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ValueError(f"query {q.id!r} has a zero-norm feature")
    return gallery.unit @ (f / norm)


def rank_gallery(q: Query, gallery: Gallery) -> list:
    """All gallery ids, best match first; equal scores ordered by id."""
    sims = _query_sims(q, gallery)
    order = np.lexsort((gallery.id_array, -sims))
    return gallery.id_array[order].tolist()


def _target_rank(sims: np.ndarray, ids: np.ndarray, target_id: str,
                 target_pos: int) -> int:
    """0-based rank of the target under descending-sim, ascending-id order."""
    s_t = sims[target_pos]
    better = np.count_nonzero(sims > s_t)
    tied_before = np.count_nonzero((sims == s_t) & (ids < target_id))
    return better + tied_before


def _check_ks(ks, limit: int, what: str) -> list:
    ks = [int(k) for k in ks]
    if not ks:
        raise ValueError(f"no K values given for {what}")
    for k in ks:
        if k < 1:
            raise ValueError(f"K must be positive, got {k}")
        if k > limit:
            raise ValueError(f"K={k} exceeds {what} size {limit}")
    return ks


def recall_at_k(queries, gallery: Gallery, ks) -> RecallReport:
    """Fraction of queries whose target lands in the top K, per K."""
    ks = _check_ks(ks, gallery.features.shape[0], "gallery")
    if not queries:
        raise ValueError("no queries")
    hits = {k: 0 for k in ks}
    for q in queries:
        pos = gallery.index.get(q.target_id)
        if pos is None:
            raise ValueError(f"query {q.id!r}: target {q.target_id!r} "
                             f"not in gallery")
        sims = _query_sims(q, gallery)
        rank = _target_rank(sims, gallery.id_array, q.target_id, pos)
        for k in ks:
            hits[k] += rank < k
    return RecallReport(ks, {k: hits[k] / len(queries) for k in ks})


def recall_subset_at_k(queries, gallery: Gallery, ks) -> RecallReport:
    """Recall after restricting each query's ranking to its candidate subset."""
    ks = [int(k) for k in ks]
    if not queries:
        raise ValueError("no queries")
    hits = {k: 0 for k in ks}
    for q in queries:
        if not q.subset_ids:
            raise ValueError(f"query {q.id!r} carries no subset_ids")
        if q.target_id not in q.subset_ids:
            raise ValueError(f"query {q.id!r}: target outside its subset")
        try:
            rows = [gallery.index[s] for s in q.subset_ids]
        except KeyError as e:
            raise ValueError(
                f"query {q.id!r}: subset id {e} not in gallery") from None
        _check_ks(ks, len(rows), f"query {q.id!r} subset")
        sims = _query_sims(q, gallery)[rows]
        ids = gallery.id_array[rows]
        pos = int(np.nonzero(ids == q.target_id)[0][0])
        rank = _target_rank(sims, ids, q.target_id, pos)
        for k in ks:
            hits[k] += rank < k
    return RecallReport(ks, {k: hits[k] / len(queries) for k in ks},
                        subset_ks=ks)


def category_average(reports: dict) -> RecallReport:
    """Unweighted mean of per-category recalls at each K."""
    if not reports:
        raise ValueError("no category reports")
    cats = sorted(reports)
    ks = reports[cats[0]].ks
    for c in cats:
        if reports[c].ks != ks:
            raise ValueError(f"category {c!r} reports different K values")
    means = {k: float(np.mean([reports[c].recalls[k] for c in cats])) for k in ks}
    return RecallReport(ks, means,
                        per_category={c: dict(reports[c].recalls) for c in cats})


def overall_score(r_at_5: float, r_subset_at_1: float) -> float:
    """Headline composite: mean of R@5 and the subset R@1."""
    return (r_at_5 + r_subset_at_1) / 2.0


def evaluate(queries, gallery: Gallery, ks, subset_ks=None) -> RecallReport:
    """Full report: plain recalls, optional subset recalls, composite score."""
    report = recall_at_k(queries, gallery, ks)
    if subset_ks:
        sub = recall_subset_at_k(queries, gallery, subset_ks)
        report.subset_ks = sub.ks
        report.subset_recalls = sub.recalls
        if 5 in report.recalls and 1 in sub.recalls:
            report.overall = overall_score(report.recalls[5], sub.recalls[1])
    return report


def render_table(report: RecallReport) -> str:
    """Percentages at two decimals, one metric per column."""
    cols = [f"R@{k}" for k in report.ks]
    vals = [f"{100 * report.recalls[k]:.2f}" for k in report.ks]
    if report.subset_recalls:
        cols += [f"Rsub@{k}" for k in report.subset_ks]
        vals += [f"{100 * report.subset_recalls[k]:.2f}" for k in report.subset_ks]
    if report.overall is not None:
        cols.append("overall")
        vals.append(f"{100 * report.overall:.2f}")
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    lines = [head, body]
    if report.per_category:
        for cat in sorted(report.per_category):
            row = [f"{100 * report.per_category[cat][k]:.2f}" for k in report.ks]
            lines.append(f"{cat}: " + "  ".join(row))
    return "\n".join(lines)
