"""Retrieval evaluation and the packaged experiment suites.

Metrics follow the standard single-shot protocol: cosine distance,
CMC curve, Rank-1, and mAP with AP = (1/R) * sum over match ranks k of
(matches at or before k) / k. Ranking ties break toward the lower
gallery index (stable sort). Queries with no relevant gallery entry are
skipped and counted, not errors.

Suites train all three strategies over several seeds on committed
presets and check the directional claims: per-stream laziness on clean
data, weak-modality rescue under concat fusion, the independent-vs-joint
ensemble direction, and train-vs-test laziness diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import FUSED_SELECTOR, ModelParams, embed_dataset
from .numerics import Matrix, Rng, as_matrix, matmul
from .objectives import Strategy
from .pipeline import TrainConfig, RunRecord, train
from .synthdata import (
    SPLIT_GALLERY,
    MultimodalDataset,
    SynthConfig,
    WEAK_STREAM,
    clean_preset,
    ensemble_base_preset,
    generate,
    replicate_modality,
    split_query_gallery,
    weak_link_preset,
)

SUITE_NAMES = ("laziness-clean", "weak-link", "ensemble", "train-vs-test")

# Committed training length per suite. The ensemble suite separates
# independent from joint members only deep into the overfitting regime,
# so it trains longer than the laziness suites.
SUITE_EPOCHS = {
    "laziness-clean": 60,
    "weak-link": 60,
    "ensemble": 120,
    "train-vs-test": 60,
}

ALL_STRATEGIES = (Strategy.UNICAT, Strategy.FUSION_AVG, Strategy.FUSION_CONCAT)


def suite_epochs(suite: str, override: Optional[int] = None) -> int:
    """The epoch count a suite runs at: its committed length unless overridden."""
    if suite not in SUITE_EPOCHS:
        raise ConfigError(f"unknown suite {suite!r}; expected one of: {', '.join(SUITE_NAMES)}")
    return SUITE_EPOCHS[suite] if override is None else int(override)


@dataclass
class EmbeddingSet:
    features: Matrix
    ids: np.ndarray
    view_ids: np.ndarray
    tag: str  # query | gallery | train

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.ids.shape != (n,) or self.view_ids.shape != (n,):
            raise ShapeError(
                f"embedding set misaligned: {self.features.shape} features, "
                f"{self.ids.shape} ids, {self.view_ids.shape} views"
            )
        norms = np.sqrt(np.sum(self.features * self.features, axis=1))
        if np.any(norms == 0):
            raise DataError(f"{self.tag} embeddings contain a zero-norm row")


@dataclass
class RetrievalReport:
    """cmc is indexed by rank: cmc[k] is the rank-k match rate for
    k in 1..max_rank; cmc[0] is unused and fixed at 0. per_query_ap
    holds NaN at skipped queries (no relevant gallery entries)."""

    map: float
    cmc: np.ndarray
    rank1: float
    per_query_ap: np.ndarray
    num_skipped_queries: int


def _features_of(x) -> Matrix:
    return x.features if hasattr(x, "features") else as_matrix(x, "embeddings")


def cosine_distance(q, g) -> Matrix:
    """D[i, j] = 1 - <q_i, g_j> / (||q_i|| ||g_j||), clipped to [0, 2]."""
    qf = _features_of(q)
    gf = _features_of(g)
    if qf.shape[1] != gf.shape[1]:
        raise ShapeError(f"feature dims differ: query {qf.shape[1]} vs gallery {gf.shape[1]}")
    for name, f in (("query", qf), ("gallery", gf)):
        norms = np.sqrt(np.sum(f * f, axis=1))
        if np.any(norms == 0):
            raise DataError(f"{name} embeddings contain a zero-norm row; cosine undefined")
    qn = qf / np.sqrt(np.sum(qf * qf, axis=1))[:, None]
    gn = gf / np.sqrt(np.sum(gf * gf, axis=1))[:, None]
    d = 1.0 - matmul(qn, gn.T)
    return np.clip(d, 0.0, 2.0, out=d)


def cmc_map(
    d: Matrix,
    q_ids: np.ndarray,
    g_ids: np.ndarray,
    q_views: Optional[np.ndarray] = None,
    g_views: Optional[np.ndarray] = None,
    exclude_same_view: bool = False,
    max_rank: int = 50,
) -> RetrievalReport:
    """CMC and mAP from a query x gallery distance matrix.

    Per query the gallery is ranked ascending by distance with ties
    going to the lower gallery index. With exclude_same_view, gallery
    entries sharing both the query's id and view are dropped before
    scoring (the usual same-camera junk convention).
    """
    d = as_matrix(d, "distance matrix")
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    nq, ng = d.shape
    if q_ids.shape != (nq,) or g_ids.shape != (ng,):
        raise ShapeError(
            f"distance matrix {d.shape} does not match {q_ids.shape} query ids / {g_ids.shape} gallery ids"
        )
    if exclude_same_view and (q_views is None or g_views is None):
        raise ConfigError("exclude_same_view needs q_views and g_views")
    if max_rank < 1:
        raise ConfigError(f"max_rank must be >= 1, got {max_rank}")
    order = np.argsort(d, axis=1, kind="stable")
    per_query_ap = np.full(nq, np.nan)
    first_match_rank = np.zeros(nq, dtype=np.int64)  # 0 = skipped
    num_skipped = 0
    for i in range(nq):
        ranked = order[i]
        if exclude_same_view:
            junk = (g_ids[ranked] == q_ids[i]) & (g_views[ranked] == q_views[i])
            ranked = ranked[~junk]
        matches = g_ids[ranked] == q_ids[i]
        r = int(matches.sum())
        if r == 0:
            num_skipped += 1
            continue
        cum = np.cumsum(matches)
        hit = np.nonzero(matches)[0]
        per_query_ap[i] = float(np.sum(cum[hit] / (hit + 1.0)) / r)
        first_match_rank[i] = hit[0] + 1
    scored = nq - num_skipped
    if scored == 0:
        raise DataError("every query was skipped (no relevant gallery entries)")
    hist = np.zeros(max_rank + 1, dtype=np.float64)
    for rank in first_match_rank:
        if 1 <= rank <= max_rank:
            hist[rank] += 1.0
    cmc = np.cumsum(hist) / scored
    cmc[0] = 0.0
    mean_ap = float(np.sum(per_query_ap[np.isfinite(per_query_ap)]) / scored)
    return RetrievalReport(
        map=mean_ap,
        cmc=cmc,
        rank1=float(cmc[1]),
        per_query_ap=per_query_ap,
        num_skipped_queries=num_skipped,
    )


def embedding_sets(
    model: ModelParams,
    ds: MultimodalDataset,
    selector: Union[int, str],
    normalize_first: Optional[bool] = None,
) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Query and gallery EmbeddingSets for one selector."""
    q_rows = ds.query_rows
    g_rows = ds.gallery_rows
    if q_rows.size == 0 or g_rows.size == 0:
        raise DataError("dataset has an empty query or gallery split")
    sets = []
    for rows, tag in ((q_rows, "query"), (g_rows, "gallery")):
        feats = embed_dataset(model, ds, selector, rows=rows, normalize_first=normalize_first)
        sets.append(EmbeddingSet(feats, ds.ids[rows], ds.view_ids[rows], tag))
    return sets[0], sets[1]


def evaluate_sets(
    q: EmbeddingSet,
    g: EmbeddingSet,
    exclude_same_view: bool = False,
    max_rank: int = 50,
) -> RetrievalReport:
    q.validate()
    g.validate()
    d = cosine_distance(q, g)
    return cmc_map(
        d, q.ids, g.ids, q.view_ids, g.view_ids,
        exclude_same_view=exclude_same_view, max_rank=max_rank,
    )


def eval_multimodal(
    model: ModelParams,
    ds: MultimodalDataset,
    exclude_same_view: bool = False,
    max_rank: int = 50,
    normalize_first: Optional[bool] = None,
) -> RetrievalReport:
    """Retrieval with the strategy's inference rule on the test split."""
    q, g = embedding_sets(model, ds, FUSED_SELECTOR, normalize_first)
    return evaluate_sets(q, g, exclude_same_view, max_rank)


def eval_unimodal(
    model: ModelParams,
    ds: MultimodalDataset,
    stream_index: int,
    exclude_same_view: bool = False,
    max_rank: int = 50,
) -> RetrievalReport:
    """Retrieval with a single stream's post-BN feature on the test split."""
    q, g = embedding_sets(model, ds, int(stream_index))
    return evaluate_sets(q, g, exclude_same_view, max_rank)


def trainset_view(ds: MultimodalDataset, views_as_query: Optional[int] = None, seed: int = 0) -> MultimodalDataset:
    """Train rows re-cast as a query/gallery split (seeded, deterministic)."""
    rows = ds.train_rows
    if rows.size == 0:
        raise DataError("dataset has no training rows")
    sub_ids = ds.ids[rows]
    if views_as_query is None:
        counts = np.bincount(np.searchsorted(np.unique(sub_ids), sub_ids))
        views_as_query = max(1, int(counts.min()) // 4)
    sub = MultimodalDataset(
        features=[f[rows] for f in ds.features],
        ids=sub_ids,
        view_ids=ds.view_ids[rows],
        split=np.full(rows.size, SPLIT_GALLERY, dtype=np.int8),
        modality_names=list(ds.modality_names),
    )
    return split_query_gallery(sub, views_as_query, Rng(seed).split("trainset-eval"))


def eval_trainset(
    model: ModelParams,
    ds: MultimodalDataset,
    selector: Union[int, str],
    views_as_query: Optional[int] = None,
    seed: int = 0,
    exclude_same_view: bool = False,
    max_rank: int = 50,
) -> RetrievalReport:
    """Retrieval performance on the training identities themselves.

    The train rows are split into query/gallery with the same protocol
    as the test set; high values mean the feature memorizes its training
    identities (the overfitting diagnostic)."""
    tv = trainset_view(ds, views_as_query, seed)
    q, g = embedding_sets(model, tv, selector)
    return evaluate_sets(q, g, exclude_same_view, max_rank)


@dataclass(frozen=True)
class TableCell:
    map_mean: float
    map_std: float
    rank1_mean: float
    rank1_std: float


@dataclass
class ExperimentTable:
    """Mean +/- std (population, ddof=0) over seeds, keyed by
    (strategy name, evaluation target)."""

    suite: str
    num_seeds: int
    cells: dict  # (strategy, target) -> TableCell

    def strategies(self) -> list:
        seen = []
        for s, _ in self.cells:
            if s not in seen:
                seen.append(s)
        return seen

    def targets(self) -> list:
        seen = []
        for _, t in self.cells:
            if t not in seen:
                seen.append(t)
        return seen


@dataclass(frozen=True)
class ClaimResult:
    """One directional claim checked per seed; passes when it holds in
    at least 80% of seeds (4 of 5 at the committed seed count)."""

    name: str
    successes: int
    num_seeds: int
    required: int
    passed: bool
    per_seed: tuple

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} ({self.successes}/{self.num_seeds} seeds, need >= {self.required})"


def _claim(name: str, per_seed: Sequence[bool]) -> ClaimResult:
    n = len(per_seed)
    required = math.ceil(0.8 * n)
    successes = int(sum(bool(b) for b in per_seed))
    return ClaimResult(
        name=name,
        successes=successes,
        num_seeds=n,
        required=required,
        passed=successes >= required,
        per_seed=tuple(bool(b) for b in per_seed),
    )


@dataclass
class SuiteResult:
    suite: str
    seeds: tuple
    table: ExperimentTable
    claims: list
    # raw[(seed, strategy value, target)] = (mAP, rank1)
    raw: dict


def suite_train_config(strategy: Strategy, seed: int, epochs: Optional[int] = None) -> TrainConfig:
    """The committed training recipe shared by all suites."""
    e = 60 if epochs is None else int(epochs)
    return TrainConfig(
        strategy=strategy,
        p=8,
        k=4,
        lr_base=0.05,
        momentum=0.9,
        epochs=e,
        warmup_epochs=min(6, max(0, e // 2)),
        hidden_dims=(64,),
        embed_dim=32,
        seed=seed,
    )


def _suite_dataset(suite: str, seed: int) -> MultimodalDataset:
    if suite == "weak-link":
        return generate(weak_link_preset(seed))
    if suite == "ensemble":
        return replicate_modality(generate(ensemble_base_preset(seed)), 0, 2)
    return generate(clean_preset(seed))


def run_suite(
    suite: str,
    seeds: Sequence[int],
    epochs: Optional[int] = None,
    jobs: int = 1,
) -> SuiteResult:
    """Train all strategies per seed on the suite's preset and aggregate.

    jobs is accepted for interface stability; execution is sequential
    (results are defined to be independent of worker count).
    """
    if suite not in SUITE_NAMES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of: {', '.join(SUITE_NAMES)}")
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) == 0:
        raise ConfigError("run_suite needs at least one seed")
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    epochs = suite_epochs(suite, epochs)

    raw = {}
    for seed in seeds:
        ds = _suite_dataset(suite, seed)
        num_streams = ds.num_modalities
        for strategy in ALL_STRATEGIES:
            rec = train(ds, suite_train_config(strategy, seed, epochs))
            s = strategy.value
            if suite == "train-vs-test":
                for i in range(num_streams):
                    rep = eval_unimodal(rec.model, ds, i)
                    raw[(seed, s, f"mod{i}/test")] = (rep.map, rep.rank1)
                    rep = eval_trainset(rec.model, ds, i)
                    raw[(seed, s, f"mod{i}/train")] = (rep.map, rep.rank1)
                rep = eval_multimodal(rec.model, ds)
                raw[(seed, s, "multimodal/test")] = (rep.map, rep.rank1)
            else:
                for i in range(num_streams):
                    rep = eval_unimodal(rec.model, ds, i)
                    raw[(seed, s, ds.modality_names[i])] = (rep.map, rep.rank1)
                rep = eval_multimodal(rec.model, ds)
                raw[(seed, s, "multimodal")] = (rep.map, rep.rank1)

    targets = []
    for (seed, s, t) in raw:
        if t not in targets:
            targets.append(t)
    cells = {}
    for strategy in ALL_STRATEGIES:
        s = strategy.value
        for t in targets:
            maps = np.array([raw[(seed, s, t)][0] for seed in seeds])
            r1s = np.array([raw[(seed, s, t)][1] for seed in seeds])
            cells[(s, t)] = TableCell(
                map_mean=float(maps.mean()),
                map_std=float(maps.std()),
                rank1_mean=float(r1s.mean()),
                rank1_std=float(r1s.std()),
            )
    table = ExperimentTable(suite=suite, num_seeds=len(seeds), cells=cells)
    claims = _suite_claims(suite, seeds, raw)
    return SuiteResult(suite=suite, seeds=seeds, table=table, claims=claims, raw=raw)


def _suite_claims(suite: str, seeds: tuple, raw: dict) -> list:
    uni = Strategy.UNICAT.value
    favg = Strategy.FUSION_AVG.value
    fcat = Strategy.FUSION_CONCAT.value

    def m(seed, s, t):
        return raw[(seed, s, t)][0]

    claims = []
    if suite == "laziness-clean":
        streams = [t for t in _targets_of(raw) if t.startswith("mod")]
        claims.append(_claim(
            "unicat-per-stream-test-map-beats-both-fusions",
            [
                all(
                    m(seed, uni, t) > m(seed, favg, t) and m(seed, uni, t) > m(seed, fcat, t)
                    for t in streams
                )
                for seed in seeds
            ],
        ))
        claims.append(_claim(
            "unicat-multimodal-beats-its-best-unimodal",
            [
                m(seed, uni, "multimodal") > max(m(seed, uni, t) for t in streams)
                for seed in seeds
            ],
        ))
    elif suite == "weak-link":
        weak = f"mod{WEAK_STREAM}"
        claims.append(_claim(
            "fusion-concat-weak-stream-beats-unicat",
            [m(seed, fcat, weak) > m(seed, uni, weak) for seed in seeds],
        ))
    elif suite == "ensemble":
        claims.append(_claim(
            "independent-ensemble-at-least-joint",
            [
                m(seed, uni, "multimodal") >= m(seed, favg, "multimodal")
                and m(seed, uni, "multimodal") >= m(seed, fcat, "multimodal")
                for seed in seeds
            ],
        ))
    else:  # train-vs-test
        streams = sorted({t.split("/")[0] for t in _targets_of(raw) if t.startswith("mod")})
        claims.append(_claim(
            "fusion-trainset-per-stream-map-below-unicat",
            [
                all(
                    m(seed, favg, f"{t}/train") < m(seed, uni, f"{t}/train")
                    and m(seed, fcat, f"{t}/train") < m(seed, uni, f"{t}/train")
                    for t in streams
                )
                for seed in seeds
            ],
        ))
        claims.append(_claim(
            "unicat-per-stream-test-map-beats-both-fusions",
            [
                all(
                    m(seed, uni, f"{t}/test") > m(seed, favg, f"{t}/test")
                    and m(seed, uni, f"{t}/test") > m(seed, fcat, f"{t}/test")
                    for t in streams
                )
                for seed in seeds
            ],
        ))
    return claims


def _targets_of(raw: dict) -> list:
    seen = []
    for (_, _, t) in raw:
        if t not in seen:
            seen.append(t)
    return seen


def _fmt_pct(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ±{100 * std:.1f}"


def table_markdown(table: ExperimentTable) -> str:
    """Markdown layout mirroring the usual benchmark tables: one row per
    strategy, mAP and Rank-1 columns per evaluation target, percents."""
    targets = table.targets()
    header = ["Model"]
    for t in targets:
        header += [f"{t} mAP", f"{t} R1"]
    lines = [
        f"# suite: {table.suite} ({table.num_seeds} seeds, mean ±std, %)",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for s in table.strategies():
        row = [s]
        for t in targets:
            cell = table.cells[(s, t)]
            row += [_fmt_pct(cell.map_mean, cell.map_std), _fmt_pct(cell.rank1_mean, cell.rank1_std)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def table_csv(table: ExperimentTable) -> str:
    lines = ["strategy,target,map_mean,map_std,rank1_mean,rank1_std,num_seeds"]
    for (s, t), cell in table.cells.items():
        lines.append(
            f"{s},{t},{cell.map_mean!r},{cell.map_std!r},{cell.rank1_mean!r},{cell.rank1_std!r},{table.num_seeds}"
        )
    return "\n".join(lines) + "\n"


def report_csv(report: RetrievalReport, q_ids: Optional[np.ndarray] = None) -> str:
    """Report as CSV: one summary row, then one row per query."""
    lines = [
        "row_type,query_index,query_id,ap",
        f"summary,,,{report.map!r}",
        f"rank1,,,{report.rank1!r}",
        f"skipped,,,{report.num_skipped_queries}",
    ]
    for i, ap in enumerate(report.per_query_ap):
        qid = "" if q_ids is None else q_ids[i]
        lines.append(f"query,{i},{qid},{'skipped' if not np.isfinite(ap) else repr(float(ap))}")
    return "\n".join(lines) + "\n"


def report_markdown(report: RetrievalReport, title: str, max_rank_shown: int = 10) -> str:
    ranks = range(1, min(max_rank_shown, len(report.cmc) - 1) + 1)
    lines = [
        f"## {title}",
        "",
        "| metric | value (%) |",
        "|---|---|",
        f"| mAP | {100 * report.map:.2f} |",
    ]
    for k in ranks:
        lines.append(f"| Rank-{k} | {100 * report.cmc[k]:.2f} |")
    lines.append(f"| skipped queries | {report.num_skipped_queries} |")
    return "\n".join(lines) + "\n"
