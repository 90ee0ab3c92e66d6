"""Sweep harness: DAR size x count x method grid, white-box crafting on a source
model, black-box transfer to the others, full-image PGD comparison and
table aggregation.

"Decrease" is always measured in absolute probability points of the true
class. A row's average decrease is (mean over models of the mean original
confidence) - (mean over models of the mean adversarial confidence).
"""

import json
import logging
import multiprocessing
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np
from scipy import stats

from dar_forge.attacks import AttackConfig, derive_seed, pgd
from dar_forge.autodiff import forward
from dar_forge.dar import CANONICAL_COUNTS, CANONICAL_SIZES, DarConfig, craft_dar, disk_mask, saliency_map
from dar_forge.data import subset_indices
from dar_forge.errors import DarForgeError, RejectedInputError

log = logging.getLogger(__name__)

SOA_METHOD = "soa"
RECORD_FIELDS = ("image_id", "model", "method", "size", "count", "epsilon", "centers",
                 "orig_conf", "adv_conf", "decrease", "is_white_box")
CSV_COLUMNS = ("size", "count", "method", "model", "mean_adv_conf", "ave_decrease", "is_white_box")


@dataclass(frozen=True)
class SweepConfig:
    sizes: tuple = CANONICAL_SIZES
    counts: tuple = CANONICAL_COUNTS
    methods: tuple = ("pgd", "uap")
    source_model: str = "dar_small"
    eval_models: tuple = ("dar_small", "dar_medium", "dar_large")
    image_count: int = 100
    global_seed: int = 0
    epsilon: float = 0.25
    alpha: float = None
    steps: int = 40
    smooth_kernel: int = 3
    smooth_every: int = 1
    color_gains: tuple = (1.0, 1.0, 1.0)
    soa_epsilon: float = None
    min_confidence: float = 0.5

    def __post_init__(self):
        if self.source_model not in self.eval_models:
            raise RejectedInputError(f"source model {self.source_model!r} must be one of the eval models")
        if self.image_count < 1:
            raise RejectedInputError("image_count must be >= 1")
        if self.soa_epsilon is None:
            object.__setattr__(self, "soa_epsilon", self.epsilon)

    def dar_config(self, size, count, method, seed):
        return DarConfig(size=size, count=count, method=method, epsilon=self.epsilon, alpha=self.alpha,
                         steps=self.steps, smooth_kernel=self.smooth_kernel, smooth_every=self.smooth_every,
                         color_gains=self.color_gains, seed=seed)

    def grid(self):
        return [(s, n, m) for m in self.methods for s in self.sizes for n in self.counts]


@dataclass(frozen=True)
class SweepRecord:
    image_id: int
    model: str
    method: str
    size: int
    count: int
    epsilon: float
    centers: tuple
    orig_conf: float
    adv_conf: float
    decrease: float
    is_white_box: bool

    def to_json(self):
        d = {f: getattr(self, f) for f in RECORD_FIELDS}
        d["centers"] = [list(c) for c in self.centers]
        return json.dumps(d, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        missing = [f for f in RECORD_FIELDS if f not in d]
        if missing:
            raise RejectedInputError(f"record lacks fields {missing}")
        d["centers"] = tuple(tuple(c) for c in d["centers"])
        return cls(**{f: d[f] for f in RECORD_FIELDS})


def make_record(image_id, model, method, size, count, epsilon, centers, orig, adv, source):
    return SweepRecord(int(image_id), model, method, int(size), int(count), float(epsilon),
                       tuple(tuple(int(v) for v in c) for c in centers),
                       float(orig), float(adv), float(orig) - float(adv), model == source)


@dataclass
class SweepRun:
    records: list
    skipped: list = field(default_factory=list)
    image_ids: list = field(default_factory=list)


def select_images(cfg, source, dataset):
    """Ids of the first ``image_count`` images (in seeded stratified order) that the
    source model classifies correctly with confidence >= ``cfg.min_confidence``."""
    chosen = []
    for i in subset_indices(dataset.labels, len(dataset), cfg.global_seed):
        probs = forward(source, dataset.images[i])
        label = dataset.labels[i]
        if int(np.argmax(probs)) == label and probs[label] >= cfg.min_confidence:
            chosen.append(i)
            if len(chosen) == cfg.image_count:
                break
    return chosen


def _image_work(cfg, models, image_id, image, label):
    """All records for one image: every grid cell plus the full-image comparator."""
    source = models[cfg.source_model]
    orig = {name: float(forward(models[name], image)[label]) for name in cfg.eval_models}
    records, skipped = [], []
    saliencies = {}
    for size, count, method in cfg.grid():
        try:
            if size not in saliencies:
                saliencies[size] = saliency_map(source, image, label, size, cfg.epsilon)
            dcfg = cfg.dar_config(size, count, method, derive_seed(cfg.global_seed, image_id, size, count, method))
            result = craft_dar(source, image, label, dcfg, saliency=saliencies[size])
            adv = result.attack.adversarial
            for name in cfg.eval_models:
                conf = forward(models[name], adv)[label]
                records.append(make_record(image_id, name, method, size, count, cfg.epsilon,
                                           result.regions.centers, orig[name], conf, cfg.source_model))
        except (DarForgeError, ArithmeticError, ValueError) as exc:
            skipped.append({"image_id": image_id, "size": size, "count": count, "method": method,
                            "error": str(exc)})
    try:
        acfg = AttackConfig(epsilon=cfg.soa_epsilon, alpha=cfg.soa_epsilon / 4, steps=cfg.steps)
        adv = pgd(source, image, label, acfg).adversarial
        for name in cfg.eval_models:
            conf = forward(models[name], adv)[label]
            records.append(make_record(image_id, name, SOA_METHOD, 0, 0, cfg.soa_epsilon, (),
                                       orig[name], conf, cfg.source_model))
    except (DarForgeError, ArithmeticError, ValueError) as exc:
        skipped.append({"image_id": image_id, "size": 0, "count": 0, "method": SOA_METHOD, "error": str(exc)})
    return records, skipped


_WORKER = {}


def _init_worker(cfg, models, dataset):
    _WORKER.update(cfg=cfg, models=models, dataset=dataset)


def _run_item(image_id):
    ds = _WORKER["dataset"]
    return _image_work(_WORKER["cfg"], _WORKER["models"], image_id, ds.images[image_id], ds.labels[image_id])


def run_sweep(cfg, models, dataset, jobs=1):
    """Craft on the source model, evaluate on every eval model, for every image and grid cell.

    Per-item failures are recorded in ``skipped`` and do not abort the sweep;
    a sweep that produces no records at all raises. Results are ordered by
    image then grid cell regardless of ``jobs``.
    """
    missing = [m for m in cfg.eval_models if m not in models]
    if missing:
        raise RejectedInputError(f"models missing for {missing}")
    if len(dataset) == 0:
        raise RejectedInputError("empty dataset")
    image_ids = select_images(cfg, models[cfg.source_model], dataset)
    log.info("sweep over %d images, %d grid cells", len(image_ids), len(cfg.grid()))
    if jobs > 1:
        with multiprocessing.Pool(jobs, initializer=_init_worker, initargs=(cfg, models, dataset)) as pool:
            outputs = list(pool.imap(_run_item, image_ids, chunksize=1))
    else:
        outputs = [_image_work(cfg, models, i, dataset.images[i], dataset.labels[i]) for i in image_ids]
    records = [r for recs, _ in outputs for r in recs]
    skipped = [s for _, sk in outputs for s in sk]
    if not records:
        raise DarForgeError(f"sweep produced no records ({len(skipped)} items failed)")
    return SweepRun(records, skipped, image_ids)


@dataclass
class ReportRow:
    method: str
    size: int
    count: int
    adv_means: dict
    orig_means: dict
    ave_decrease: float
    std_decrease: float
    n_images: int


@dataclass
class SweepReport:
    rows: list
    models: list
    source_model: str
    soa: dict = None
    metadata: dict = field(default_factory=dict)

    def row(self, method, size, count):
        for r in self.rows:
            if (r.method, r.size, r.count) == (method, size, count):
                return r
        raise KeyError((method, size, count))


def _row(method, size, count, recs, models):
    adv = {m: float(np.mean([r.adv_conf for r in recs if r.model == m])) for m in models}
    orig = {m: float(np.mean([r.orig_conf for r in recs if r.model == m])) for m in models}
    ave = float(np.mean(list(orig.values())) - np.mean(list(adv.values())))
    per_image = {}
    for r in recs:
        per_image.setdefault(r.image_id, []).append(r.decrease)
    image_means = [float(np.mean(v)) for v in per_image.values()]
    return ReportRow(method, size, count, adv, orig, ave, float(np.std(image_means)), len(per_image))


def aggregate(records, metadata=None):
    """Table-style aggregation of sweep records, keyed by (method, size, count)."""
    records = list(records)
    if not records:
        raise RejectedInputError("cannot aggregate zero records")
    models = list(dict.fromkeys(r.model for r in records))
    sources = {r.model for r in records if r.is_white_box}
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.size, r.count), []).append(r)
    method_order = list(dict.fromkeys(r.method for r in records if r.method != SOA_METHOD))
    keys = sorted((k for k in groups if k[0] != SOA_METHOD),
                  key=lambda k: (method_order.index(k[0]), k[1], k[2]))
    rows = [_row(*k, groups[k], models) for k in keys]
    soa = None
    soa_keys = [k for k in groups if k[0] == SOA_METHOD]
    if soa_keys:
        soa_row = _row(SOA_METHOD, 0, 0, groups[soa_keys[0]], models)
        dar_rows = [r for r in rows if r.method == "pgd"] or rows
        best = max(dar_rows, key=lambda r: (r.ave_decrease, -r.size, -r.count)) if dar_rows else None
        soa = {
            "epsilon": groups[soa_keys[0]][0].epsilon,
            "row": soa_row,
            "best_dar": best,
            "gap": None if best is None else best.ave_decrease - soa_row.ave_decrease,
        }
    return SweepReport(rows, models, next(iter(sources), None), soa, dict(metadata or {}))


def fmt3(x):
    """Three decimals, round-half-even on the shortest decimal repr of ``x``."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def emit_csv(report):
    lines = [",".join(CSV_COLUMNS)]
    rows = list(report.rows)
    if report.soa:
        rows.append(report.soa["row"])
    for r in rows:
        for m in report.models:
            lines.append(",".join([str(r.size), str(r.count), r.method, m, fmt3(r.adv_means[m]),
                                   fmt3(r.ave_decrease), str(m == report.source_model).lower()]))
    return ("\n".join(lines) + "\n").encode("utf-8")


def emit_markdown(report):
    models = report.models
    out = []
    for method in dict.fromkeys(r.method for r in report.rows):
        out.append(f"## DAR {method.upper()}")
        out.append("")
        out.append("| Size | Number | " + " | ".join(models) + " | Ave. decrease | Std. decrease |")
        out.append("|" + "---|" * (len(models) + 4))
        for r in report.rows:
            if r.method != method:
                continue
            cells = [str(r.size), str(r.count)] + [fmt3(r.adv_means[m]) for m in models]
            cells += [fmt3(r.ave_decrease), fmt3(r.std_decrease)]
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    if report.soa:
        soa, best = report.soa["row"], report.soa["best_dar"]
        out.append("## Full-image PGD comparison")
        out.append("")
        out.append("| Attack | " + " | ".join(models) + " | Ave. decrease |")
        out.append("|" + "---|" * (len(models) + 2))
        out.append("| Original | " + " | ".join(fmt3(soa.orig_means[m]) for m in models) + " | 0.000 |")
        out.append(f"| Full-image PGD (eps={fmt3(report.soa['epsilon'])}) | "
                   + " | ".join(fmt3(soa.adv_means[m]) for m in models) + f" | {fmt3(soa.ave_decrease)} |")
        if best is not None:
            out.append(f"| Best DAR (s={best.size}, n={best.count}) | "
                       + " | ".join(fmt3(best.adv_means[m]) for m in models) + f" | {fmt3(best.ave_decrease)} |")
            out.append("")
            out.append(f"Gap, best DAR minus full-image PGD: {fmt3(report.soa['gap'])}")
        out.append("")
    out.append(f"White-box source model: {report.source_model}")
    return ("\n".join(out) + "\n").encode("utf-8")


def write_records(records):
    return ("".join(r.to_json() + "\n" for r in records)).encode("utf-8")


def read_records(data):
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    return [SweepRecord.from_json(line) for line in text.splitlines() if line.strip()]


def transfer_sign_test(records, model, method="pgd"):
    """One-sided sign test that per-image mean decrease on ``model`` is positive.

    Returns ``(positives, negatives, p_value)``; zero differences are dropped.
    """
    per_image = {}
    for r in records:
        if r.model == model and r.method == method:
            per_image.setdefault(r.image_id, []).append(r.decrease)
    diffs = [float(np.mean(v)) for v in per_image.values()]
    pos = sum(d > 0 for d in diffs)
    neg = sum(d < 0 for d in diffs)
    if pos + neg == 0:
        return 0, 0, 1.0
    return pos, neg, float(stats.binomtest(pos, pos + neg, 0.5, alternative="greater").pvalue)


def footprint(size, count):
    """Pixels covered by ``count`` disjoint interior disks of diameter ``size``."""
    r = size // 2
    return count * int(disk_mask(r, r, size, (2 * r + 1, 2 * r + 1)).sum())


def footprint_correlation(report, method="pgd"):
    """Spearman rho between region footprint and average decrease over the grid."""
    rows = [r for r in report.rows if r.method == method]
    area = [footprint(r.size, r.count) for r in rows]
    dec = [r.ave_decrease for r in rows]
    return float(stats.spearmanr(area, dec).statistic)


def method_mean_decrease(records, method):
    """Average decrease (as in the table) pooled over every grid cell of ``method``."""
    recs = [r for r in records if r.method == method]
    if not recs:
        raise RejectedInputError(f"no records for method {method!r}")
    return _row(method, 0, 0, recs, list(dict.fromkeys(r.model for r in recs))).ave_decrease
