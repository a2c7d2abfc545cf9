"""ISO/IEC 30107-3 style error rates over classifier score sets.

Score polarity is fixed throughout: higher score means bonafide, and a
sample is accepted as bonafide iff score >= threshold. Thresholds are
always taken from finite candidate grids built out of the observed
scores, so every metric here matches an exhaustive sweep exactly and is
reproducible bit for bit.
"""

import csv
from dataclasses import dataclass, field

from .errors import ArgumentError, FormatError, MetricError, VitPadIOError

EER_SENTINEL_DELTA = 1e-6


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    label: str  # bonafide | attack
    attack_type: str  # "none" for bonafide
    score: float


class ScoreSet:
    """Immutable list of per-sample scores with class/type accessors."""

    def __init__(self, records):
        self.records = list(records)
        for r in self.records:
            if r.label not in ("bonafide", "attack"):
                raise FormatError(f"score record '{r.sample_id}': bad label '{r.label}'")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def bonafide_scores(self):
        return [r.score for r in self.records if r.label == "bonafide"]

    def attack_scores(self):
        return [r.score for r in self.records if r.label == "attack"]

    def attack_scores_by_type(self):
        out = {}
        for r in self.records:
            if r.label == "attack":
                out.setdefault(r.attack_type, []).append(r.score)
        return out

    def all_scores(self):
        return [r.score for r in self.records]


def write_scores_csv(scores: ScoreSet, path) -> None:
    """Score file: header sample_id,label,attack_type,score; 9 significant digits."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "label", "attack_type", "score"])
            for r in scores:
                writer.writerow([r.sample_id, r.label, r.attack_type, f"{r.score:.9g}"])
    except OSError as exc:
        raise VitPadIOError(f"cannot write score file {path}: {exc}") from exc


def read_scores_csv(path) -> ScoreSet:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise VitPadIOError(f"cannot read score file {path}: {exc}") from exc
    if not rows or rows[0] != ["sample_id", "label", "attack_type", "score"]:
        raise FormatError(f"{path}: first row must be the header sample_id,label,attack_type,score")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields")
        try:
            score = float(row[3])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: score must be numeric") from None
        records.append(ScoreRecord(row[0], row[1], row[2], score))
    return ScoreSet(records)


@dataclass
class MetricsReport:
    """Error rates at one operating point; all rates are fractions in [0, 1]."""

    threshold: float
    bpcer: float = None
    apcer_per_type: dict = field(default_factory=dict)
    apcer_max: float = None
    apcer_pooled: float = None
    acer: float = None
    eer: float = None
    hter: float = None
    note: str = None


def _bpcer(bonafide, tau):
    return sum(1 for s in bonafide if s < tau) / len(bonafide)


def _far(attacks, tau):
    return sum(1 for s in attacks if s >= tau) / len(attacks)


def threshold_at_bpcer(dev: ScoreSet, target: float) -> float:
    """Largest candidate threshold (unique dev scores plus 0) whose dev BPCER
    stays at or below the target; 0 when none qualifies."""
    if not (0.0 < target < 1.0):
        raise ArgumentError(f"target BPCER must be in (0,1), got {target}")
    bonafide = dev.bonafide_scores()
    if not bonafide:
        raise MetricError("threshold_at_bpcer: dev set has no bonafide samples")
    best = 0.0
    for tau in sorted(set(dev.all_scores()) | {0.0}):
        if _bpcer(bonafide, tau) <= target:
            best = tau  # candidates ascend, so the last qualifying one is largest
    return best


def eer(dev: ScoreSet):
    """Equal-error operating point: (threshold, EER value).

    Candidates are midpoints of consecutive sorted unique scores plus one
    sentinel below and above all scores; ties break to the smallest
    threshold; the value is (FAR+FRR)/2 there.
    """
    bonafide = dev.bonafide_scores()
    attacks = dev.attack_scores()
    if not bonafide or not attacks:
        raise MetricError("eer: needs at least one bonafide and one attack score")
    uniq = sorted(set(dev.all_scores()))
    candidates = [uniq[0] - EER_SENTINEL_DELTA]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    candidates += [uniq[-1] + EER_SENTINEL_DELTA]

    best_tau, best_gap, best_value = None, None, None
    for tau in candidates:
        far = _far(attacks, tau)
        frr = _bpcer(bonafide, tau)
        gap = abs(far - frr)
        if best_gap is None or gap < best_gap:
            best_tau, best_gap, best_value = tau, gap, (far + frr) / 2.0
    return best_tau, best_value


def evaluate_at(eval_set: ScoreSet, tau: float) -> MetricsReport:
    """Error rates on an eval set at a fixed threshold.

    APCER comes per attack type, as the max over types, and pooled over
    all attacks; ACER averages the pooled APCER with BPCER. Whichever
    class is absent leaves its rates (and ACER) unset, with a note.
    """
    if len(eval_set) == 0:
        raise MetricError("evaluate_at: eval set is empty")
    report = MetricsReport(threshold=float(tau))
    bonafide = eval_set.bonafide_scores()
    by_type = eval_set.attack_scores_by_type()
    attacks = eval_set.attack_scores()

    if bonafide:
        report.bpcer = _bpcer(bonafide, tau)
    if attacks:
        report.apcer_per_type = {t: _far(scores, tau) for t, scores in sorted(by_type.items())}
        report.apcer_max = max(report.apcer_per_type.values())
        report.apcer_pooled = _far(attacks, tau)

    if not attacks:
        report.note = "no attack samples in eval set; APCER and ACER unavailable"
    elif not bonafide:
        report.note = "no bonafide samples in eval set; BPCER and ACER unavailable"
    else:
        report.acer = (report.apcer_pooled + report.bpcer) / 2.0
    return report


def hter(eval_set: ScoreSet, tau: float) -> float:
    """Half total error rate (FRR+FAR)/2 at a threshold fixed elsewhere
    (conventionally the dev-set equal-error threshold)."""
    bonafide = eval_set.bonafide_scores()
    attacks = eval_set.attack_scores()
    if not bonafide or not attacks:
        raise MetricError("hter: needs at least one bonafide and one attack score")
    return (_bpcer(bonafide, tau) + _far(attacks, tau)) / 2.0


def video_score(frame_scores) -> float:
    """Aggregate frame scores to one video score: arithmetic mean."""
    frame_scores = list(frame_scores)
    if not frame_scores:
        raise ArgumentError("video_score: empty frame score list")
    return sum(frame_scores) / len(frame_scores)


def aggregate_by_video(scores: ScoreSet, separator: str = "_f") -> ScoreSet:
    """Mean-pool frame records sharing the sample_id prefix before the last
    ``separator`` occurrence; label/type must agree within a group."""
    groups = {}
    order = []
    for r in scores:
        head, sep, _ = r.sample_id.rpartition(separator)
        key = head if sep else r.sample_id
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r)
    records = []
    for key in order:
        members = groups[key]
        labels = {m.label for m in members}
        types = {m.attack_type for m in members}
        if len(labels) > 1 or len(types) > 1:
            raise ArgumentError(f"video group '{key}' mixes labels or attack types")
        records.append(ScoreRecord(key, members[0].label, members[0].attack_type,
                                   video_score([m.score for m in members])))
    return ScoreSet(records)


# -- report output ------------------------------------------------------------

def _pct(rate: float) -> str:
    return f"{rate * 100.0:.2f}"


def format_metrics_text(report: MetricsReport) -> str:
    """Plain-text table; rates as percentages with two decimals."""
    lines = ["metric                 value", "-" * 29]
    lines.append(f"{'threshold':<22} {report.threshold:.9g}")
    if report.bpcer is not None:
        lines.append(f"{'bpcer (%)':<22} {_pct(report.bpcer)}")
    for attack_type, rate in report.apcer_per_type.items():
        lines.append(f"{'apcer[' + attack_type + '] (%)':<22} {_pct(rate)}")
    if report.apcer_max is not None:
        lines.append(f"{'apcer_max (%)':<22} {_pct(report.apcer_max)}")
    if report.apcer_pooled is not None:
        lines.append(f"{'apcer_pooled (%)':<22} {_pct(report.apcer_pooled)}")
    if report.acer is not None:
        lines.append(f"{'acer (%)':<22} {_pct(report.acer)}")
    if report.eer is not None:
        lines.append(f"{'eer (%)':<22} {_pct(report.eer)}")
    if report.hter is not None:
        lines.append(f"{'hter (%)':<22} {_pct(report.hter)}")
    if report.note:
        lines.append(f"note: {report.note}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(report: MetricsReport, path) -> None:
    """Machine-readable metric,value rows; rates as percentages with two decimals."""
    rows = [("threshold", f"{report.threshold:.9g}")]
    if report.bpcer is not None:
        rows.append(("bpcer", _pct(report.bpcer)))
    for attack_type, rate in report.apcer_per_type.items():
        rows.append((f"apcer[{attack_type}]", _pct(rate)))
    if report.apcer_max is not None:
        rows.append(("apcer_max", _pct(report.apcer_max)))
    if report.apcer_pooled is not None:
        rows.append(("apcer_pooled", _pct(report.apcer_pooled)))
    if report.acer is not None:
        rows.append(("acer", _pct(report.acer)))
    if report.eer is not None:
        rows.append(("eer", _pct(report.eer)))
    if report.hter is not None:
        rows.append(("hter", _pct(report.hter)))
    if report.note:
        rows.append(("note", report.note))
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerows(rows)
    except OSError as exc:
        raise VitPadIOError(f"cannot write metrics file {path}: {exc}") from exc
