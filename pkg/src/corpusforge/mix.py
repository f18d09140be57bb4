"""Stage composition: quotas, repeat factors, and distribution checks.

Repeats are stored as a per-sample ``repeat_factor`` rather than
physical duplication; every count and fraction here is an *effective*
count (samples weighted by repeat factor), which is also the unit in
which the text-only floor is measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .corpus import (
    DataSourceManifest,
    Modality,
    Sample,
    Stage,
    ValidationError,
    load_corpus,
)

DEFAULT_TEXT_ONLY_FLOOR = 0.20


@dataclass
class ConstraintResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class MixConstraints:
    text_only_floor: float = DEFAULT_TEXT_ONLY_FLOOR
    category_max_fraction: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "MixConstraints":
        return cls(
            text_only_floor=d.get("text_only_floor", DEFAULT_TEXT_ONLY_FLOOR),
            category_max_fraction=dict(d.get("category_max_fraction", {})),
        )


@dataclass
class MixReport:
    stage: Optional[Stage]
    total_effective: int
    category_counts: dict[str, int]
    category_fractions: dict[str, float]
    source_counts: dict[str, dict[str, int]]
    text_only_fraction: float
    constraints: list[ConstraintResult] = field(default_factory=list)

    def passed(self) -> bool:
        return all(c.passed for c in self.constraints)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value if self.stage else None,
            "total_effective": self.total_effective,
            "category_counts": self.category_counts,
            "category_fractions": self.category_fractions,
            "source_counts": self.source_counts,
            "text_only_fraction": self.text_only_fraction,
            "constraints": [c.to_dict() for c in self.constraints],
        }

    def render_table(self) -> str:
        lines = [f"{'category':<24}{'effective':>12}{'fraction':>10}"]
        for cat, count in self.category_counts.items():
            lines.append(f"{cat:<24}{count:>12}{self.category_fractions[cat]:>10.4f}")
        lines.append(f"{'total':<24}{self.total_effective:>12}")
        for c in self.constraints:
            lines.append(f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _aggregate(pool: Sequence[Sample], stage: Optional[Stage]) -> MixReport:
    category_counts: dict[str, int] = {}
    source_counts: dict[str, dict[str, int]] = {}
    total = 0
    text_only = 0
    for sample in pool:
        eff = sample.repeat_factor
        total += eff
        category_counts[sample.category.value] = (
            category_counts.get(sample.category.value, 0) + eff
        )
        entry = source_counts.setdefault(sample.source, {"count": 0, "effective": 0})
        entry["count"] += 1
        entry["effective"] += eff
        if sample.modality is Modality.TEXT_ONLY:
            text_only += eff
    fractions = {cat: count / total for cat, count in category_counts.items()}
    return MixReport(
        stage=stage,
        total_effective=total,
        category_counts=dict(sorted(category_counts.items())),
        category_fractions=dict(sorted(fractions.items())),
        source_counts=dict(sorted(source_counts.items())),
        text_only_fraction=text_only / total,
    )


def _evaluate_constraints(report: MixReport, constraints: MixConstraints) -> None:
    floor = constraints.text_only_floor
    report.constraints.append(
        ConstraintResult(
            name="text_only_floor",
            passed=report.text_only_fraction >= floor,
            detail=f"text-only fraction {report.text_only_fraction:.4f} vs floor {floor:.2f}",
        )
    )
    for cat, ceiling in sorted(constraints.category_max_fraction.items()):
        actual = report.category_fractions.get(cat, 0.0)
        report.constraints.append(
            ConstraintResult(
                name=f"category_max_fraction:{cat}",
                passed=actual <= ceiling,
                detail=f"{cat} fraction {actual:.4f} vs ceiling {ceiling:.2f}",
            )
        )


def compose_stage(
    manifests: Sequence[DataSourceManifest],
    stage: Stage,
    constraints: Optional[MixConstraints] = None,
    strict: bool = False,
) -> tuple[list[Sample], MixReport]:
    """Assemble one stage corpus from its manifests.

    Each source contributes its first min(quota, size) samples (subset
    selection happens upstream in the selection stage); the manifest's
    repeat factor multiplies onto each contributed sample.  Constraint
    failures raise in strict mode and are reported otherwise.
    """
    constraints = constraints or MixConstraints()
    stage_sources = [m for m in manifests if m.stage is stage]
    if not stage_sources:
        raise ValidationError(f"no manifest sources for stage {stage.value}")

    pool: list[Sample] = []
    for manifest in stage_sources:
        samples = load_corpus(manifest.corpus_path)
        if manifest.quota_override is not None and manifest.quota_override > len(samples):
            raise ValidationError(
                f"source {manifest.name!r}: quota_override {manifest.quota_override} "
                f"exceeds size {len(samples)}"
            )
        quota = manifest.quota_override if manifest.quota_override is not None else len(samples)
        for sample in samples[:quota]:
            sample.source = manifest.name
            sample.repeat_factor = sample.repeat_factor * manifest.repeat_factor
            pool.append(sample)

    if not pool:
        raise ValidationError(f"stage {stage.value} composed an empty corpus")
    report = _aggregate(pool, stage)
    _evaluate_constraints(report, constraints)
    if strict and not report.passed():
        failed = [c.name for c in report.constraints if not c.passed]
        raise ValidationError(f"stage {stage.value} constraint failure: {', '.join(failed)}")
    return pool, report


def distribution_report(pool: Sequence[Sample], stage: Optional[Stage] = None) -> MixReport:
    """Category distribution over effective counts for an existing pool."""
    if not pool:
        raise ValidationError("distribution_report: empty pool")
    return _aggregate(pool, stage)
