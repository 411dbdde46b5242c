"""Coefficient sweeps and block/scale ablations built on ``fit`` and ``evaluate``."""
from __future__ import annotations

import dataclasses
import traceback
from dataclasses import dataclass
from pathlib import Path

from .config import BRANCHES, THIRD, EnsembleCoefficients, RunConfig
from .data import ImageSet
from .errors import CectError, ValidationError
from .evaluation import Evaluation, MetricsReport, evaluate
from .model import CECT, EncoderClassifier, TransformerOnly
from .training import RunReport, fit

SCALES = (28, 56, 112, 224)
# each local branch contributes one CEB scale; the fused map always feeds the TCB at 224
BRANCH_SCALE = {"SD1": 28, "SD2": 56, "SD3": 112}
SCALE_BRANCH = {v: k for k, v in BRANCH_SCALE.items()}

SWEEP_COLUMNS = ("alpha", "beta", "gamma", "acc", "npv", "ppv", "sen", "spe", "fos")
ABLATION_COLUMNS = ("ceb", "tdb", "tcb", "s28", "s56", "s112", "s224", "alpha", "beta", "gamma", "acc")


@dataclass(frozen=True)
class Splits:
    train: ImageSet
    val: ImageSet
    test: ImageSet


@dataclass
class Outcome:
    """One trained-and-tested model: its run report and test evaluation."""

    run: RunReport | None
    test: Evaluation | None
    error: str | None = None

    @property
    def metrics(self) -> MetricsReport | None:
        return self.test.report if self.test else None


def train_and_test(model, splits: Splits, cfg: RunConfig, out_dir=None, ckpt_cfg=None, log=None) -> Outcome:
    run = fit(model, splits.train, splits.val, cfg.train, cfg.seed, out_dir, ckpt_cfg or cfg.model, log=log)
    images, labels = splits.test.batch(range(len(splits.test)))
    return Outcome(run, evaluate(model, images, labels, cfg.train.eval_batch_size))


def _guarded(fn, log) -> Outcome:
    """Run one experiment; a package error becomes a failed row instead of ending the table."""
    try:
        return fn()
    except (CectError, ArithmeticError) as exc:
        if log:
            log("".join(traceback.format_exception_only(type(exc), exc)).strip())
        return Outcome(None, None, f"{type(exc).__name__}: {exc}")


# sweep ------------------------------------------------------------------------------

@dataclass
class SweepRow:
    coefficients: EnsembleCoefficients
    outcome: Outcome

    def to_dict(self) -> dict:
        a, b, c = self.coefficients.as_tuple()
        m = self.outcome.metrics
        row = {"alpha": a, "beta": b, "gamma": c}
        row.update({k: (getattr(m, k) if m else None) for k in SWEEP_COLUMNS[3:]})
        return row


def sweep(cfg: RunConfig, splits: Splits, groups=None, out_dir=None, log=None) -> list[SweepRow]:
    """Train one full model per coefficient group, all from the same seed."""
    groups = tuple(groups) if groups is not None else cfg.sweep.groups
    rows = []
    for i, g in enumerate(groups):
        g = EnsembleCoefficients.of(g.as_tuple() if isinstance(g, EnsembleCoefficients) else g)
        run_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, coefficients=g))
        sub = Path(out_dir) / f"group{i}" if out_dir is not None else None
        if log:
            log(f"sweep group {i}: alpha={g.alpha:.4g} beta={g.beta:.4g} gamma={g.gamma:.4g}")
        outcome = _guarded(lambda: train_and_test(CECT(run_cfg.model, cfg.seed), splits, run_cfg, sub, log=log), log)
        rows.append(SweepRow(g, outcome))
    return rows


def derive_groups(values=(0.1, 0.2, THIRD, 0.6, 0.8)) -> list[tuple[float, float, float]]:
    """All triples from ``values`` that sum to one with at least two equal entries."""
    out = []
    for a in values:
        for b in values:
            for c in values:
                if abs(a + b + c - 1) < 1e-9 and (a == b or b == c or a == c):
                    out.append((a, b, c))
    return out


# ablation --------------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    ceb: bool
    tdb: bool
    tcb: bool
    scales: frozenset
    coefficients: tuple[float, float, float] | None = None

    def validate(self) -> None:
        bad = set(self.scales) - set(SCALES)
        if bad:
            raise ValidationError(f"unknown scales {sorted(bad)}")
        if self.tdb and not self.ceb:
            raise ValidationError("TDB needs CEB feature maps to decode")
        if self.ceb and self.tcb and not self.tdb:
            raise ValidationError("CEB maps reach the TCB only through the TDB")
        if not (self.ceb or self.tcb):
            raise ValidationError("at least one of CEB or TCB must be enabled")
        if self.tcb != (224 in self.scales):
            raise ValidationError("the TCB runs exactly at the 224 scale")
        local = sorted(s for s in self.scales if s != 224)
        if self.ceb and not self.tcb:
            if len(local) != 1 or self.coefficients is not None:
                raise ValidationError("a CEB-only row uses one scale and no coefficients")
        if not self.ceb and local:
            raise ValidationError("local scales need the CEB")
        if self.ceb and self.tcb:
            if self.coefficients is None:
                raise ValidationError("a full-model row needs coefficients")
            coeffs = EnsembleCoefficients.of(self.coefficients)
            used = {BRANCH_SCALE[b] for b, c in zip(BRANCHES, coeffs.as_tuple()) if c > 0}
            if used != set(local):
                raise ValidationError(f"coefficients {self.coefficients} use scales {sorted(used)}, row lists {local}")

    def to_dict(self) -> dict:
        a, b, c = self.coefficients if self.coefficients is not None else (None, None, None)
        row = {"ceb": self.ceb, "tdb": self.tdb, "tcb": self.tcb}
        row.update({f"s{s}": s in self.scales for s in SCALES})
        row.update({"alpha": a, "beta": b, "gamma": c})
        return row


ABLATION_ROWS = (
    AblationRow(True, False, False, frozenset({28})),
    AblationRow(True, False, False, frozenset({56})),
    AblationRow(True, False, False, frozenset({112})),
    AblationRow(False, False, True, frozenset({224})),
    AblationRow(True, True, True, frozenset({112, 224}), (0.0, 0.0, 1.0)),
    AblationRow(True, True, True, frozenset({56, 112, 224}), (0.0, 0.5, 0.5)),
    AblationRow(True, True, True, frozenset(SCALES), (THIRD, THIRD, THIRD)),
)


def ablation_model(row: AblationRow, cfg: RunConfig):
    """The model a row describes, plus the architecture config it was built from."""
    row.validate()
    if not row.tcb:
        (scale,) = row.scales
        return EncoderClassifier(cfg.model, SCALE_BRANCH[scale], cfg.seed), cfg.model
    if not row.ceb:
        return TransformerOnly(cfg.model, cfg.seed), cfg.model
    coeffs = EnsembleCoefficients.of(row.coefficients)
    enabled = tuple(b for b, c in zip(BRANCHES, coeffs.as_tuple()) if c > 0)
    model_cfg = dataclasses.replace(cfg.model, coefficients=coeffs, enabled_branches=enabled)
    return CECT(model_cfg, cfg.seed), model_cfg


@dataclass
class AblationResult:
    row: AblationRow
    outcome: Outcome

    def to_dict(self) -> dict:
        out = self.row.to_dict()
        m = self.outcome.metrics
        out["acc"] = m.acc if m else None
        return out


def ablate(cfg: RunConfig, splits: Splits, rows=ABLATION_ROWS, out_dir=None, log=None) -> list[AblationResult]:
    for row in rows:
        row.validate()
    results = []
    for i, row in enumerate(rows):
        sub = Path(out_dir) / f"row{i}" if out_dir is not None else None
        if log:
            log(f"ablation row {i}: {row.to_dict()}")

        def run(row=row, sub=sub):
            model, model_cfg = ablation_model(row, cfg)
            run_cfg = dataclasses.replace(cfg, model=model_cfg)
            return train_and_test(model, splits, run_cfg, sub, model_cfg, log=log)

        results.append(AblationResult(row, _guarded(run, log)))
    return results
