"""Robustness measurement: accuracy under a perturbation and worst case over an attack grid."""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import FAMILIES, AttackConfig, AttackResult, spgd
from .perturbation import PerturbationSpec, apply_batch, export_ppm, sample_offsets, save_patch

REPORT_SCHEMA = "metapatch-eval-report"
REPORT_VERSION = 1
CSV_COLUMNS = ("config_id", "init", "steps", "step_size", "momentum", "cutoff", "accuracy", "loss_final")

PAPER_STEP_SIZES = (0.0001, 0.00033, 0.001, 0.0033, 0.01, 0.033, 0.1)


def desk_grid(patch_size=(8, 8), steps: int = 500, batch_size: int = 32) -> list[AttackConfig]:
    """12 configs: {random, data, low-pass} x step size {0.01, 0.1} x momentum {0, 0.9}."""
    cutoff = min(patch_size) / 2
    grid = []
    for init, cut in (("random", None), ("data", None), ("random", cutoff)):
        for alpha in (0.01, 0.1):
            for gamma in (0.0, 0.9):
                grid.append(AttackConfig(init=init, steps=steps, step_size=alpha, momentum=gamma,
                                         cutoff=cut, batch_size=batch_size))
    return grid


def paper_grid(cutoff: float = 12, steps: int = 2500, batch_size: int = 64) -> list[AttackConfig]:
    """The full classification grid: 2 inits x 7 step sizes x 3 momenta x cutoff {off, on}."""
    return [
        AttackConfig(init=init, steps=steps, step_size=a, momentum=g, cutoff=c, batch_size=batch_size)
        for init in ("random", "data")
        for a in PAPER_STEP_SIZES
        for g in (0.0, 0.9, 0.99)
        for c in (None, cutoff)
    ]


def _key_int(key) -> int:
    return int.from_bytes(hashlib.sha256(str(key).encode()).digest()[:4], "little")


def eval_offsets(spec: PerturbationSpec, n: int, seed: int, key) -> np.ndarray:
    """Placement for sample i drawn from a stream keyed by (seed, key, i)."""
    k = _key_int(key)
    return np.concatenate([sample_offsets(spec, np.random.default_rng([seed, k, i]), 1) for i in range(n)])


def accuracy_under(model, dataset, xi, spec: PerturbationSpec, seed: int = 0, key="clean",
                   batch_size: int = 256) -> float:
    """Fraction classified correctly, each sample perturbed by ``xi`` at its own placement.

    ``xi=None`` gives clean accuracy.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("evaluation split is empty")
    offsets = eval_offsets(spec, n, seed, key) if xi is not None else None
    hits = 0
    for s in range(0, n, batch_size):
        x = dataset.images[s:s + batch_size]
        if xi is not None:
            x = apply_batch(x, xi, offsets[s:s + batch_size], spec)
        hits += int((model.predict(x) == dataset.labels[s:s + batch_size]).sum())
    return hits / n


@dataclass
class EvalReport:
    rows: list[dict]
    clean_accuracy: float
    family_min: dict[str, float]
    overall_min: float
    model_id: str = ""
    label: str = ""
    seed: int = 0
    spec: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_VERSION,
            "label": self.label,
            "model_id": self.model_id,
            "seed": self.seed,
            "spec": self.spec,
            "provenance": self.provenance,
            "clean_accuracy": self.clean_accuracy,
            "family_min": self.family_min,
            "min": self.overall_min,
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError("not an evaluation report")
        if d.get("schema_version") != REPORT_VERSION:
            raise ValueError(f"report schema version {d.get('schema_version')} != {REPORT_VERSION}")
        try:
            return cls(d["rows"], d["clean_accuracy"], d["family_min"], d["min"], d["model_id"], d["label"],
                       d["seed"], d["spec"], d.get("provenance", {}))
        except KeyError as exc:
            raise ValueError(f"report is missing field {exc}") from None


def aggregate(rows: list[dict], transfer_accuracies=()) -> tuple[dict, float]:
    """Family minima over successful rows and the overall minimum."""
    fam: dict[str, float] = {}
    for r in rows:
        if r.get("error") is None and r.get("accuracy") is not None:
            fam[r["family"]] = min(fam.get(r["family"], np.inf), r["accuracy"])
    if len(transfer_accuracies):
        fam["Tr"] = float(min(transfer_accuracies))
    fam = {k: float(fam[k]) for k in FAMILIES if k in fam}
    values = [r["accuracy"] for r in rows if r.get("error") is None and r.get("accuracy") is not None]
    values += list(fam.values())
    return fam, float(min(values)) if values else float("nan")


def _run_config(model, train_data, eval_data, spec, config: AttackConfig, seed: int):
    rng = np.random.default_rng([seed, _key_int(config.config_id)])
    result = spgd(model, train_data, spec, config, rng)
    result.accuracy = accuracy_under(model, eval_data, result.applied_patch, spec, seed=seed, key=config.config_id)
    return result


def _row(config: AttackConfig, result: AttackResult | None, error: str | None) -> dict:
    return {
        "config_id": config.config_id,
        "family": config.family,
        "config": config.to_dict(),
        "accuracy": None if result is None else result.accuracy,
        "loss_final": None if result is None else float(result.loss_final),
        "error": error,
    }


def _worker(args):
    params, train_data, eval_data, spec, config, seed = args
    from .model import Classifier

    try:
        return _run_config(Classifier(params), train_data, eval_data, spec, config, seed), None
    except Exception as exc:  # recorded in the report row
        return None, f"{type(exc).__name__}: {exc}"


def grid_eval(model, train_data, eval_data, spec: PerturbationSpec, grid: list[AttackConfig], seed: int = 0,
              transfer_accuracies=(), jobs: int = 1, label: str = "", model_id: str = ""):
    """Run S-PGD per config on ``train_data`` and measure accuracy on ``eval_data``.

    Returns (EvalReport, {config_id: AttackResult}).  Failed configs keep a
    row with the error message and are left out of the minima.  ``jobs > 1``
    needs a :class:`~metapatch.model.Classifier` (its parameters are shipped
    to worker processes); each config has its own seeded stream, so the
    report does not depend on ``jobs``.
    """
    if not grid:
        raise ValueError("attack grid is empty")
    results: dict[str, AttackResult] = {}
    outcomes = []
    if jobs > 1:
        tasks = [(model.params, train_data, eval_data, spec, c, seed) for c in grid]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_worker, tasks))
    else:
        for c in grid:
            try:
                outcomes.append((_run_config(model, train_data, eval_data, spec, c, seed), None))
            except Exception as exc:  # recorded in the report row
                outcomes.append((None, f"{type(exc).__name__}: {exc}"))
    rows = []
    for c, (res, err) in zip(grid, outcomes):
        rows.append(_row(c, res, err))
        if res is not None:
            res.spec = spec
            results[c.config_id] = res
    fam, overall = aggregate(rows, transfer_accuracies)
    report = EvalReport(
        rows=rows,
        clean_accuracy=accuracy_under(model, eval_data, None, spec),
        family_min=fam,
        overall_min=overall,
        model_id=model_id,
        label=label,
        seed=seed,
        spec=spec.to_dict(),
    )
    return report, results


def emit_report(report: EvalReport, out_dir, results: dict | None = None, export_patches: bool = False) -> list[Path]:
    """Write report.csv and report.json; optionally one .patch/.ppm pair per config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out / "report.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            c = r["config"]
            w.writerow([r["config_id"], c["init"], c["steps"], c["step_size"], c["momentum"],
                        "" if c["cutoff"] is None else c["cutoff"],
                        "" if r["accuracy"] is None else r["accuracy"],
                        "" if r["loss_final"] is None else r["loss_final"]])
    written.append(csv_path)
    json_path = out / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(json_path)
    if export_patches and results:
        spec = PerturbationSpec.from_dict(report.spec)
        for cid, res in sorted(results.items()):
            save_patch(res.patch, spec, out / f"{cid}.patch")
            export_ppm(res.applied_patch, spec, out / f"{cid}.ppm")
            written += [out / f"{cid}.patch", out / f"{cid}.ppm"]
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))
