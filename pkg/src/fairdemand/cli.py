"""Command-line pipeline: ingest, detect, correct, sweep, compare and replay.

Every command reads an experiment spec (JSON), writes its report under
``--out`` and records a manifest holding the resolved spec, the seed, the
SHA-256 of every input file and of every report it wrote.  ``replay``
re-runs a manifest and checks that the reports come out byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import timedelta
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .dataset import (
    DataError,
    DemandTensor,
    IngestSummary,
    ProtectedAttributeTable,
    SplitSpec,
    aggregate_trips,
    align_nodes,
    iter_trip_csv,
    label_groups,
    parse_timestamp,
    read_attribute_csv,
)
from .diffcore import GraphError
from .fairness import FairnessError, FairnessReport, attribute_corr_matrix
from .graph import (
    GraphInputError,
    align_matrix,
    binary_adjacency,
    gaussian_adjacency,
    propagation_matrix,
    read_distance_csv,
    read_pair_csv,
)
from .models import MODEL_KINDS, ModelConfig, ModelError
from .report import FORMATS, ReportArtifact, ReportError, emit_report
from .synthetic import SyntheticSpec, generate
from .training import (
    DEFAULT_LAMBDA_GRID,
    GridResult,
    GridSpec,
    LossConfig,
    TrainConfig,
    TrainingError,
    fit_one,
    grid_search,
    percent_change,
    prepare_data,
    run_seed,
)

log = logging.getLogger("fairdemand")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("ingest", "detect", "correct", "sweep", "compare")
BUNDLE_DIR = "bundle"


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    models: list[str] = field(default_factory=lambda: ["ha", "mlr", "mlp", "gru"])
    model_params: dict = field(default_factory=dict)
    K: int = 12
    M: int = 1
    normalization: str = "node"
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    hyper: dict = field(default_factory=dict)
    tau: float = 0.10
    mode: str = "multi"
    attributes: list[str] | None = None
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "runs/default"
    format: str = "csv"
    pooling: str = "per_step"
    adjacency: dict = field(default_factory=lambda: {"sigma2": 1e4, "alpha": 0.5, "unit_scale": 1.0})

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        spec = cls(**d)
        if base_dir is not None:
            spec.data = {
                k: (str((base_dir / v).resolve()) if k in ("trips", "attributes", "distances", "pairs") and v else v)
                for k, v in spec.data.items()
            }
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if not self.models:
            raise SpecError("no models requested")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise SpecError(f"unknown model kinds {bad}; expected a subset of {list(MODEL_KINDS)}")
        if self.format not in FORMATS:
            raise SpecError(f"unknown format {self.format!r}")
        if self.seed < 0:
            raise SpecError("seed must be nonnegative")
        if "synthetic" not in self.data and not {"trips", "attributes"} <= set(self.data):
            raise SpecError("data needs either a 'synthetic' block or 'trips' and 'attributes' paths")
        self.grid()
        self.loss_template()
        self.train_config()

    def grid(self) -> GridSpec:
        try:
            return GridSpec(tuple(float(v) for v in self.lambdas), dict(self.hyper), float(self.tau))
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    def loss_template(self) -> LossConfig:
        """Parse ``multi``, ``single:ATTR``, ``em[:ATTR]``, ``rfg[:ATTR]``, ``ifg[:ATTR]``."""
        kind, _, attr = self.mode.partition(":")
        try:
            if kind == "multi":
                return LossConfig(0.0, "multi", tuple(self.attributes) if self.attributes else None)
            if kind in ("single", "em", "rfg", "ifg"):
                name = attr or (self.attributes[0] if self.attributes else "")
                if not name:
                    raise SpecError(f"mode {kind!r} needs an attribute, e.g. {kind}:ATTR")
                return LossConfig(0.0, kind, (name,))
        except ValueError as exc:
            raise SpecError(str(exc)) from None
        raise SpecError(f"unknown mode {self.mode!r}")

    def train_config(self, seed: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": self.seed if seed is None else seed})
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad train settings: {exc}") from None

    def model_config(self, kind: str) -> ModelConfig:
        try:
            return ModelConfig(kind, K=self.K, M=self.M, **self.model_params.get(kind, {}))
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad parameters for {kind}: {exc}") from None


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def spec_hash(spec: ExperimentSpec) -> str:
    return sha256_text(json.dumps(spec.to_dict(), sort_keys=True))[:16]


# -- ingest ------------------------------------------------------------------

@dataclass
class Bundle:
    tensor: DemandTensor
    table: ProtectedAttributeTable
    propagation: np.ndarray | None
    summary: dict


def _input_files(spec: ExperimentSpec) -> dict[str, str]:
    return {k: spec.data[k] for k in ("trips", "attributes", "distances", "pairs") if spec.data.get(k)}


def data_hashes(spec: ExperimentSpec) -> dict[str, str]:
    out = {}
    for key, path in sorted(_input_files(spec).items()):
        if not Path(path).exists():
            raise SpecError(f"{key} file not found: {path}")
        out[key] = sha256_file(path)
    return out


def _load_inputs(spec: ExperimentSpec) -> Bundle:
    adj = spec.adjacency
    if "synthetic" in spec.data:
        city = generate(SyntheticSpec.from_dict({"seed": spec.seed, **spec.data["synthetic"]}))
        W = gaussian_adjacency(city.distances, adj.get("sigma2", 1e4), adj.get("alpha", 0.5),
                               city.tensor.node_ids, adj.get("unit_scale", 1.0))
        summary = {"source": "synthetic", "accepted": int(city.tensor.values.sum()), "rejected": 0,
                   "outside_zones": 0, "outside_range": 0, "dropped_zones": []}
        return Bundle(city.tensor, city.table, propagation_matrix((W.W > 0).astype(float)), summary)

    table, bad_rows = read_attribute_csv(spec.data["attributes"], spec.data.get("directions"),
                                         spec.data.get("attribute_names"))
    ing = IngestSummary()
    records = list(iter_trip_csv(spec.data["trips"], ing))
    zones = sorted({r.pickup_zone_id for r in records} | set(table.node_ids))
    minutes = spec.data.get("interval_minutes", 60)
    start = parse_timestamp(spec.data["start"]) if spec.data.get("start") else None
    end = parse_timestamp(spec.data["end"]) if spec.data.get("end") else None
    tensor, ing = aggregate_trips(records, zones, timedelta(minutes=minutes), start, end, ing)
    tensor, table, dropped = align_nodes(tensor, table)
    ing.dropped_zones = sorted(set(dropped) | set(bad_rows))
    propagation = None
    if spec.data.get("pairs"):
        propagation = propagation_matrix(read_pair_csv(spec.data["pairs"], tensor.node_ids))
    elif spec.data.get("distances"):
        ids, D = read_distance_csv(spec.data["distances"])
        D = align_matrix(ids, D, tensor.node_ids)
        W = gaussian_adjacency(D, adj.get("sigma2", 1e4), adj.get("alpha", 0.5), tensor.node_ids,
                               adj.get("unit_scale", 1.0))
        propagation = propagation_matrix((W.W > 0).astype(float))
    return Bundle(tensor, table, propagation, {"source": "files", **ing.to_dict()})


def _bundle_dir(spec: ExperimentSpec) -> Path:
    return Path(spec.out) / BUNDLE_DIR


def write_bundle(spec: ExperimentSpec, bundle: Bundle) -> dict[str, str]:
    d = _bundle_dir(spec)
    d.mkdir(parents=True, exist_ok=True)
    # tiny bundles (fewer than 5 nodes) are still written; modeling commands reject them later
    try:
        labeling = label_groups(bundle.table).to_dict()
    except DataError as exc:
        log.warning("no group labels in bundle: %s", exc)
        labeling = None
    try:
        om = attribute_corr_matrix(bundle.table)
        omega = {"omega": om.omega.tolist(), "omega_inv": om.omega_inv.tolist(), "omega_condition": om.condition}
    except FairnessError as exc:
        log.warning("no attribute correlation matrix in bundle: %s", exc)
        omega = {"omega": None, "omega_inv": None, "omega_condition": None}
    split = SplitSpec().sizes(bundle.tensor.n_steps)
    files = {
        "demand.csv": bundle.tensor.to_csv_string(),
        "attributes.csv": bundle.table.to_csv_string(),
        "labeling.json": json.dumps(labeling, indent=1, sort_keys=True) + "\n",
        "meta.json": json.dumps({
            "directions": dict(zip(bundle.table.names, bundle.table.directions)),
            "splits": {"train": split[0], "val": split[1], "test": split[2]},
            **omega,
            "summary": bundle.summary,
        }, indent=1, sort_keys=True) + "\n",
    }
    if bundle.propagation is not None:
        files["propagation.json"] = json.dumps(bundle.propagation.tolist()) + "\n"
    for name, text in files.items():
        (d / name).write_text(text)
    return {name: sha256_text(text) for name, text in files.items()}


def read_bundle(spec: ExperimentSpec) -> Bundle:
    d = _bundle_dir(spec)
    meta = json.loads((d / "meta.json").read_text())
    tensor = DemandTensor.from_csv(d / "demand.csv")
    table, _ = read_attribute_csv(d / "attributes.csv", meta["directions"])
    prop_path = d / "propagation.json"
    prop = np.array(json.loads(prop_path.read_text())) if prop_path.exists() else None
    return Bundle(tensor, table, prop, meta["summary"])


def ensure_bundle(spec: ExperimentSpec) -> Bundle:
    if not (_bundle_dir(spec) / "meta.json").exists():
        log.info("no bundle under %s; ingesting first", _bundle_dir(spec))
        write_bundle(spec, _load_inputs(spec))
    return read_bundle(spec)


def cmd_ingest(spec: ExperimentSpec) -> list[ReportArtifact]:
    """Aggregate trips and attributes into a dataset bundle."""
    bundle = _load_inputs(spec)
    write_bundle(spec, bundle)
    art = ReportArtifact("ingest", ["metric", "value"], provenance=spec_hash(spec))
    s = bundle.summary
    for key, value in (
        ("nodes", bundle.tensor.n_nodes),
        ("intervals", bundle.tensor.n_steps),
        ("accepted_trips", s["accepted"]),
        ("rejected_records", s["rejected"]),
        ("outside_zones", s["outside_zones"]),
        ("outside_range", s["outside_range"]),
        ("dropped_zones", len(s["dropped_zones"])),
    ):
        art.add({"metric": key, "value": int(value)})
    return [art]


# -- modeling commands -------------------------------------------------------

def _report_columns(attrs: Sequence[str]) -> list[str]:
    return [c for a in attrs for c in (f"{a}:Corr", f"{a}:PAG")]


def _prepared(spec: ExperimentSpec):
    bundle = ensure_bundle(spec)
    data = prepare_data(bundle.tensor, bundle.table, spec.K, spec.M, norm_mode=spec.normalization)
    return bundle, data


def _search(spec, kind, data, bundle, lambdas, loss_template) -> GridResult:
    if kind == "tgcn" and bundle.propagation is None:
        raise SpecError("tgcn needs 'distances' or 'pairs' in the data block")
    grid = GridSpec(tuple(lambdas), dict(spec.hyper), spec.tau)
    return grid_search(kind, grid, data, loss_template, spec.train_config(), spec.model_config(kind),
                       bundle.propagation, pooling=spec.pooling)


def cmd_detect(spec: ExperimentSpec) -> list[ReportArtifact]:
    """Train each model without the fairness term and report accuracy and bias."""
    bundle, data = _prepared(spec)
    attrs = list(bundle.table.names)
    art = ReportArtifact("detection", ["model", "lambda", "MAE", "RMSE", *_report_columns(attrs)],
                         provenance=spec_hash(spec))
    for kind in spec.models:
        res = _search(spec, kind, data, bundle, [0.0], spec.loss_template())
        art.add(res.baseline.report.row())
    return [art]


def cmd_correct(spec: ExperimentSpec) -> list[ReportArtifact]:
    """Grid-search the fairness weight per model and report the selected row."""
    bundle, data = _prepared(spec)
    attrs = list(bundle.table.names)
    cols = ["model", "row", "lambda", "MAE", "RMSE", "RMSE_change"]
    for a in attrs:
        cols += [f"{a}:Corr", f"{a}:Corr_change", f"{a}:PAG", f"{a}:PAG_change"]
    cols.append("constraint_failed")
    art = ReportArtifact("correction", cols, provenance=spec_hash(spec))
    grid_art = ReportArtifact("correction", ["model", "lambda", "MAE", "RMSE", *_report_columns(attrs)],
                              provenance=spec_hash(spec))
    for kind in spec.models:
        res = _search(spec, kind, data, bundle, spec.lambdas, spec.loss_template())
        base = res.baseline.report
        for label, row in (("baseline", res.baseline), ("selected", res.best)):
            r = row.report
            out = {"model": kind, "row": label, "lambda": r.lam, "MAE": r.mae, "RMSE": r.rmse,
                   "RMSE_change": percent_change(base.rmse, r.rmse),
                   "constraint_failed": res.constraint_failed if label == "selected" else False}
            for a in attrs:
                out[f"{a}:Corr"] = r.corr.get(a)
                out[f"{a}:Corr_change"] = percent_change(base.corr.get(a), r.corr.get(a))
                out[f"{a}:PAG"] = r.pag.get(a)
                out[f"{a}:PAG_change"] = percent_change(base.pag.get(a), r.pag.get(a))
            art.add(out)
        for row in res.rows:
            grid_art.add(row.report.row())
    return [art, grid_art]


def cmd_sweep(spec: ExperimentSpec) -> list[ReportArtifact]:
    """Record accuracy and bias for every fairness weight in the grid."""
    bundle, data = _prepared(spec)
    attrs = list(bundle.table.names)
    art = ReportArtifact("sweep", ["lambda", "model", "attribute", "RMSE", "Corr", "PAG"],
                         provenance=spec_hash(spec))
    results = {kind: _search(spec, kind, data, bundle, spec.lambdas, spec.loss_template()) for kind in spec.models}
    for lam in spec.grid().lambdas:
        for kind in spec.models:
            for row in results[kind].rows:
                if row.loss.lam != lam:
                    continue
                for a in attrs:
                    art.add({"lambda": lam, "model": kind, "attribute": a, "RMSE": row.report.rmse,
                             "Corr": row.report.corr.get(a), "PAG": row.report.pag.get(a)})
    return [art]


def cmd_compare(spec: ExperimentSpec) -> list[ReportArtifact]:
    """Compare the correlation regularizer with EM, RFG and IFG on one attribute."""
    template = spec.loss_template()
    if template.attributes is None or len(template.attributes) != 1:
        raise SpecError("compare needs a single attribute: use --mode single:ATTR")
    attr = template.attributes[0]
    bundle, data = _prepared(spec)
    if attr not in bundle.table.names:
        raise SpecError(f"unknown attribute {attr!r}")
    art = ReportArtifact("comparison", ["model", "regularizer", "lambda", "RMSE", "Corr", "PAG"],
                         provenance=spec_hash(spec))
    for kind in spec.models:
        res = _search(spec, kind, data, bundle, spec.lambdas, LossConfig(0.0, "single", (attr,)))
        best = res.best
        rows = [("R", best.report)]
        tcfg = spec.train_config(run_seed(spec.seed, kind))
        for reg in ("em", "rfg", "ifg"):
            row = fit_one(best.config, data, LossConfig(best.loss.lam, reg, (attr,)), tcfg, bundle.propagation,
                          pooling=spec.pooling)
            rows.append((reg.upper(), row.report))
        for name, r in rows:
            art.add({"model": kind, "regularizer": name, "lambda": r.lam, "RMSE": r.rmse,
                     "Corr": r.corr.get(attr), "PAG": r.pag.get(attr)})
    return [art]


_COMMANDS = {
    "ingest": cmd_ingest,
    "detect": cmd_detect,
    "correct": cmd_correct,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}

_REPORT_NAMES = {
    "ingest": ["ingest_summary"],
    "detect": ["detection"],
    "correct": ["correction", "correction_grid"],
    "sweep": ["sweep"],
    "compare": ["comparison"],
}


def run_command(command: str, spec: ExperimentSpec) -> dict:
    """Run ``command``, write its reports and manifest; returns the manifest."""
    hashes = data_hashes(spec)
    artifacts = _COMMANDS[command](spec)
    out = Path(spec.out)
    reports = {}
    for name, art in zip(_REPORT_NAMES[command], artifacts):
        path = emit_report(art, spec.format, out / f"{name}.{spec.format}")
        reports[path.name] = sha256_file(path)
    manifest = {
        "format": "fairdemand-manifest/1",
        "version": __version__,
        "command": command,
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "data_hashes": hashes,
        "reports": reports,
    }
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def replay(manifest_path: str | Path, out: str | None = None) -> tuple[bool, dict]:
    """Re-run a manifest into ``out``; returns (identical, new manifest)."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format") != "fairdemand-manifest/1":
        raise SpecError(f"{manifest_path} is not a fairdemand manifest")
    spec = ExperimentSpec.from_dict(manifest["spec"])
    spec.out = out or str(Path(manifest_path).parent / f"replay_{manifest['command']}")
    current = data_hashes(spec)
    if current != manifest["data_hashes"]:
        raise SpecError("input data changed since the manifest was written")
    new = run_command(manifest["command"], spec)
    return new["reports"] == manifest["reports"], new


# -- argument parsing ----------------------------------------------------------

def _parse_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="experiment spec (JSON); defaults to the bundled synthetic city")
    common.add_argument("--seed", type=int, help="base seed (nonnegative 64-bit integer)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--models", help="comma-separated model kinds: " + ",".join(MODEL_KINDS))
    common.add_argument("--lambda-grid", help="comma-separated fairness weights; 0 is always included")
    common.add_argument("--mode", help="multi | single:ATTR | em:ATTR | rfg:ATTR | ifg:ATTR")
    common.add_argument("--format", choices=FORMATS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fairdemand", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=_COMMANDS[name].__doc__)
    rp = sub.add_parser("replay", help="Re-run a manifest and compare report bytes.")
    rp.add_argument("manifest")
    rp.add_argument("--out")
    rp.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    if args.spec:
        path = Path(args.spec)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from None
        base_dir = path.resolve().parent
    else:
        raw, base_dir = {}, None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.models is not None:
        raw["models"] = _parse_list(args.models)
    if args.lambda_grid is not None:
        try:
            lams = [float(v) for v in _parse_list(args.lambda_grid)]
        except ValueError:
            raise SpecError(f"bad --lambda-grid {args.lambda_grid!r}") from None
        raw["lambdas"] = lams if 0.0 in lams else [0.0, *lams]
    if args.mode is not None:
        raw["mode"] = args.mode
    if args.format is not None:
        raw["format"] = args.format
    return ExperimentSpec.from_dict(raw, base_dir)


VALIDATION_ERRORS = (SpecError, DataError, GraphInputError, ModelError, ReportError, FairnessError, ValueError,
                     KeyError, FileNotFoundError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            same, new = replay(args.manifest, args.out)
            if not same:
                print("replay produced different report bytes", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"replay identical: {', '.join(sorted(new['reports']))}")
            return EXIT_OK
        spec = resolve_spec(args)
        manifest = run_command(args.command, spec)
        for name in sorted(manifest["reports"]):
            print(Path(spec.out) / name)
        return EXIT_OK
    except (TrainingError, GraphError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
