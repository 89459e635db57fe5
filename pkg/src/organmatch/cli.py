"""Command-line entry point: gen / train / eval / simulate.

Each command writes its artifacts plus a ``manifest.json`` capturing the
fully resolved configuration and the SHA-256 hash of every artifact, so any
run is reproducible from the manifest alone. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import allocsim, baselines, datamodel, matchrep, metrics, synthgen
from .numkit import InsufficientDataError, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_BASELINES = ("kmeans/multihead-nn", "em/multihead-nn",
                     "kmeans/linear-per-head", "em/linear-per-head")


class CliConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed: int,
                    artifacts: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path_str: str) -> dict:
    try:
        return json.loads(Path(path_str).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"malformed JSON in {path_str}: {exc}") from exc


def _schema_from_header(path: Path) -> datamodel.SchemaConfig:
    """Rebuild the schema for a dataset.csv written by the gen command."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    rec = [c for c in header if c.startswith("r_")]
    don = [c for c in header if c.startswith("d_")]
    if not rec or not don or "outcome" not in header:
        raise datamodel.IngestionError(
            f"{path} does not look like a generated dataset (r_*/d_*/outcome columns)")
    return datamodel.SchemaConfig(recipient_columns=rec, donor_columns=don,
                                  outcome_column="outcome")


def _load_data_dir(data_dir: str) -> datamodel.Dataset:
    root = Path(data_dir)
    csv_path = root / "dataset.csv"
    if not csv_path.exists():
        raise datamodel.IngestionError(f"no dataset.csv in {data_dir}")
    dataset = datamodel.load_csv(csv_path, _schema_from_header(csv_path))
    truth = root / "ground_truth.csv"
    if truth.exists():
        dataset = datamodel.attach_ground_truth_csv(dataset, truth)
    return dataset


def _data_manifest(data_dir: str) -> dict | None:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else None


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.config:
        config = synthgen.SyntheticConfig(**_load_json(args.config))
    elif args.preset == "paper-5.1":
        config = synthgen.paper_preset()
    else:
        raise CliConfigError(f"unknown preset {args.preset!r}")
    if args.n is not None:
        config.n = args.n
    if args.seed is not None:
        config.seed = args.seed
    config.validate()

    out = _ensure_out(args.out)
    dataset = synthgen.sample_dataset(config)
    data_path = out / "dataset.csv"
    truth_path = out / "ground_truth.csv"
    datamodel.write_csv(dataset, data_path)
    datamodel.write_ground_truth_csv(dataset, truth_path)
    _write_manifest(out, "gen", asdict(config), config.seed, [data_path, truth_path])
    print(f"wrote {len(dataset)} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _parse_baseline_names(raw: str | None) -> list[baselines.BaselineSpec]:
    if raw is None:
        names = DEFAULT_BASELINES
    elif raw.strip() == "":
        return []
    else:
        names = tuple(s.strip() for s in raw.split(","))
    specs = []
    for name in names:
        with_rep = name.endswith("+rep")
        base = name[:-4] if with_rep else name
        try:
            clusterer, predictor = base.split("/")
        except ValueError:
            raise CliConfigError(
                f"baseline {name!r} must look like 'kmeans/multihead-nn[+rep]'") from None
        spec = baselines.BaselineSpec(clusterer=clusterer, predictor=predictor,
                                      with_rep=with_rep)
        try:
            spec.validate()
        except ValueError as exc:
            raise CliConfigError(str(exc)) from exc
        specs.append(spec)
    return specs


def _parse_pair_kinds(raw: str | None) -> list[str]:
    if raw is None or raw.strip() == "":
        return []
    kinds = [s.strip() for s in raw.split(",")]
    for kind in kinds:
        if kind not in baselines.PAIR_KINDS:
            raise CliConfigError(f"pair regressor {kind!r} not in {baselines.PAIR_KINDS}")
    return kinds


def _write_training_log(log: list[dict], path: Path) -> None:
    fields = ["epoch", "L_f", "L_DEC", "L_Phi", "total", "dec_active"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in fields})


def cmd_train(args) -> int:
    config = matchrep.TrainConfig(**_load_json(args.config)) if args.config \
        else matchrep.TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.beta is not None:
        config.beta = args.beta
    config.validate()
    specs = _parse_baseline_names(args.baselines)
    pair_kinds = _parse_pair_kinds(args.pair_regressors)

    dataset = _load_data_dir(args.data)
    indices = datamodel.split(dataset, seed=config.seed)
    normed = datamodel.normalize_fit_transform(dataset, indices)
    train = normed.subset(indices.train)

    out = _ensure_out(args.out)
    artifacts = []
    model, log = matchrep.train_joint(train.recipients, train.donors, train.outcomes, config)
    model_path = out / "model.json"
    matchrep.save_model(model, model_path,
                        normalization=datamodel.normalization_to_dict(normed.normalization))
    artifacts.append(model_path)
    log_path = out / "training_log.csv"
    _write_training_log(log, log_path)
    artifacts.append(log_path)

    for spec in specs:
        spec.train = matchrep.TrainConfig(**asdict(config))
        bmodel = baselines.fit_cluster_predictor(train.recipients, train.donors,
                                                 train.outcomes, spec)
        name = spec.name.replace("/", "_")
        path = out / f"baseline_{name}.json"
        baselines.save_cluster_predictor(bmodel, path)
        artifacts.append(path)

    for kind in pair_kinds:
        regressor = baselines.fit_pair_regressor(train.recipients, train.donors,
                                                 train.outcomes, kind, config=config)
        path = out / f"pair_{kind}.json"
        baselines.save_pair_regressor(regressor, path)
        artifacts.append(path)

    _write_manifest(out, "train", {
        "train": asdict(config),
        "data": str(Path(args.data)),
        "baselines": [s.name for s in specs],
        "pair_regressors": pair_kinds,
    }, config.seed, artifacts)
    print(f"wrote {len(artifacts)} model artifacts to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_cluster_model(name: str, preds: np.ndarray, labels: np.ndarray,
                        subset: datamodel.Dataset) -> dict:
    row = {"model": name,
           "eps_f": metrics.eps_factual(preds, labels, subset.outcomes),
           "eps_wmse": None, "aodt": None,
           "mean_best_prediction": metrics.mean_best_prediction(preds),
           "n": preds.shape[0]}
    if subset.true_potentials is not None and subset.true_donor_type is not None:
        y_tilde, nonempty = metrics.remap_potentials_to_learned(
            subset.true_potentials, subset.true_donor_type, labels, preds.shape[1])
        masked = np.where(nonempty, preds, -np.inf)
        row["eps_wmse"] = metrics.eps_wmse(preds[:, nonempty], y_tilde[:, nonempty])
        row["aodt"] = float(np.mean(
            np.argmax(masked, axis=1)
            == np.argmax(np.where(nonempty, y_tilde, -np.inf), axis=1)))
    return row


def cmd_eval(args) -> int:
    models_dir = Path(args.models)
    model_path = models_dir / "model.json"
    if not model_path.exists():
        raise datamodel.IngestionError(f"no model.json in {args.models}")
    model = matchrep.load_model(model_path)
    doc = json.loads(model_path.read_text())
    if doc.get("normalization") is None:
        raise datamodel.IngestionError("model file lacks normalization statistics")
    norm = datamodel.normalization_from_dict(doc["normalization"])

    dataset = _load_data_dir(args.data)
    seed = args.seed if args.seed is not None else model.config.seed
    indices = datamodel.split(dataset, seed=seed)
    normed = datamodel.apply_normalization(dataset, norm)
    subset = normed.subset(indices.validation if args.split == "validation"
                           else indices.train if args.split == "train"
                           else np.arange(len(normed)))

    rows = []
    labels, _ = matchrep.donor_type_batch(model, subset.donors)
    preds = matchrep.predict_potential_batch(model, subset.recipients)
    rows.append(_eval_cluster_model("matchrep", preds, labels, subset))

    for path in sorted(models_dir.glob("baseline_*.json")):
        bmodel = baselines.load_cluster_predictor(path)
        blabels = bmodel.donor_labels(subset.donors)
        bpreds = bmodel.predict_potentials(subset.recipients)
        rows.append(_eval_cluster_model(bmodel.spec.name, bpreds, blabels, subset))

    for path in sorted(models_dir.glob("pair_*.json")):
        regressor = baselines.load_pair_regressor(path)
        pairs = np.hstack([subset.recipients, subset.donors])
        pred = regressor.predict(pairs)
        err = pred - subset.outcomes
        rows.append({"model": regressor.kind, "eps_f": float(np.mean(err * err)),
                     "eps_wmse": None, "aodt": None,
                     "mean_best_prediction": float(np.mean(pred)), "n": len(pred)})

    out = _ensure_out(args.out)
    table_path = out / "comparison.csv"
    fields = ["model", "eps_f", "eps_wmse", "aodt", "mean_best_prediction", "n"]
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    report_path = out / "eval_reports.json"
    report_path.write_text(json.dumps(rows, indent=2, sort_keys=True))
    _write_manifest(out, "eval", {
        "data": str(Path(args.data)), "models": str(models_dir),
        "split": args.split,
    }, seed, [table_path, report_path])
    print(f"evaluated {len(rows)} models on {len(subset)} records -> {table_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _resolve_scorers(args, dataset: datamodel.Dataset):
    """Returns (plain_scorer, model_scorer, guide) for the requested policies."""
    model_sc = guide = None
    if args.model:
        model = matchrep.load_model(args.model)
        doc = json.loads(Path(args.model).read_text())
        if doc.get("normalization") is None:
            raise datamodel.IngestionError("model file lacks normalization statistics")
        normed = datamodel.apply_normalization(
            dataset, datamodel.normalization_from_dict(doc["normalization"]))
        model_sc = allocsim.model_scorer(model, normed)
        guide = allocsim.model_guide(model, normed)
    plain_sc = None
    manifest = _data_manifest(args.data)
    if manifest and manifest.get("command") == "gen":
        outcome_means = manifest["config"]["outcome_means"]
        if dataset.true_recipient_type is not None:
            plain_sc = allocsim.oracle_mean_scorer(dataset, outcome_means)
    if plain_sc is None:
        plain_sc = model_sc
    return plain_sc, model_sc, guide


def cmd_simulate(args) -> int:
    sim_config = allocsim.SimConfig(**_load_json(args.sim_config)) if args.sim_config \
        else allocsim.SimConfig()
    sim_config.validate()
    policies = ([p.strip() for p in args.policies.split(",")]
                if args.policies else list(allocsim.POLICIES))
    for policy in policies:
        if policy not in allocsim.POLICIES:
            raise allocsim.PolicyConfigError(
                f"unknown policy {policy!r}; choose from {allocsim.POLICIES}")

    dataset = _load_data_dir(args.data)
    if not dataset.has_ground_truth:
        raise datamodel.IngestionError("simulate needs ground_truth.csv next to dataset.csv")
    plain_sc, model_sc, guide = _resolve_scorers(args, dataset)

    seed = args.stream_seed if args.stream_seed is not None else 0
    stream = allocsim.build_stream(dataset, sim_config, seed=seed)

    out = _ensure_out(args.out)
    artifacts = []
    reports = {}
    for policy in policies:
        kwargs = {}
        if policy in ("uf", "bf"):
            if plain_sc is None:
                raise allocsim.PolicyConfigError(
                    f"policy {policy!r} needs an oracle dataset or --model")
            kwargs["scorer"] = plain_sc
        elif policy.startswith("matching-"):
            if model_sc is None or guide is None:
                raise allocsim.PolicyConfigError(f"policy {policy!r} needs --model")
            kwargs["scorer"] = model_sc
            kwargs["guide"] = guide
        reports[policy] = allocsim.run_policy(dataset, stream, policy, sim_config, **kwargs)
        ledger_path = out / f"ledger_{policy}.csv"
        allocsim.write_ledger_csv(reports[policy], ledger_path)
        artifacts.append(ledger_path)

    rows = []
    real_types = (allocsim.assigned_true_types(dataset, reports["real"])
                  if "real" in reports else None)
    for policy in policies:
        row = reports[policy].summary()
        flipped = None
        if real_types is not None and policy != "real":
            flipped = metrics.flipped_ratio(
                real_types, allocsim.assigned_true_types(dataset, reports[policy]))
        row["flipped_vs_real"] = flipped
        rows.append(row)

    table_path = out / "policy_table.csv"
    fields = ["policy", "n", "n_transplanted", "n_dead", "n_waiting",
              "death_rate", "avg_survival", "avg_benefit", "flipped_vs_real"]
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    artifacts.append(table_path)
    _write_manifest(out, "simulate", {
        "sim": asdict(sim_config), "policies": policies,
        "data": str(Path(args.data)),
        "model": None if not args.model else str(Path(args.model)),
    }, seed, artifacts)
    print(f"simulated {len(policies)} policies -> {table_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="organmatch")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--preset", default="paper-5.1")
    gen.add_argument("--config", help="SyntheticConfig JSON file")
    gen.add_argument("--n", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train the model and baselines")
    train.add_argument("--data", required=True, help="directory produced by gen")
    train.add_argument("--config", help="TrainConfig JSON file")
    train.add_argument("--seed", type=int)
    train.add_argument("--beta", type=float, help="override beta (0 = ablation)")
    train.add_argument("--baselines",
                       help="comma list like 'kmeans/multihead-nn,em/linear-per-head+rep'; "
                            "empty string disables")
    train.add_argument("--pair-regressors",
                       help=f"comma list from {baselines.PAIR_KINDS}")
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate saved models on a dataset")
    ev.add_argument("--data", required=True)
    ev.add_argument("--models", required=True, help="directory produced by train")
    ev.add_argument("--split", choices=("validation", "train", "all"), default="validation")
    ev.add_argument("--seed", type=int, help="split seed; defaults to the model's")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    sim = sub.add_parser("simulate", help="run allocation-policy simulations")
    sim.add_argument("--data", required=True)
    sim.add_argument("--model", help="matchrep model.json for matching policies")
    sim.add_argument("--policies", help=f"comma list from {allocsim.POLICIES}")
    sim.add_argument("--stream-seed", type=int)
    sim.add_argument("--sim-config", help="SimConfig JSON file")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliConfigError, synthgen.ConfigError, allocsim.PolicyConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if isinstance(exc, (datamodel.IngestionError, InsufficientDataError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
