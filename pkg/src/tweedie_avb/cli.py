"""Command-line front end: simulate, fit, evaluate, predict.

Every subcommand reads a JSON config (``--config``), optionally
overridden by a few flags, echoes the fully resolved config into the
output directory, and writes fixed-name artifacts there.  Re-running
from the echoed config reproduces the outputs bit-identically.

Exit codes: 0 success, 1 user/config error, 2 numerical abort.
Log verbosity comes from the TWEEDIE_AVB_LOG environment variable
(DEBUG/INFO/WARNING/ERROR, default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import avb, data as data_io, evaluation, mcmc
from .autodiff import NonFiniteGradientError
from .avb import FitResult, TrainConfig, TrainingAbortError, posterior_predict, train
from .data import SchemaConfig, SimTruth, SplitSpec, load_csv, simulate_dataset, split_dataset, standardize, write_csv
from .mcmc import ChainConfig, run_chain
from .tweedie import NonConvergenceError, TruncationConfig

log = logging.getLogger("tweedie_avb")


class UserError(ValueError):
    """Configuration or input problem attributable to the caller."""


def _setup_logging() -> None:
    level = os.environ.get("TWEEDIE_AVB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"malformed config {path}: {exc}") from None


def _out_dir(config: dict, args) -> Path:
    out = args.out or config.get("out")
    if out is None:
        raise UserError("an output directory is required (--out or config key 'out')")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(config: dict, out: Path) -> None:
    with open(out / "config_echo.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    config.setdefault("seed", 0)
    config["out"] = str(_out_dir(config, args))
    truth_dict = config.get("truth")
    if truth_dict is None:
        raise UserError("simulate needs a 'truth' object in the config")
    try:
        truth = SimTruth.from_dict(truth_dict)
    except (KeyError, ValueError, TypeError) as exc:
        raise UserError(f"invalid truth config: {exc}") from None
    out = Path(config["out"])
    rng = np.random.default_rng(config["seed"])
    dataset, realized = simulate_dataset(truth, rng)
    write_csv(dataset, out / "dataset.csv")
    config["truth"] = realized.to_dict()  # echo the input truth; realized b goes to truth.json
    config["truth"]["b"] = None if truth.b is None else truth.b.tolist()
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(realized.to_dict(), fh, indent=2)
    _echo_config(config, out)
    log.info("wrote %d rows to %s", dataset.n_obs, out / "dataset.csv")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_dataset(config: dict):
    path = config.get("data_csv")
    if path is None:
        raise UserError("config key 'data_csv' is required")
    if not Path(path).exists():
        raise UserError(f"data file not found: {path}")
    schema_dict = config.get("schema")
    if schema_dict is None:
        raise UserError("config key 'schema' is required")
    schema = SchemaConfig.from_dict(schema_dict)
    return load_csv(path, schema), schema


def _write_trace_csv(fit: FitResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "critic_loss", "generator_loss"])
        for i, (c, g) in enumerate(zip(fit.critic_trace, fit.generator_trace)):
            writer.writerow([i, repr(float(c)), repr(float(g))])


def cmd_fit(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.setdefault("train", {})["seed"] = args.seed
    if args.steps is not None:
        config.setdefault("train", {})["outer_steps"] = args.steps
    if args.n_max is not None:
        config.setdefault("train", {}).setdefault("truncation", {})["n_max"] = args.n_max
    if args.mcmc:
        config.setdefault("mcmc", {})
    config["out"] = str(_out_dir(config, args))
    out = Path(config["out"])

    dataset, schema = _load_dataset(config)
    split = SplitSpec.from_dict(config.get("split", {}))
    config["split"] = split.to_dict()
    train_set, valid_set, test_set = split_dataset(dataset, split)
    do_standardize = config.setdefault("standardize", True)
    if do_standardize:
        train_set, (valid_set, test_set), means, scales = standardize(
            train_set, [valid_set, test_set])
    else:
        means = np.zeros(dataset.n_covariates)
        scales = np.ones(dataset.n_covariates)

    try:
        cfg = TrainConfig.from_dict(config.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid train config: {exc}") from None
    config["train"] = cfg.to_dict()
    config["schema"] = schema.to_dict()

    try:
        fit = train(train_set, cfg, valid=valid_set)
    except TrainingAbortError as exc:
        if exc.checkpoint is not None:
            checkpoint_path = out / "fit_checkpoint.json"
            exc.checkpoint.save(checkpoint_path)
            log.error("training aborted at step %d; checkpoint at %s", exc.step, checkpoint_path)
        raise
    fit.metadata["schema"] = schema.to_dict()
    fit.metadata["standardize"] = {
        "enabled": bool(do_standardize),
        "means": np.asarray(means).tolist(),
        "scales": np.asarray(scales).tolist(),
    }
    fit.metadata["group_levels"] = dataset.group_levels
    fit.metadata["split"] = split.to_dict()
    fit.metadata["data_csv"] = config["data_csv"]
    fit.save(out / "fit.json")
    _write_trace_csv(fit, out / "trace.csv")

    if "mcmc" in config and config["mcmc"] is not None:
        try:
            chain_cfg = ChainConfig.from_dict(config["mcmc"])
        except (TypeError, ValueError) as exc:
            raise UserError(f"invalid mcmc config: {exc}") from None
        config["mcmc"] = chain_cfg.to_dict()
        chain = run_chain(train_set, chain_cfg, cfg.truncation)
        chain.save(out / "mcmc.json")
    _echo_config(config, out)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _load_fit(config: dict) -> FitResult:
    path = config.get("fit_json")
    if path is None:
        raise UserError("config key 'fit_json' is required")
    if not Path(path).exists():
        raise UserError(f"fit artifact not found: {path}")
    return FitResult.load(path)


def _apply_stored_transform(fit: FitResult, ds):
    info = fit.metadata.get("standardize")
    if not info or not info.get("enabled"):
        return ds
    means = np.asarray(info["means"])
    scales = np.asarray(info["scales"])
    from .model import Dataset
    return Dataset(
        responses=ds.responses.copy(),
        fixed_design=(ds.fixed_design - means) / scales,
        group_index=ds.group_index.copy(),
        group_count=ds.group_count,
        column_names=list(ds.column_names),
        group_levels=ds.group_levels,
    )


def _encode_groups(fit: FitResult, ds) -> np.ndarray:
    levels = fit.metadata.get("group_levels")
    if not levels or ds.group_levels is None:
        return np.full(ds.n_obs, -1, dtype=int)
    encode = {lvl: i for i, lvl in enumerate(levels)}
    return np.array([encode.get(ds.group_levels[g], -1) for g in ds.group_index], dtype=int)


def _check_columns(fit: FitResult, ds) -> None:
    trained = list(fit.metadata.get("column_names", []))
    got = list(ds.column_names)
    if trained != got:
        missing = [c for c in trained if c not in got]
        extra = [c for c in got if c not in trained]
        raise UserError(
            f"covariate columns differ from training: missing {missing}, unexpected {extra}"
        )


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    config.setdefault("seed", 0)
    config["out"] = str(_out_dir(config, args))
    out = Path(config["out"])
    fit = _load_fit(config)
    dataset, schema = _load_dataset(config)
    split = SplitSpec.from_dict(config.get("split", fit.metadata.get("split", {})))
    config["split"] = split.to_dict()
    config["schema"] = schema.to_dict()
    train_set, _, test_set = split_dataset(dataset, split)
    test_std = _apply_stored_transform(fit, test_set)
    _check_columns(fit, test_std)

    rng = np.random.default_rng(config["seed"])
    preds = posterior_predict(fit, test_std.fixed_design, _encode_groups(fit, test_std), rng)
    baseline = np.full(test_set.n_obs, max(train_set.responses.mean(), 1e-12))
    predictions = {"intercept": baseline, "avb": preds["mean"]}
    for name, path in (config.get("extra_predictions") or {}).items():
        if not Path(path).exists():
            raise UserError(f"prediction file not found for model {name!r}: {path}")
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=1)
        if values.shape[0] != test_set.n_obs:
            raise UserError(
                f"prediction file {path} has {values.shape[0]} rows, expected {test_set.n_obs}"
            )
        predictions[name] = values

    matrix = evaluation.pairwise_gini_matrix(test_set.responses, predictions)
    evaluation.write_gini_matrix_csv(matrix, out / "gini_matrix.csv")
    evaluation.write_gini_matrix_json(matrix, out / "gini_matrix.json")
    for i, base_name in enumerate(matrix["names"]):
        for j, model_name in enumerate(matrix["names"]):
            if i == j:
                continue
            curve = evaluation.ordered_lorenz(
                test_set.responses, predictions[base_name], predictions[model_name])
            curve.write_csv(out / f"lorenz_{base_name}_{model_name}.csv")

    summaries = {}
    for key, label in (("p_index", "p_index"), ("dispersion", "dispersion"),
                       ("sigma_b", "sigma_b")):
        draws = np.asarray(fit.draws[key])
        if draws.size >= 2:
            summaries[label] = evaluation.posterior_summary(draws)
    sigma_sq = np.asarray(fit.draws["sigma_b"]) ** 2
    if sigma_sq.size >= 2:
        summaries["sigma_b_squared"] = evaluation.posterior_summary(sigma_sq)
    with open(out / "posterior_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summaries, fh, indent=2)

    p_summary = summaries.get("p_index")
    if p_summary is not None:
        with open(out / "posterior_p_hist.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            edges = p_summary["histogram_edges"]
            for left, right, count in zip(edges[:-1], edges[1:],
                                          p_summary["histogram_counts"]):
                writer.writerow([repr(left), repr(right), count])
    _echo_config(config, out)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def cmd_predict(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    config.setdefault("seed", 0)
    config["out"] = str(_out_dir(config, args))
    out = Path(config["out"])
    fit = _load_fit(config)
    schema_dict = config.get("schema") or fit.metadata.get("schema")
    if schema_dict is None:
        raise UserError("no schema in config or fit metadata")
    config["schema"] = schema_dict
    path = config.get("data_csv")
    if path is None:
        raise UserError("config key 'data_csv' is required")
    if not Path(path).exists():
        raise UserError(f"data file not found: {path}")
    ds = load_csv(path, SchemaConfig.from_dict(schema_dict))
    ds_std = _apply_stored_transform(fit, ds)
    _check_columns(fit, ds_std)
    rng = np.random.default_rng(config["seed"])
    preds = posterior_predict(fit, ds_std.fixed_design, _encode_groups(fit, ds_std), rng)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "mean", "q05", "q50", "q95"])
        for i in range(ds.n_obs):
            writer.writerow([
                i,
                repr(float(preds["mean"][i])),
                repr(float(preds["q05"][i])),
                repr(float(preds["q50"][i])),
                repr(float(preds["q95"][i])),
            ])
    _echo_config(config, out)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tweedie-avb",
        description="Bayesian Tweedie mixed models via adversarial variational inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("fit", cmd_fit),
                     ("evaluate", cmd_evaluate), ("predict", cmd_predict)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output directory")
        if name == "fit":
            p.add_argument("--mcmc", action="store_true",
                           help="also run the MCMC validation chain")
            p.add_argument("--n-max", type=int, help="truncation terms for the latent-count sum")
            p.add_argument("--steps", type=int, help="outer training steps")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, data_io.SchemaError, data_io.SplitError,
            mcmc.ChainConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAbortError, NonFiniteGradientError, NonConvergenceError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
