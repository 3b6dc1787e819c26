"""Command-line interface.

    recdemand simulate        --config run.toml --out-dir out
    recdemand fit             --events out/events.tsv
    recdemand validate        --checkpoint out/params.ckpt --arms out/arms
    recdemand counterfactual  --checkpoint out/params.ckpt --events out/events.tsv
    recdemand decompose       --checkpoint out/params.ckpt --events out/events.tsv --policy random
    recdemand incrementality  --checkpoint out/params.ckpt --events out/events.tsv --targets 3,17
    recdemand export-embeddings --checkpoint out/truth.ckpt --raw-dim 256

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from .config import ConfigError, RunConfig, load_config
from .counterfactual import (ReplayPolicy, aggregate_decomposition, compare_policies,
                             decompose_goods, impute_boosted_pages, incrementality, make_policy,
                             model_diversion, recommendation_rate_change, simulate_counterfactual,
                             targeting_heterogeneity, wald_diversion)
from .estimation import fit, holdout_metrics
from .exog import ExogenousEmbeddingTable, fit_exogenous, project, synthetic_raw_embeddings
from .params import ModelParameters
from .policies import ImputedRecModelPolicy, ImputedUtilityPolicy
from .recmodel import fit_rec_model
from .simulator import (CONTROL, generate_ground_truth, run_salience_experiment, simulate_panel)
from .utils import as_generator, corr_r2

logger = logging.getLogger("recdemand")

WEIGHTINGS = ("observation", "mean", "median")


class Run:
    """Shared state for one command: resolved config, output dir and input hashes."""

    def __init__(self, args, config: RunConfig):
        self.args = args
        self.config = config
        self.seed = config.seed
        self.out = Path(args.out_dir or config.paths.out_dir)
        self.inputs: list[Path] = []
        if args.config:
            self.inputs.append(Path(args.config))

    def use(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs.append(path)
        return path

    def hashes(self) -> dict[str, str]:
        return rio.input_hashes(self.inputs)

    def csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        rio.write_csv(path, header, rows, self.seed, self.hashes())
        logger.info("wrote %s", path)
        return path

    def artifact(self, name: str, writer) -> Path:
        path = self.out / name
        writer(path)
        rio.write_sidecar(path, self.seed, self.hashes())
        logger.info("wrote %s", path)
        return path

    def finish(self) -> None:
        rio._write_text(self.out / "config.resolved.json", self.config.to_json())

    def checkpoint(self, path) -> ModelParameters:
        params, _ = rio.load_checkpoint(self.use(path))
        if not isinstance(params, ModelParameters):
            raise ValueError(f"{path} does not hold demand-model parameters")
        return params.validate()

    def events(self, path):
        return rio.read_events(self.use(path))


def _default(args, name: str, run: Run, filename: str) -> Path:
    value = getattr(args, name, None)
    return Path(value) if value else run.out / filename


# -- commands ---------------------------------------------------------------------

def cmd_simulate(run: Run) -> None:
    cfg = run.config.world
    truth = generate_ground_truth(cfg)
    log = simulate_panel(truth, cfg)
    run.artifact("truth.ckpt", lambda p: rio.save_checkpoint(p, truth, {"kind": "truth"}))
    run.artifact("events.tsv", lambda p: rio.write_events(p, log))
    arms = run.config.arms
    if arms:
        logs = run_salience_experiment(truth, cfg, arms)
        for arm_id in sorted(logs):
            run.artifact(f"arms/events_{arm_id}.tsv",
                         lambda p, a=arm_id: rio.write_events(p, logs[a], arm=a))
    run.csv("simulate_summary.csv", ["metric", "value"],
            [("n_users", cfg.n_users), ("n_goods", cfg.n_goods), ("horizon", cfg.horizon),
             ("n_events", log.n_events),
             ("engagement", 1.0 - log.choice_shares()[-1] if log.n_events else float("nan"))])


def cmd_fit(run: Run) -> None:
    log = run.events(_default(run.args, "events", run, "events.tsv"))
    training = run.config.training
    if run.args.embeddings:
        table = rio.read_embedding_table(run.use(run.args.embeddings))
        ex = run.config.exog
        params, proj, result = fit_exogenous(log, table, training, proj_hidden=ex.proj_hidden,
                                             activation=ex.activation)
        report = result.report
        run.artifact("projection.ckpt", lambda p: rio.save_checkpoint(
            p, proj, {"activation": ex.activation, "kind": "projection"}))
    else:
        params, report = fit(log, training)
    run.artifact("params.ckpt", lambda p: rio.save_checkpoint(p, params, {"kind": "fitted"}))
    run.csv("fit_report.csv", ["epoch", "train_loss", "train_loss_best", "holdout_loss"],
            [(e.epoch, e.train_loss, e.train_loss_smoothed, e.holdout_loss) for e in report.epochs])
    m = holdout_metrics(params, log)
    J = params.n_goods
    run.csv("share_fit.csv", ["good_id", "observed_share", "implied_share"],
            [(j + 1, m["observed_share"][j], m["implied_share"][j]) for j in range(J)]
            + [(0, m["observed_share"][J], m["implied_share"][J])])
    run.csv("fit_summary.csv", ["metric", "value"],
            [("holdout_loss", report.holdout_loss), ("log_loss", m["log_loss"]),
             ("share_r2", m["share_r2"]), ("log_share_r2", m["log_share_r2"]),
             ("observed_engagement", m["observed_engagement"]),
             ("implied_engagement", m["implied_engagement"]), ("n_events", m["n_events"])])


def _arm_logs(run: Run) -> dict:
    folder = Path(run.args.arms) if run.args.arms else run.out / "arms"
    files = sorted(folder.glob("events_*.tsv")) if folder.is_dir() else []
    logs = {}
    for path in files:
        arm = rio.events_arm(path)
        if arm is None:
            raise ValueError(f"{path} has no '#arm' line")
        logs[arm] = run.events(path)
    if CONTROL not in logs:
        raise ValueError(f"no control group found in {folder}")
    if len(logs) < 2:
        raise ValueError("validation needs the control group and at least one treated arm")
    return logs


def cmd_validate(run: Run) -> None:
    params = run.checkpoint(_default(run.args, "checkpoint", run, "params.ckpt"))
    logs = _arm_logs(run)
    control = logs[CONTROL]
    arms = {a.arm_id: a for a in run.config.arms}
    missing = sorted(set(logs) - {CONTROL} - set(arms))
    if missing:
        raise ValueError(f"arms {missing} are not defined in the configuration")
    cats = run.config.world.category_labels()
    if len(cats) != params.n_goods:
        raise ValueError("world category labels do not match the checkpoint's catalog")
    if run.config.policies.imputation == "recmodel":
        recmodel, _ = fit_rec_model(control, run.config.recmodel)
        imputation = ImputedRecModelPolicy.calibrated(recmodel, control)
    else:
        imputation = ImputedUtilityPolicy.calibrated(params, control)
    logger.info("imputation %r", imputation)
    rows, rate_rows, emp_all, mod_all = [], [], [], []
    for i, arm_id in enumerate(sorted(set(logs) - {CONTROL})):
        arm = arms[arm_id]
        focal = arm.focal_goods(cats)
        emp = wald_diversion(logs[arm_id], control, focal, arm_id)
        mod = model_diversion(params, control, arm, imputation, as_generator([run.seed, i]), cats)
        for k, e, m in zip(emp.destinations.tolist(), emp.values.tolist(), mod.values.tolist()):
            rows.append((arm_id, rio.to_good_id(k), e, m))
        emp_all.append(emp.values)
        mod_all.append(mod.values)
        pages = impute_boosted_pages(control, arm.boost_vector(cats), imputation,
                                     as_generator([run.seed, i]))
        predicted = recommendation_rate_change(control, pages)
        realized = logs[arm_id].recommendation_rates() - control.recommendation_rates()
        rate_rows += [(arm_id, j + 1, predicted[j], realized[j]) for j in focal.tolist()]
    run.csv("diversion.csv", ["arm", "destination_id", "empirical", "model"], rows)
    run.csv("rate_change.csv", ["arm", "good_id", "predicted", "realized"], rate_rows)
    e, m = np.concatenate(emp_all), np.concatenate(mod_all)
    slope = float(np.polyfit(m, e, 1)[0]) if e.size > 1 else float("nan")
    pr = np.array([r[2] for r in rate_rows])
    rr = np.array([r[3] for r in rate_rows])
    run.csv("validation_summary.csv", ["metric", "value"],
            [("diversion_r2", corr_r2(e, m)), ("diversion_slope", slope),
             ("n_entries", e.size), ("rate_change_r2", corr_r2(rr, pr))])


def _policy_results(run: Run, params, log, kinds):
    pc = run.config.policies.policy_config()
    out = {}
    for kind in kinds:
        policy = make_policy(kind, log, params, pc)
        out[kind] = simulate_counterfactual(params, policy, log, rng=run.seed)
    return out


def _decomposition_rows(records):
    return [(r.good + 1, r.y0, r.y1, r.y0_targeted, r.y1_targeted, r.n_targeted, r.selection,
             r.exposure, r.targeting) for r in records]


DECOMP_HEADER = ["good_id", "y0", "y1", "y0_targeted", "y1_targeted", "n_targeted", "selection",
                 "exposure", "targeting"]


def cmd_counterfactual(run: Run) -> None:
    params = run.checkpoint(_default(run.args, "checkpoint", run, "params.ckpt"))
    log = run.events(_default(run.args, "events", run, "events.tsv"))
    kinds = list(run.args.policy.split(",")) if run.args.policy else list(run.config.policies.kinds)
    if "current" not in kinds:
        kinds.insert(0, "current")
    results = _policy_results(run, params, log, kinds)
    table = compare_policies(results, "current")
    run.csv("policies.csv", ["policy", "engagement", "gini", "hhi", "d_engagement_pct",
                             "d_gini_pct", "d_hhi_pct"],
            [(r["policy"], r["engagement"], r["gini"], r["hhi"], r["d_engagement_pct"],
              r["d_gini_pct"], r["d_hhi_pct"]) for r in table])
    summary = []
    for kind, res in results.items():
        records, _ = decompose_goods(params, res.log, n_placebo=run.config.policies.n_placebo,
                                     rng=as_generator([run.seed, 1]))
        for w in WEIGHTINGS:
            summary.append((kind, w) + aggregate_decomposition(records, w))
        if kind == "current":
            run.csv("decomposition.csv", DECOMP_HEADER, _decomposition_rows(records))
    run.csv("decomposition_summary.csv",
            ["policy", "weighting", "selection", "exposure", "targeting"], summary)
    inc = run.config.incrementality
    if inc.targets and inc.mode == "existing":
        res = incrementality(params, [t - 1 for t in inc.targets], "existing", log,
                             as_generator([run.seed, 2]))
        _incrementality_csv(run, res)


def _decompose_log(run: Run, params, log):
    if run.args.policy:
        policy = make_policy(run.args.policy, log, params, run.config.policies.policy_config())
        if not isinstance(policy, ReplayPolicy):
            log = simulate_counterfactual(params, policy, log, rng=run.seed).log
    return log


def cmd_decompose(run: Run) -> None:
    params = run.checkpoint(_default(run.args, "checkpoint", run, "params.ckpt"))
    log = _decompose_log(run, params, run.events(_default(run.args, "events", run, "events.tsv")))
    records, skipped = decompose_goods(params, log, n_placebo=run.config.policies.n_placebo,
                                       rng=as_generator([run.seed, 1]))
    if not records:
        raise ValueError("no good was ever recommended; decomposition undefined")
    run.csv("decomposition.csv", DECOMP_HEADER, _decomposition_rows(records))
    run.csv("decomposition_summary.csv", ["weighting", "selection", "exposure", "targeting"],
            [(w,) + aggregate_decomposition(records, w) for w in WEIGHTINGS])
    cats = run.config.world.category_labels()
    if len(cats) != params.n_goods:
        cats = np.zeros(params.n_goods, dtype=np.int64)
    summary = targeting_heterogeneity(records, log.choice_shares()[:-1], cats)
    run.csv("targeting_heterogeneity.csv", ["good_id", "targeting", "popularity_tercile",
                                            "category"],
            [(g + 1, r, t, c) for g, r, t, c in summary.rows()])
    if skipped:
        run.csv("never_recommended.csv", ["good_id"], [(g + 1,) for g in skipped])


def _incrementality_csv(run: Run, res) -> None:
    run.csv("incrementality.csv", ["mode", "targets", "delta", "delta_per_user_day",
                                   "engagement_with", "engagement_without", "n_user_days"],
            [(res.mode, " ".join(str(t + 1) for t in res.targets), res.delta,
              res.delta_per_user_day, res.engagement_with, res.engagement_without,
              res.n_user_days)])


def cmd_incrementality(run: Run) -> None:
    params = run.checkpoint(_default(run.args, "checkpoint", run, "params.ckpt"))
    log = run.events(_default(run.args, "events", run, "events.tsv"))
    inc = run.config.incrementality
    mode = run.args.mode or inc.mode
    targets = ([int(t) for t in run.args.targets.split(",") if t] if run.args.targets is not None
               else list(inc.targets))
    if any(t < 1 for t in targets):
        raise ValueError("target good ids must be >= 1")
    rng = as_generator([run.seed, 2])
    if mode == "existing":
        res = incrementality(params, [t - 1 for t in targets], "existing", log, rng)
    elif mode == "new":
        if not (run.args.embeddings and run.args.projection):
            raise ValueError("new-good incrementality needs --embeddings and --projection")
        table = rio.read_embedding_table(run.use(run.args.embeddings))
        proj, meta = rio.load_checkpoint(run.use(run.args.projection))
        if any(t - 1 < params.n_goods for t in targets):
            raise ValueError("new goods must have ids beyond the current catalog")
        new_B = project(table.rows_for([t - 1 for t in targets]), proj,
                        meta.get("activation", "tanh"))
        res = incrementality(params, [t - 1 for t in targets], "new", log, rng, new_embeddings=new_B)
    else:
        raise ValueError(f"unknown incrementality mode {mode!r}")
    _incrementality_csv(run, res)


def cmd_export_embeddings(run: Run) -> None:
    params = run.checkpoint(_default(run.args, "checkpoint", run, "params.ckpt"))
    J = params.n_goods
    if run.args.raw_dim:
        ex = run.config.exog
        rng = as_generator([run.seed, 3])
        extra = None
        if ex.new_goods:
            # new goods resemble randomly chosen catalog goods
            src = rng.integers(0, J, ex.new_goods)
            extra = params.B[src] + rng.normal(0.0, 0.1, (ex.new_goods, params.dim)) * params.B.std(0)
        table = synthetic_raw_embeddings(params.B, run.args.raw_dim, ex.noise_scale, rng, extra)
        run.artifact("raw_embeddings.csv", lambda p: rio.write_embedding_table(p, table))
    else:
        table = ExogenousEmbeddingTable(np.arange(J), params.B)
        run.artifact("embeddings.csv", lambda p: rio.write_embedding_table(p, table))


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "counterfactual": cmd_counterfactual,
    "decompose": cmd_decompose,
    "incrementality": cmd_incrementality,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recdemand",
                                     description="Recommendation-aware demand estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--out-dir", help="output directory (default: paths.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("fit", "counterfactual", "decompose", "incrementality"):
            p.add_argument("--events", help="event log (default: <out-dir>/events.tsv)")
        if name in ("validate", "counterfactual", "decompose", "incrementality", "export-embeddings"):
            p.add_argument("--checkpoint", help="parameter checkpoint (default: <out-dir>/params.ckpt)")
        if name in ("counterfactual", "decompose"):
            p.add_argument("--policy", help="policy kind(s), comma separated for counterfactual")
        if name == "validate":
            p.add_argument("--arms", help="directory of per-arm event files (default: <out-dir>/arms)")
        if name in ("fit", "incrementality"):
            p.add_argument("--embeddings", help="exogenous embedding table (CSV)")
        if name == "incrementality":
            p.add_argument("--targets", help="comma-separated good ids")
            p.add_argument("--mode", choices=("existing", "new"))
            p.add_argument("--projection", help="projection checkpoint for new goods")
        if name == "export-embeddings":
            p.add_argument("--raw-dim", type=int, help="write a synthetic raw table of this width")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            config = config.with_seed(args.seed)
        run = Run(args, config)
        COMMANDS[args.command](run)
        run.finish()
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
