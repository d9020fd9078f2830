#!/usr/bin/env python3
"""
cli.py
Command-line surface: train, attribute, detect, lds, unlearn, bounds, corrupt, replay.

Every command writes its outputs into --out (default: [output] dir from the
config, else "runs") together with <command>_manifest.json and run.log.
"""

import argparse
import dataclasses
import json
import logging
import os
import time

import numpy as np

import attribution
import evaluation
import ihvp
import model_core
import unlearning
from config import (
    LISSA_STEP_FRACTION, RUN_LOG_NAME, SOLVER_NAMES, TOOLKIT_VERSION, ensure_dir,
)
from data_io import (
    load_checkpoint, load_run_config, load_train_test, read_corruption_spec, read_forget_set,
    read_manifest, save_checkpoint, write_corruption_spec, write_csv, write_delimited,
    write_jsonl, write_manifest, write_scores,
)
from data_models import (
    ConfigError, DataFormatError, DatasetSource, RunConfig, RunManifest, UsageError,
)
from logger_setup import FORMAT
from utils import atomic_write_text, safe_json_dumps, sha256_file

DEFAULT_BOUND_ITERATIONS = "1,5,10,50,200"


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems as UsageError so they map to exit code 1"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


class InfluenceCli:
    """Parses argv and dispatches to the cmd_* handlers"""

    def __init__(self, logger):
        self.logger = logger
        self.parser = self._build_parser()
        self._log_handlers = []
        self.argv = []

    # -------- PARSER --------

    def _build_parser(self):
        parser = _Parser(prog="influence", description="Influence-function data attribution for MLPs")
        parser.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
        parser.add_argument("--verbose", action="store_true", help="debug logging")
        parser.add_argument("--log-file", help="additional log file")
        sub = parser.add_subparsers(dest="command", parser_class=_Parser)

        def command(name, handler, help_text, data=True, checkpoint=False, solver=False):
            p = sub.add_parser(name, help=help_text)
            p.set_defaults(handler=handler)
            p.add_argument("--out", help="output directory")
            if data:
                p.add_argument("--config", help="INI run configuration")
                p.add_argument("--data", help="delimited training data (overrides [data])")
                p.add_argument("--label-column", default="label")
            if checkpoint:
                p.add_argument("--checkpoint", required=True)
            if solver:
                p.add_argument("--solver", choices=SOLVER_NAMES, help="overrides [solver] name")
                p.add_argument("--damping", type=float, help="overrides [solver] damping")
                p.add_argument("--solver-state", help="load/store fitted curvature at this path")
            return p

        command("train", self.cmd_train, "train a model from a config")

        p = command("attribute", self.cmd_attribute, "influence scores for test points",
                    checkpoint=True, solver=True)
        p.add_argument("--test-indices", type=_int_list)
        p.add_argument("--top-k", type=int)

        p = command("detect", self.cmd_detect, "rank training points by self-influence",
                    checkpoint=True, solver=True)
        p.add_argument("--corruption", help="corruption spec from the corrupt command")
        p.add_argument("--budgets", type=_float_list)

        p = command("lds", self.cmd_lds, "linear datamodeling score", solver=True)
        p.add_argument("--checkpoint")
        p.add_argument("--solvers", type=lambda s: [t for t in s.split(",") if t],
                       help="comma-separated solvers to evaluate")
        p.add_argument("--with-random", action="store_true", help="also score a random attribution")

        p = command("unlearn", self.cmd_unlearn, "one-shot Newton unlearning",
                    checkpoint=True, solver=True)
        p.add_argument("--forget", required=True)
        p.add_argument("--mode", choices=("remove", "relabel"), required=True)
        p.add_argument("--evaluate", action="store_true", help="compare against an exact retrain")

        p = command("bounds", self.cmd_bounds, "LiSSA and EK-FAC error bounds against a dense solve",
                    checkpoint=True, solver=True)
        p.add_argument("--iterations", type=_int_list, default=_int_list(DEFAULT_BOUND_ITERATIONS))
        p.add_argument("--alpha", type=float)
        p.add_argument("--test-index", type=int, default=0)

        p = command("corrupt", self.cmd_corrupt, "flip a fraction of training labels")
        p.add_argument("--fraction", type=float)
        p.add_argument("--seed", type=int)

        p = command("replay", self.cmd_replay, "re-execute a command from its manifest", data=False)
        p.add_argument("--manifest", required=True)
        return parser

    # -------- DISPATCH --------

    def run(self, argv):
        args = self.parser.parse_args(argv)
        if getattr(args, "handler", None) is None:
            raise UsageError("no command given; see --help")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        self.argv = list(argv)
        self.logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        if args.log_file:
            self._attach_log(args.log_file)
        try:
            args.handler(args)
        finally:
            for handler in self._log_handlers:
                self.logger.removeHandler(handler)
                handler.close()
            self._log_handlers = []

    def _attach_log(self, path):
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        handler = logging.FileHandler(path, encoding="utf-8")
        handler.setFormatter(logging.Formatter(FORMAT))
        self.logger.addHandler(handler)
        self._log_handlers.append(handler)

    # -------- SHARED LOADING --------

    def _load(self, args, num_classes=None):
        """Resolve the run config, training set and held-out set; record input hashes"""
        hashes = {}
        config = None
        if args.config:
            config = load_run_config(args.config)
            hashes[args.config] = sha256_file(args.config)
        if args.data:
            if not os.path.exists(args.data):
                raise DataFormatError("data file not found", path=args.data)
            source = DatasetSource("delimited", path=os.path.abspath(args.data),
                                   label_column=args.label_column, num_classes=num_classes or 0)
            hashes[args.data] = sha256_file(args.data)
            if config is None:
                config = RunConfig(source=source)
            else:
                config = dataclasses.replace(config, source=source, holdout=0)
        if config is None:
            raise UsageError("either --config or --data is required")
        for path in (config.source.images_path, config.source.labels_path):
            if path and os.path.exists(path):
                hashes[path] = sha256_file(path)

        solver = config.solver
        if getattr(args, "solver", None):
            solver = dataclasses.replace(solver, name=args.solver)
        if getattr(args, "damping", None) is not None:
            solver = dataclasses.replace(solver, damping=args.damping)
        config = dataclasses.replace(config, solver=solver)

        train_set, test_set = load_train_test(config)
        self.logger.info("Loaded %d training rows (d = %d, C = %d)%s", train_set.n, train_set.d,
                         train_set.num_classes, f", {test_set.n} held-out" if test_set else "")
        return config, train_set, test_set, hashes

    def _load_checkpoint(self, args, hashes):
        params = load_checkpoint(args.checkpoint)
        hashes[args.checkpoint] = sha256_file(args.checkpoint)
        return params

    def _check_compatible(self, params, dataset):
        if dataset.d != params.spec.input_dim:
            raise DataFormatError(f"data has d = {dataset.d}, checkpoint expects {params.spec.input_dim}")
        if dataset.labels.max() >= params.spec.num_classes:
            raise DataFormatError("data labels exceed the checkpoint's output width")

    def _out_dir(self, args, config=None):
        out = args.out or (config.output_dir if config is not None else "runs")
        ensure_dir(out)
        if not args.log_file:
            self._attach_log(os.path.join(out, RUN_LOG_NAME))
        return out

    def _seeds(self, config):
        return {
            "train": config.train.seed,
            "solver": config.solver.seed,
            "lds_subsets": config.experiment.lds.seed,
            "lds_test": config.experiment.lds.test_seed,
            "corruption": config.experiment.corruption_seed,
        }

    def _finish(self, command, out, config, hashes, outputs, started, seeds=None):
        manifest = RunManifest(
            command=command,
            config=json.loads(safe_json_dumps(config)) if config is not None else {},
            seeds=seeds if seeds is not None else (self._seeds(config) if config is not None else {}),
            input_hashes=hashes,
            outputs=outputs,
            argv=self.argv,
            wall_clock_seconds=round(time.time() - started, 3),
            toolkit_version=TOOLKIT_VERSION,
        )
        path = os.path.join(out, f"{command}_manifest.json")
        write_manifest(path, manifest)
        self.logger.info("%s finished in %.1fs; manifest %s", command, manifest.wall_clock_seconds, path)
        return path

    # -------- COMMANDS --------

    def cmd_train(self, args):
        started = time.time()
        config, train_set, test_set, hashes = self._load(args)
        out = self._out_dir(args, config)
        spec = config.mlp_spec(train_set.d, train_set.num_classes)
        params = model_core.train(spec, train_set, config.train)
        path = os.path.join(out, "model.bin")
        save_checkpoint(path, params)
        metrics = {
            "train_accuracy": model_core.accuracy(params, train_set),
            "train_risk": params.provenance.get("final_risk"),
        }
        if test_set is not None:
            metrics["heldout_accuracy"] = model_core.accuracy(params, test_set)
            metrics["heldout_loss"] = model_core.empirical_risk(params, test_set)
        metrics_path = os.path.join(out, "train_metrics.json")
        atomic_write_text(metrics_path, safe_json_dumps(metrics, indent=2) + "\n")
        self.logger.info("Train accuracy %.4f", metrics["train_accuracy"])
        self._finish("train", out, config, hashes, {"checkpoint": path, "metrics": metrics_path}, started)

    def cmd_attribute(self, args):
        started = time.time()
        params = load_checkpoint(args.checkpoint)
        config, train_set, test_set, hashes = self._load(args, params.spec.num_classes)
        hashes[args.checkpoint] = sha256_file(args.checkpoint)
        self._check_compatible(params, train_set)
        out = self._out_dir(args, config)
        pool = test_set if test_set is not None else train_set
        test_indices = args.test_indices or list(config.experiment.test_indices) or [0]
        bad = [t for t in test_indices if not 0 <= t < pool.n]
        if bad:
            raise UsageError(f"test indices out of range for {pool.n} test rows: {bad}")
        top_k = args.top_k or config.experiment.top_k
        if top_k < 1:
            raise UsageError("--top-k must be positive")

        solver = ihvp.build_solver(params, train_set, config.solver, self.logger, args.solver_state)
        records, rows = [], []
        for t in test_indices:
            scores = attribution.influence_batch(solver, params, pool[t], train_set, jobs=args.jobs)
            records.extend(attribution.score_records(scores, t, solver))
            positive, negative = attribution.top_influences(scores, top_k)
            rows.extend((t, "positive", r + 1, i, scores[i]) for r, i in enumerate(positive))
            rows.extend((t, "negative", r + 1, i, scores[i]) for r, i in enumerate(negative))
            self.logger.info("Test %d: most positive train index %d (%.4g), most negative %d (%.4g)",
                             t, positive[0], scores[positive[0]], negative[0], scores[negative[0]])
        scores_path = os.path.join(out, "scores.jsonl")
        top_path = os.path.join(out, "top_influences.csv")
        write_scores(scores_path, records)
        write_csv(top_path, ["test_index", "direction", "rank", "train_index", "score"], rows)
        self._finish("attribute", out, config, hashes, {"scores": scores_path, "top_influences": top_path},
                     started)

    def cmd_detect(self, args):
        started = time.time()
        params = load_checkpoint(args.checkpoint)
        config, train_set, _, hashes = self._load(args, params.spec.num_classes)
        hashes[args.checkpoint] = sha256_file(args.checkpoint)
        self._check_compatible(params, train_set)
        budgets = args.budgets or list(config.experiment.budgets)
        for b in budgets:
            if not 0.0 < b <= 1.0:
                raise ConfigError(f"inspection budget must lie in (0, 1], got {b}")
        spec = None
        if args.corruption:
            spec = read_corruption_spec(args.corruption)
            hashes[args.corruption] = sha256_file(args.corruption)
        out = self._out_dir(args, config)

        solver = ihvp.build_solver(params, train_set, config.solver, self.logger, args.solver_state)
        scores = attribution.self_influence_scores(solver, params, train_set, jobs=args.jobs)
        ranking = attribution.descending_order(scores)
        ranking_path = os.path.join(out, "ranking.csv")
        write_csv(ranking_path, ["rank", "train_index", "self_influence"],
                  ((r + 1, int(i), scores[i]) for r, i in enumerate(ranking)))
        outputs = {"ranking": ranking_path}

        if spec is not None:
            rankings = {
                "self_influence": ranking,
                "loss": attribution.rank_by_loss(params, train_set),
                "random": evaluation.random_ranking(train_set.n, spec.seed),
            }
            rows = []
            for method, order in rankings.items():
                for budget, recall in evaluation.detection_curve(order, spec, budgets):
                    rows.append((method, budget, recall))
                    self.logger.info("%s: recall %.3f at budget %.2f", method, recall, budget)
            curve_path = os.path.join(out, "detection.csv")
            write_csv(curve_path, ["method", "budget", "recall"], rows)
            outputs["detection"] = curve_path
        self._finish("detect", out, config, hashes, outputs, started)

    def cmd_lds(self, args):
        started = time.time()
        config, train_set, test_set, hashes = self._load(args)
        if test_set is None:
            raise UsageError("LDS needs a held-out set: add [test_data] or set holdout in [data]")
        out = self._out_dir(args, config)
        spec = config.mlp_spec(train_set.d, train_set.num_classes)
        outputs = {}
        if args.checkpoint:
            params = self._load_checkpoint(args, hashes)
            self._check_compatible(params, train_set)
        else:
            params = model_core.train(spec, train_set, config.train)
            outputs["checkpoint"] = os.path.join(out, "model.bin")
            save_checkpoint(outputs["checkpoint"], params)
        spec = params.spec

        lds_cfg = config.experiment.lds
        masks = evaluation.sample_subsets(train_set.n, lds_cfg.alpha, lds_cfg.num_subsets, lds_cfg.seed)
        runs = evaluation.run_subsets(spec, train_set, test_set, masks, config.train, jobs=args.jobs,
                                      cache_dir=os.path.join(out, "subsets"), logger=self.logger)
        losses_path = os.path.join(out, "subset_losses.jsonl")
        write_jsonl(losses_path, ({"subset": r.index, "seed": r.seed, "size": int(r.mask.sum()),
                                   "losses": r.losses} for r in runs))
        test_indices = evaluation.sample_test_points(test_set.n, lds_cfg)

        solver_names = args.solvers or [config.solver.name]
        unknown = [s for s in solver_names if s not in SOLVER_NAMES]
        if unknown:
            raise UsageError(f"unknown solver(s) {unknown}")
        results = {}
        for name in solver_names:
            solver = ihvp.build_solver(params, train_set, dataclasses.replace(config.solver, name=name),
                                       self.logger)
            results[name] = (solver.damping, evaluation.lds(
                test_set, lambda z, s=solver: attribution.influence_batch(s, params, z, train_set, jobs=args.jobs),
                runs, lds_cfg, test_indices, self.logger))
        if args.with_random:
            results["random"] = (0.0, evaluation.lds(
                test_set, evaluation.random_attribution(train_set.n, lds_cfg.seed), runs, lds_cfg,
                test_indices, self.logger))

        per_point_path = os.path.join(out, "lds.jsonl")
        write_jsonl(per_point_path, ({"method": name, "test_index": int(t), "lds": float(v)}
                                     for name, (_, res) in results.items()
                                     for t, v in zip(res.test_indices, res.per_point)))
        summary_path = os.path.join(out, "lds_summary.csv")
        write_csv(summary_path, ["method", "damping", "mean_lds", "test_points", "subsets"],
                  ((name, damping, res.mean, len(res.test_indices), len(runs))
                   for name, (damping, res) in results.items()))
        outputs.update({"subset_losses": losses_path, "lds": per_point_path, "summary": summary_path})
        self._finish("lds", out, config, hashes, outputs, started)

    def cmd_unlearn(self, args):
        started = time.time()
        params = load_checkpoint(args.checkpoint)
        config, train_set, test_set, hashes = self._load(args, params.spec.num_classes)
        hashes[args.checkpoint] = sha256_file(args.checkpoint)
        self._check_compatible(params, train_set)
        forget = read_forget_set(args.forget)
        hashes[args.forget] = sha256_file(args.forget)
        forget.validate(train_set, args.mode)
        out = self._out_dir(args, config)

        solver = ihvp.build_solver(params, train_set, config.solver, self.logger, args.solver_state)
        if args.mode == "remove":
            updated = unlearning.unlearn_remove(solver, params, train_set, forget, self.logger)
        else:
            updated = unlearning.unlearn_relabel(solver, params, train_set, forget, self.logger)
        path = os.path.join(out, "model_unlearned.bin")
        save_checkpoint(path, updated)

        report = dict(updated.provenance["unlearning"])
        if test_set is not None:
            report["heldout_loss_before"] = model_core.empirical_risk(params, test_set)
            report["heldout_loss_after"] = model_core.empirical_risk(updated, test_set)
            self.logger.info("Held-out loss %.6f -> %.6f", report["heldout_loss_before"],
                             report["heldout_loss_after"])
        if args.evaluate:
            report["evaluation"] = unlearning.evaluate_unlearning(
                params.spec, train_set, config.train, params, updated, forget, args.mode,
                test_set, self.logger)
        report_path = os.path.join(out, "unlearn.json")
        atomic_write_text(report_path, safe_json_dumps(report, indent=2) + "\n")
        self._finish("unlearn", out, config, hashes, {"checkpoint": path, "report": report_path}, started)

    def cmd_bounds(self, args):
        started = time.time()
        params = load_checkpoint(args.checkpoint)
        config, train_set, test_set, hashes = self._load(args, params.spec.num_classes)
        hashes[args.checkpoint] = sha256_file(args.checkpoint)
        self._check_compatible(params, train_set)
        out = self._out_dir(args, config)
        damping = config.solver.damping
        pool = test_set if test_set is not None else train_set
        if not 0 <= args.test_index < pool.n:
            raise UsageError(f"--test-index {args.test_index} out of range")
        v = model_core.grad(params, pool[args.test_index])
        vnorm = float(np.linalg.norm(v))

        G = model_core.dense_gnh(params, train_set)
        exact = ihvp.solve_dense(G, damping, v)
        eigenvalues = np.linalg.eigvalsh(G)
        alpha = args.alpha or LISSA_STEP_FRACTION / (float(eigenvalues.max()) + damping)
        opnorm = float(np.max(np.abs(1.0 - alpha * (eigenvalues + damping))))
        rows = []
        for J in args.iterations:
            approx = ihvp.lissa_solve(params, train_set, v, ihvp.LissaConfig(
                damping, J, alpha, seed=config.solver.seed), lam_max=float(eigenvalues.max()))
            err = float(np.linalg.norm(approx - exact))
            bound = ihvp.lissa_error_bound(alpha, damping, opnorm, J, vnorm)
            rows.append(("lissa", J, err, bound))
            self.logger.info("LiSSA J=%d: error %.3e, bound %.3e", J, err, bound)

        kfac_state = ihvp.fit_kfac(params, train_set, config.solver.seed, config.solver.fisher_type)
        ekfac_state = ihvp.fit_ekfac(params, train_set, config.solver.seed, config.solver.fisher_type, kfac_state)
        kfac_err = float(np.linalg.norm(ihvp.apply_kfac_inverse(kfac_state, damping, v) - exact))
        ekfac_err = float(np.linalg.norm(ihvp.apply_ekfac_inverse(ekfac_state, damping, v) - exact))
        Q = ihvp.kronecker_basis(ekfac_state)
        lambda_true = ihvp.eigen_spectrum_in_basis(model_core.block_diagonal(G, params), Q)
        lambda_ek = np.concatenate([lam.reshape(-1, order="F") for lam in ekfac_state.eigenvalues])
        ek_bound = ihvp.ekfac_error_bound(np.clip(lambda_true, 0.0, None), lambda_ek, damping, vnorm)
        rows.append(("kfac", "", kfac_err, ""))
        rows.append(("ekfac", "", ekfac_err, ek_bound))
        self.logger.info("K-FAC error %.3e, EK-FAC error %.3e (eigenvalue bound %.3e)",
                         kfac_err, ekfac_err, ek_bound)

        path = os.path.join(out, "bounds.csv")
        write_csv(path, ["method", "iterations", "error", "bound"], rows)
        self._finish("bounds", out, config, hashes, {"bounds": path}, started)

    def cmd_corrupt(self, args):
        started = time.time()
        config, train_set, test_set, hashes = self._load(args)
        out = self._out_dir(args, config)
        fraction = args.fraction if args.fraction is not None else config.experiment.corruption_fraction
        seed = args.seed if args.seed is not None else config.experiment.corruption_seed
        corrupted, spec = evaluation.corrupt_labels(train_set, fraction, seed)
        data_path = os.path.join(out, "corrupted.csv")
        spec_path = os.path.join(out, "corruption.json")
        write_delimited(data_path, corrupted, args.label_column)
        write_corruption_spec(spec_path, spec)
        outputs = {"data": data_path, "corruption": spec_path}
        if test_set is not None:
            outputs["heldout"] = os.path.join(out, "heldout.csv")
            write_delimited(outputs["heldout"], test_set, args.label_column)
        self.logger.info("Flipped %d of %d labels (seed %d)", len(spec.flips), train_set.n, seed)
        seeds = dict(self._seeds(config), corruption=seed)
        self._finish("corrupt", out, config, hashes, outputs, started, seeds)

    def cmd_replay(self, args):
        manifest = read_manifest(args.manifest)
        argv = list(manifest.argv)
        if not argv:
            raise UsageError(f"{args.manifest} records no command line")
        if args.out:
            argv += ["--out", args.out]
        self.logger.info("Replaying %s from %s", manifest.command, args.manifest)
        replay = InfluenceCli(self.logger)
        replay.run(argv)

