"""Command-line entry point: ``nodeinject <subcommand> [options]``.

Exit codes: 0 ok, 1 unexpected failure, 2 bad configuration, 3 missing or
unreadable input.  Outputs are staged and only moved into ``--out`` when the
command succeeds, so a failed run leaves nothing behind.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

from . import a2c, harness
from .attacker import GREEDY, SAMPLE, AttackerPolicies
from .checkpoint import CheckpointError
from .graph import GraphError, ParseError
from .victim import ConfigError, VictimOracle, load_victim, save_victim, serve_oracle, train_victim

log = logging.getLogger("nodeinject")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INPUT = 0, 1, 2, 3


class InputError(RuntimeError):
    pass


@contextlib.contextmanager
def staged(out: Path):
    """Yield a scratch directory whose files land in ``out`` only on success."""
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        if created and not any(out.iterdir()):
            out.rmdir()
        raise
    for f in sorted(tmp.iterdir()):
        f.replace(out / f.name)
    tmp.rmdir()


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_config(args) -> harness.ExperimentConfig:
    if args.config:
        if not Path(args.config).is_file():
            raise InputError(f"config file not found: {args.config}")
        cfg = harness.ExperimentConfig.load(args.config)
    else:
        cfg = harness.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.evaluation.seeds = [args.seed]
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _dataset(cfg):
    try:
        return harness.prepare_dataset(cfg.dataset)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def _victim(cfg, args):
    path = Path(args.victim or Path(cfg.out_dir) / "victim.ckpt")
    if not path.is_file():
        raise InputError(f"victim checkpoint not found: {path}")
    return load_victim(path)


def _attacker(cfg, args):
    path = Path(args.attacker or Path(cfg.out_dir) / "attacker.ckpt")
    if not path.is_file():
        raise InputError(f"attacker checkpoint not found: {path}")
    pol, _ = AttackerPolicies.load(path)
    return pol


def _oracle(cfg, args):
    g, split = _dataset(cfg)
    model = _victim(cfg, args)
    if model.n_features != g.n_features or model.n_classes != g.n_classes:
        raise ConfigError("victim checkpoint does not match the dataset shape")
    return g, split, VictimOracle(model, g)


# ---------------------------------------------------------------- subcommands


def cmd_train_victim(cfg, args, out: Path) -> None:
    g, split = _dataset(cfg)
    model, info = train_victim(g, split, cfg.victim)
    save_victim(out / "victim.ckpt", model, cfg.victim)
    _write(out / "victim_metrics.json", _json(info["metrics"]))
    cfg.dump(out / "config.json")
    log.info("test misclassification %.3f", info["metrics"]["test_misclassification"])


def cmd_attack(cfg, args, out: Path) -> None:
    g, split, oracle = _oracle(cfg, args)
    state_path = Path(cfg.out_dir) / "train_state.ckpt"
    if args.resume:
        if not state_path.is_file():
            raise InputError(f"no training state to resume: {state_path}")
        pol, opt, st, tcfg, budgets = a2c.load_training_state(state_path)
        tcfg.max_epochs = cfg.attack.train.max_epochs
        harness.check_feature_mode(g, pol)
    else:
        pol = harness.default_policy(g, cfg.attack)
        opt, st, tcfg, budgets = None, None, cfg.attack.train, cfg.attack.budgets

    def checkpoint(state, live, optimizer):
        a2c.save_training_state(out / "train_state.ckpt", live, optimizer, state, tcfg, budgets)

    best, st = a2c.train_attacker(tcfg, oracle, split, budgets, policies=pol, state=st, optimizer=opt,
                                  on_epoch=checkpoint)
    best.save(out / "attacker.ckpt", {"best_epoch": st.best_epoch, "best_rate": st.best_rate})
    a2c.write_log_csv(out / "train_log.csv", st.log)
    cfg.dump(out / "config.json")


def cmd_evaluate(cfg, args, out: Path) -> None:
    g, split, oracle = _oracle(cfg, args)
    pol = _attacker(cfg, args)
    targets = harness.eval_targets(split, cfg.evaluation)
    mode = SAMPLE if args.sample else cfg.evaluation.mode
    rep = harness.AttackReport("G2A2C")
    for s in cfg.evaluation.seeds:
        rep.runs[s] = harness.attack_targets(pol, oracle, targets, cfg.attack.budgets, s, mode,
                                             cfg.attack.train.gamma, cfg.attack.train.bonus, args.threads)
    clean = harness.AttackReport("Clean", {s: harness.clean_records(oracle, targets) for s in cfg.evaluation.seeds})
    _write(out / "report_G2A2C.csv", rep.to_csv())
    _write(out / "summary.md", harness.markdown_table([clean, rep]))


def cmd_baselines(cfg, args, out: Path) -> None:
    g, split, oracle = _oracle(cfg, args)
    targets = harness.eval_targets(split, cfg.evaluation)
    reports = []
    for method in (harness.RANDOM_INJECT, harness.GREEDY_PROBE):
        rep = harness.AttackReport(method)
        for s in cfg.evaluation.seeds:
            rep.runs[s] = harness.baseline_targets(method, oracle, targets, cfg.attack.budgets, s,
                                                   cfg.attack.policy.k, args.threads)
        _write(out / f"report_{method}.csv", rep.to_csv())
        reports.append(rep)
    _write(out / "baselines.md", harness.markdown_table(reports))


def cmd_sweep(cfg, args, out: Path) -> None:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {args.values}") from exc
    g, split, oracle = _oracle(cfg, args)
    pol = _attacker(cfg, args)
    targets = harness.eval_targets(split, cfg.evaluation)
    mode = SAMPLE if args.sample else cfg.evaluation.mode
    epochs = cfg.evaluation.sweep_tune_epochs if args.tune_epochs is None else args.tune_epochs
    tune = dataclasses.replace(cfg.attack.train, max_epochs=epochs) if epochs > 0 else None
    reports = harness.sweep(pol, oracle, targets, cfg.attack.budgets, args.axis, values,
                            cfg.evaluation.seeds, mode, args.threads, tune, split)
    _write(out / "sweep.csv", harness.sweep_csv(args.axis, values, reports))
    mono = harness.monotone([r.mean for r in reports])
    _write(out / "sweep.md", harness.markdown_table(reports)
           + f"\nnon-decreasing in {args.axis}: {'yes' if mono else 'no'}\n")


def cmd_export_embeddings(cfg, args, out: Path) -> None:
    if not args.diagnostics:
        raise ConfigError("export-embeddings needs --diagnostics (offline, non-attack mode)")
    g, split, oracle = _oracle(cfg, args)
    pol = _attacker(cfg, args)
    targets = [int(t) for t in args.targets.split(",") if t.strip()]
    for t in targets:
        if not 0 <= t < g.n_nodes:
            raise ConfigError(f"target {t} outside the graph")
    parts = []
    for i, t in enumerate(targets):
        rec = harness.attack_targets(pol, oracle, [t], cfg.attack.budgets, cfg.evaluation.seeds[0], GREEDY)[0]
        delta = rec.delta if rec.delta is not None else harness.GraphDelta(g, cfg.attack.budgets)
        oracle.enable_diagnostics(True)
        try:
            text = harness.export_embeddings(oracle, t, delta)
        finally:
            oracle.enable_diagnostics(False)
        lines = text.splitlines(keepends=True)
        if i == 0:
            parts.append("target_id," + lines[0])
        parts.extend(f"{t}," + ln for ln in lines[1:])
    _write(out / "embeddings.csv", "".join(parts))


def cmd_serve_oracle(cfg, args, out: Path) -> None:
    g, split, oracle = _oracle(cfg, args)
    server = serve_oracle(oracle, args.host, args.port)
    host, port = server.server_address[:2]
    print(json.dumps({"host": host, "port": port}), flush=True)
    try:
        deadline = time.time() + args.max_seconds if args.max_seconds else None
        while deadline is None or time.time() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()


COMMANDS = {
    "train-victim": cmd_train_victim,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "baselines": cmd_baselines,
    "export-embeddings": cmd_export_embeddings,
    "serve-oracle": cmd_serve_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="reseed victim, attacker and evaluation")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for evaluation")
    common.add_argument("--victim", help="victim checkpoint (default OUT/victim.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nodeinject", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-victim", parents=[common], help="train the victim GCN")
    a = sub.add_parser("attack", parents=[common], help="train the attacker")
    a.add_argument("--resume", action="store_true", help="continue from OUT/train_state.ckpt")
    for name in ("evaluate", "sweep", "export-embeddings"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--attacker", help="attacker checkpoint (default OUT/attacker.ckpt)")
        if name != "export-embeddings":
            s.add_argument("--sample", action="store_true", help="sampled instead of greedy actions")
    sub.choices["sweep"].add_argument("--axis", required=True,
                                      choices=["beta_n", "beta_e", "beta_f", "n_nodes", "n_edges", "feature_shift"])
    sub.choices["sweep"].add_argument("--values", required=True, help="comma-separated budget values")
    sub.choices["sweep"].add_argument("--tune-epochs", type=int, default=None,
                                      help="fine-tune the attacker at each value (0 = evaluate as trained)")
    sub.choices["export-embeddings"].add_argument("--targets", required=True, help="comma-separated node ids")
    sub.choices["export-embeddings"].add_argument("--diagnostics", action="store_true",
                                                  help="enable the offline diagnostic path")
    sub.add_parser("baselines", parents=[common], help="RandomInject and GreedyProbe reports")
    s = sub.add_parser("serve-oracle", parents=[common], help="expose the victim as a JSON-lines TCP oracle")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--max-seconds", type=float, default=0.0, help="stop after this long (0 = until interrupted)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = Path(cfg.out_dir)
        if args.command == "serve-oracle":
            cmd_serve_oracle(cfg, args, out)
            return EXIT_OK
        with staged(out) as tmp:
            COMMANDS[args.command](cfg, args, tmp)
        return EXIT_OK
    except (InputError, FileNotFoundError, CheckpointError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, GraphError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
