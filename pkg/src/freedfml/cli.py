"""Command line entry point: ``freedfml <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bell, diagnostics, five, nets, pipeline, replay, tasks
from . import pool as pool_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (five.InversionError, bell.AlignmentError, replay.ReplayError, pipeline.NumericAbort)

log = logging.getLogger("freedfml")


def _config(args):
    cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "arm", None) is not None:
        changes["arm"] = args.arm
    return cfg.replace(**changes) if changes else cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pool(args, cfg, universe, out):
    directory = Path(args.pool) if getattr(args, "pool", None) else out / "pool"
    if (directory / "manifest.tsv").exists():
        return pool_mod.ModelPool.load(directory)
    log.info("no pool at %s; pre-training one", directory)
    meta = pipeline.build_pool(universe, cfg)
    meta.save(directory)
    return meta


def cmd_pretrain(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(pool_seed=args.seed)
    out = _out(args)
    universe = pipeline.build_universe(cfg)
    universe.save(out / "universe.txt")
    meta = pipeline.build_pool(universe, cfg)
    meta.save(out / "pool")
    (out / "config.txt").write_text(pipeline.dump_config(cfg))
    accs = [i.train_acc for i in meta.info]
    print(f"pool: {len(meta)} models, mean train accuracy {np.mean(accs):.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    out = _out(args)
    universe = pipeline.build_universe(cfg)
    meta = _pool(args, cfg, universe, out)
    # the training loop must never read class data
    universe.trap(*tasks.SPLITS)
    state = pipeline.train(meta, cfg)
    universe.untrap()
    pipeline.write_metrics(state.metrics, out / "metrics.csv")
    pipeline.write_alignment(state.alignment, out / "alignment.csv")
    nets.save_checkpoint(state.learner, out / "learner.net")
    nets.save_checkpoint(state.generator, out / "generator.net")
    (out / "config.txt").write_text(pipeline.dump_config(cfg))
    if cfg.arm != "random":
        pipeline.write_features(state, meta, cfg, out / "features.tsv")
    print(f"{cfg.arm}: {len(state.metrics)} epochs, "
          f"{state.inversion_backward_passes} inversion backward passes")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args)
    universe = pipeline.build_universe(cfg)
    if cfg.arm == "random":
        learner = nets.init_network(cfg.learner_spec, [cfg.seed, 11])
    else:
        path = Path(args.learner) if args.learner else out / "learner.net"
        learner = nets.load_checkpoint(path)
        if learner.spec != cfg.learner_spec:
            raise pipeline.ConfigError(f"checkpoint {path} has widths {learner.spec.widths}, "
                                       f"config expects {cfg.learner_spec.widths}")
    reports = [pipeline.meta_test(learner, universe, cfg, shot, fresh_learner=cfg.arm == "random")
               for shot in pipeline._ints(cfg.eval_shots)]
    pipeline.write_eval(reports, out / "eval.tsv")
    for r in reports:
        print(f"{r.arm} seed={r.seed} {r.way}-way {r.shot}-shot: {100 * r.mean:.2f} +- {100 * r.ci95:.2f}")
    return EXIT_OK


def cmd_theorem1(args):
    rows = diagnostics.theorem1_report()
    ok = True
    print("seed\tslope\tquadratic_residual\tsym_correction_rel_err")
    for r in rows:
        print(f"{r['seed']}\t{r['slope']:.6f}\t{r['quadratic_max_residual']:.3e}\t"
              f"{r['symmetric_correction_rel_err']:.3e}")
        ok &= abs(r["slope"] - 2.0) <= 0.1 and r["quadratic_max_residual"] < 1e-12
    if args.out:
        out = _out(args)
        with (out / "theorem1.tsv").open("w") as fh:
            fh.write("seed\talpha\tresidual\n")
            for r in rows:
                for row in r["cubic_rows"]:
                    fh.write(f"{r['seed']}\t{row['alpha']!r}\t{row['residual']!r}\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_gradcheck(args):
    rows = diagnostics.gradcheck_all(args.instances)
    ok = True
    print("case\tinstances\tmax_rel_error")
    for r in rows:
        print(f"{r['case']}\t{r['instances']}\t{r['max_rel_error']:.3e}")
        ok &= r["max_rel_error"] < 1e-4
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_alignment(args):
    cfg = _config(args)
    out = _out(args)
    universe = pipeline.build_universe(cfg)
    meta = _pool(args, cfg, universe, out)
    path = out / "alignment.csv"
    if path.exists():
        path.unlink()
    for arm in ("free", "erm"):
        state = pipeline.train(meta, cfg.replace(arm=arm))
        pipeline.write_alignment(state.alignment, path)
        late = [rec.mean for _, rec in state.alignment[-max(1, len(state.alignment) // 5):]]
        print(f"{arm}: late-window mean inner product {np.median(late):.6g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="freedfml", description="Data-free meta-learning at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, arm=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        sp.add_argument("--out", default="out", help="output directory")
        if arm:
            sp.add_argument("--arm", help="one of " + ", ".join(pipeline.ARMS))

    sp = sub.add_parser("pretrain", help="build the universe and the pre-trained model pool")
    common(sp, arm=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="meta-train one arm")
    common(sp)
    sp.add_argument("--pool", help="pool directory (default <out>/pool)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="meta-test a trained learner")
    common(sp)
    sp.add_argument("--learner", help="learner checkpoint (default <out>/learner.net)")
    sp.set_defaults(func=cmd_eval)

    diag = sub.add_parser("diag", help="numerical diagnostics")
    dsub = diag.add_subparsers(dest="diag", required=True)
    sp = dsub.add_parser("theorem1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_theorem1)
    sp = dsub.add_parser("gradcheck")
    sp.add_argument("--instances", type=int, default=50)
    sp.set_defaults(func=cmd_gradcheck)
    sp = dsub.add_parser("alignment")
    common(sp, arm=False)
    sp.add_argument("--pool", help="pool directory (default <out>/pool)")
    sp.set_defaults(func=cmd_alignment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pipeline.ConfigError, pool_mod.PoolError, tasks.UniverseError, nets.CheckpointError,
            OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
