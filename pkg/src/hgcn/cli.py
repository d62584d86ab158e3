"""Command-line entry point: ``hgcn {fetch,train,eval,gradcheck,inspect,ablate}``.

Results are written to files under ``--out``; progress and diagnostics go to
stderr. Every command exits 0 exactly when it succeeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .fixtures import fixture_dataset
from .graphs import SUPPORTED_DATASETS, DatasetError, fetch_dataset, make_folds
from .model import forward, init_params
from .objectives import total_objective
from .train import (TrainingAborted, ablation_table, accuracy, confusion_matrix,
                    cross_validate, ablation_suite, write_report)

logger = logging.getLogger("hgcn")


class CommandError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key = value run configuration")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--criterion", choices=["shared", "cstar"])
    p.add_argument("--ablation", choices=["A1", "A2", "A3"])
    p.add_argument("--folds", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="hgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", parents=[common], help="download a TUDataset archive")
    p.add_argument("name", help=f"one of {', '.join(SUPPORTED_DATASETS)}")
    p.add_argument("--dest", type=Path, default=Path("data"))
    p.add_argument("--url", default=None, help="archive base URL")

    sub.add_parser("train", parents=[common], help="k-fold cross-validation")

    p = sub.add_parser("eval", parents=[common], help="score a saved parameter file")
    p.add_argument("--params", type=Path, help="default <out>/params/fold_0.npz")
    p.add_argument("--fold", type=int, help="only the held-out graphs of this fold")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--fixture", choices=["4", "6", "9", "all"], default="all")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("inspect", parents=[common], help="dump routing for one graph")
    p.add_argument("--params", type=Path, help="default <out>/params/fold_0.npz")
    p.add_argument("--graph", type=int, required=True, help="0-based graph index")

    sub.add_parser("ablate", parents=[common], help="full model and ablations A1-A3")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, criterion=args.criterion, ablation=args.ablation,
                        folds=args.folds, threads=args.threads)


def _echo(cfg: RunConfig, out: Path, source: Path | None) -> None:
    """Original config text verbatim, then every resolved key (later lines win)."""
    out.mkdir(parents=True, exist_ok=True)
    original = source.read_text() if source else ""
    if original and not original.endswith("\n"):
        original += "\n"
    text = original + "# resolved: defaults and command-line overrides applied\n" + cfg.dump()
    (out / "config.echo").write_text(text)


def _load_params(cfg: RunConfig, path: Path | None, out: Path, input_dim: int, num_classes: int):
    path = path or out / "params" / "fold_0.npz"
    if not path.is_file():
        raise CommandError(f"parameter file {path} not found; run train first or pass --params")
    exp = cfg.experiment(input_dim, num_classes)
    params = init_params(exp.model, cfg.seed)
    with np.load(path) as data:
        params.load(dict(data))
    return exp, params


def cmd_fetch(args) -> int:
    kwargs = {"base_url": args.url} if args.url else {}
    target = fetch_dataset(args.name, args.dest, **kwargs)
    logger.info("dataset ready at %s", target)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = cfg.load_dataset()
    exp = cfg.experiment(ds.feature_dim, ds.num_classes)
    _echo(cfg, args.out, args.config)
    logger.info("%s: %d graphs, %d classes, %d folds", cfg.dataset, len(ds), ds.num_classes,
                cfg.folds)
    report = cross_validate(ds, cfg.folds, exp, cfg.seed, cfg.criterion, cfg.threads, cfg.hash)
    write_report(report, args.out, title=f"{cfg.dataset} ({cfg.ablation})")
    params_dir = args.out / "params"
    params_dir.mkdir(exist_ok=True)
    for i, snap in enumerate(report.fold_params):
        np.savez(params_dir / f"fold_{i}.npz", **snap)
    logger.info("accuracy %.2f +- %.2f at epoch %s", 100 * report.mean_accuracy,
                100 * report.std_accuracy, report.selected_epoch)
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ds = cfg.load_dataset()
    exp, params = _load_params(cfg, args.params, args.out, ds.feature_dim, ds.num_classes)
    graphs = ds.graphs
    scope = "all graphs"
    if args.fold is not None:
        plan = make_folds(ds, cfg.folds, cfg.seed)
        if not 0 <= args.fold < cfg.folds:
            raise CommandError(f"fold {args.fold} outside 0..{cfg.folds - 1}")
        graphs = [ds.graphs[i] for i in plan.split(args.fold)[1]]
        scope = f"held-out graphs of fold {args.fold}"
    acc, preds = accuracy(graphs, params, exp.model)
    cm = confusion_matrix([g.label for g in graphs], preds, ds.num_classes)
    args.out.mkdir(parents=True, exist_ok=True)
    lines = [f"scope: {scope} ({len(graphs)})", f"accuracy: {acc:.6f}",
             "confusion (rows = true class):"]
    lines += [" ".join(str(v) for v in row) for row in cm]
    (args.out / "eval.txt").write_text("\n".join(lines) + "\n")
    logger.info("accuracy %.4f on %s", acc, scope)
    return 0


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    ds = fixture_dataset()
    exp = cfg.experiment(ds.feature_dim, ds.num_classes)
    params = init_params(exp.model, cfg.seed)
    graphs = ds.graphs if args.fixture == "all" else \
        [g for g in ds.graphs if g.node_count == int(args.fixture)]
    worst: dict[str, float] = {}
    offending: set[str] = set()
    for g in graphs:
        def f(ps, g=g):
            return total_objective(g, forward(g, ps, exp.model), ps,
                                   exp.margin, exp.objective).total

        report = T.grad_check(f, params, args.step, args.tolerance)
        for name, err in report.max_rel_error.items():
            worst[_group(name)] = max(worst.get(_group(name), 0.0), err)
        offending.update(f"{n} ({g.node_count}-node)" for n in report.failures)
        logger.info("%d-node fixture: max relative error %.3e", g.node_count, report.worst)
    lines = [f"{grp}\t{err:.3e}" for grp, err in worst.items()]
    status = "PASS" if not offending else "FAIL"
    lines.append(f"{status} (tolerance {args.tolerance:g}, step {args.step:g}, R={exp.model.R})")
    lines += [f"offending: {name}" for name in sorted(offending)]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line, file=sys.stderr)
    return 0 if not offending else 1


def _matrix(m: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in np.atleast_2d(m))


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    ds = cfg.load_dataset()
    if not 0 <= args.graph < len(ds):
        raise CommandError(f"graph index {args.graph} outside 0..{len(ds) - 1}")
    exp, params = _load_params(cfg, args.params, args.out, ds.feature_dim, ds.num_classes)
    graph = ds.graphs[args.graph]
    fwd = forward(graph, params, exp.model)
    lengths = fwd.lengths
    order = np.argsort(-lengths, kind="stable")
    out = [f"graph {args.graph}: {graph.node_count} nodes, label {graph.label}, "
           f"predicted {fwd.prediction}"]
    for layer, lt in enumerate(fwd.trace.layers, start=1):
        out.append(f"\n[layer {layer}] routing weights C ({lt.weights.shape[0]} x "
                   f"{lt.weights.shape[1]}), rows sum to 1")
        out.append(_matrix(lt.weights.data))
        out.append(f"\n[layer {layer}] capsule lengths")
        out.append(" ".join(f"{v:.6f}" for v in np.linalg.norm(lt.poses.data, axis=1)))
        out.append(f"\n[layer {layer}] coarsened adjacency")
        out.append(_matrix(lt.adjacency.data))
    out.append("\n[class capsules] class length (predicted first)")
    out += [f"{int(c)} {lengths[c]:.6f}" for c in order]
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"inspect_graph_{args.graph}.txt"
    path.write_text("\n".join(out) + "\n")
    logger.info("wrote %s", path)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    ds = cfg.load_dataset()
    exp = cfg.experiment(ds.feature_dim, ds.num_classes)
    _echo(cfg, args.out, args.config)
    reports = ablation_suite(ds, cfg.folds, exp, cfg.seed, cfg.criterion, cfg.threads)
    for name, rep in reports.items():
        rep.config_hash = cfg.override(ablation="none" if name == "full" else name).hash
        write_report(rep, args.out / name, title=f"{cfg.dataset} {name}")
    (args.out / "ablation.tsv").write_text(ablation_table(reports))
    return 0


COMMANDS = {
    "fetch": cmd_fetch, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "inspect": cmd_inspect, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
