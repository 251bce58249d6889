"""Command-line front end.

Every subcommand resolves its parameters as defaults, then the matching
section of an optional INI config file, then command-line flags, writes the
resolved values to ``resolved_config.ini`` in the output directory and puts
all outputs there. Timestamps only ever go to ``run.log``.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path


from . import diffusion as dif
from . import harness, linkpred
from .fairness import UndefinedMetricError, bound_params_from_model, build_report, delta_sp
from .graph import (GraphFormatError, GraphValidationError, SplitSizeError, read_graph, read_split,
                    save_graph, save_split, sbm_generate, split_edges)
from .weights import WeightFileError

log = logging.getLogger("fairgraph")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_INPUT = 4
EXIT_DIVERGED = 5
EXIT_UNDEFINED_METRIC = 6


class ConfigError(ValueError):
    pass


# Each default's type drives parsing of file values and flags.
_LP_KEYS = {
    "lam": 0.0, "learning_rate": 1e-2, "epochs": 300, "batch_size": 64, "negative_ratio": 1.0,
    "hidden": 32, "activation": "identity", "self_loops": True,
}
_DIFF_KEYS = {
    "lam": 0.0, "epochs": 10000, "learning_rate": 3e-3, "T": 3, "s": 0.008, "batch_size": 512,
    "hidden": 32, "s_hidden": 8, "edge_hidden": 32, "layers": 2,
}
COMMANDS: dict[str, dict] = {
    "gen-sbm": {"group_sizes": "100,100,100", "intra_p": 0.3, "inter_p": 0.05, "feature_dim": 32,
                "feature_shift": 0.35, "base_rate": 0.1},
    "split": {"graph": "", "train_frac": 0.8},
    "train-lp": {"graph": "", "split": "", **_LP_KEYS},
    "eval-lp": {"graph": "", "split": "", "weights": ""},
    "bound": {"graph": "", "split": "", "weights": ""},
    "train-diff": {"graph": "", **_DIFF_KEYS},
    "sample": {"graph": "", "weights": "", "samples": 1, "n_nodes": 0, "s": 0.008},
    "study": {"graph": "", "split": "", "weights": "", "samples": 10, "s": 0.008, "train_frac": 0.8,
              **{f"lp_{k}": v for k, v in _LP_KEYS.items() if k != "lam"}},
    "stats": {"graph": "", "other": ""},
}
COMMON = {"seed": 0, "jobs": 1}
HELP = {
    "gen-sbm": "sample a stochastic block model graph",
    "split": "split a graph's edges into train/validation/test",
    "train-lp": "train the GCN link predictor",
    "eval-lp": "test AUC, fairness metrics and bounds of a trained link predictor",
    "bound": "topology factors and disparity bounds for a trained link predictor",
    "train-diff": "train the graph diffusion denoiser",
    "sample": "sample synthetic graphs from a trained denoiser",
    "study": "bias amplification study over generated graphs",
    "stats": "edge listing and distribution statistics of a graph",
}


def _parse_value(key: str, raw, default):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def resolve_config(command: str, config_file: str | None, flags: dict) -> dict:
    """Defaults, then the file's ``[command]`` section, then non-None flags."""
    defaults = {**COMMON, **COMMANDS[command]}
    resolved = dict(defaults)
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        unknown_sections = [s for s in cp.sections() if s not in COMMANDS]
        if unknown_sections:
            raise ConfigError(f"unknown config sections: {unknown_sections}")
        if cp.has_section(command):
            for key, raw in cp.items(command):
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in section [{command}]")
                resolved[key] = _parse_value(key, raw, defaults[key])
    for key, value in flags.items():
        if value is not None:
            resolved[key] = _parse_value(key, value, defaults[key])
    return resolved


def write_snapshot(path: Path, command: str, cfg: dict) -> None:
    lines = [f"[{command}]"] + [f"{k} = {_snapshot_value(cfg[k])}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")


def _snapshot_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- commands

def _need(cfg: dict, key: str) -> Path:
    if not cfg[key]:
        raise ConfigError(f"missing required setting {key!r}")
    path = Path(cfg[key])
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)
    log.info("wrote %s", out / name)


def _lp_config(cfg: dict, prefix: str = "", lam: float | None = None) -> linkpred.TrainConfig:
    g = lambda k: cfg[prefix + k]  # noqa: E731
    return linkpred.TrainConfig(
        lam=cfg.get("lam", 0.0) if lam is None else lam, learning_rate=g("learning_rate"),
        epochs=g("epochs"), batch_size=g("batch_size"), negative_ratio=g("negative_ratio"),
        seed=cfg["seed"], hidden=g("hidden"), self_loops=g("self_loops"), activation=g("activation"))


def cmd_gen_sbm(cfg: dict, out: Path) -> None:
    sizes = [int(x) for x in str(cfg["group_sizes"]).split(",") if x.strip()]
    g = sbm_generate(sizes, cfg["intra_p"], cfg["inter_p"], cfg["feature_dim"], cfg["seed"],
                     cfg["feature_shift"], cfg["base_rate"])
    save_graph(g, out / "graph.txt")


def cmd_split(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    save_split(split_edges(g, cfg["train_frac"], cfg["seed"]), out / "split.txt")


def cmd_train_lp(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    sp = read_split(_need(cfg, "split"))
    result = linkpred.train_lp_full(g, sp, _lp_config(cfg))
    result.params.save(out / "gcn.weights")
    _write(out, "history.csv", linkpred.history_csv(result.history))
    _write(out, "summary.txt", f"best_epoch {result.best_epoch}\n")


def cmd_eval_lp(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    sp = read_split(_need(cfg, "split"))
    params = linkpred.GcnParams.load(_need(cfg, "weights"))
    _write(out, "report.txt", linkpred.evaluate_lp(params, g, sp).to_text())


def cmd_bound(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    params = linkpred.GcnParams.load(_need(cfg, "weights"))
    train_edges = read_split(_need(cfg, "split")).train_pos if cfg["split"] else g.edges
    part = g.partition()
    h = linkpred.encode(g, params, train_edges).data
    topology = g.adjacency(train_edges)
    bparams = bound_params_from_model(params, g, topology, train_edges)
    rep = build_report(linkpred.prob_matrix(h), g.adjacency(), part, topology, h, bparams,
                       c_vectors=g.features @ params.weight.data,
                       extra={"measured_score_gap": delta_sp(linkpred.score_matrix(h), part,
                                                             include_self_pairs=True)})
    _write(out, "bound.txt", rep.to_text())


def cmd_train_diff(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    dc = dif.DiffusionConfig(lam=cfg["lam"], epochs=cfg["epochs"], learning_rate=cfg["learning_rate"],
                             seed=cfg["seed"], T=cfg["T"], s=cfg["s"], batch_size=cfg["batch_size"],
                             hidden=cfg["hidden"], s_hidden=cfg["s_hidden"],
                             edge_hidden=cfg["edge_hidden"], layers=cfg["layers"])
    result = dif.train_diffusion(g, dc)
    result.params.save(out / "denoiser.weights")
    _write(out, "history.csv", dif.diffusion_history_csv(result.history))


def _generator(cfg: dict, g) -> harness.DiffusionGenerator:
    params = dif.DenoiserParams.load(_need(cfg, "weights"))
    n = cfg.get("n_nodes", 0) or g.n_nodes
    dist = g.partition().group_sizes / g.n_nodes
    return harness.DiffusionGenerator(params, dif.build_schedule(params.T, cfg["s"]), dif.marginals(g),
                                      dist, n, cfg["seed"])


def _sample_one(args):
    gen, index = args
    return gen.sample(index)


def cmd_sample(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    gen = _generator(cfg, g)
    tasks = [(gen, i) for i in range(cfg["samples"])]
    if cfg["jobs"] > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            graphs = list(pool.map(_sample_one, tasks))
    else:
        graphs = [_sample_one(t) for t in tasks]
    for i, s in enumerate(graphs):
        save_graph(s, out / f"synthetic_{i}.txt")


def cmd_study(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    sp = read_split(_need(cfg, "split"))
    gen = _generator(cfg, g).aligned_to(g)
    report = harness.bias_amplification_study(g, sp, gen, cfg["samples"], _lp_config(cfg, "lp_", 0.0),
                                              jobs=cfg["jobs"], train_frac=cfg["train_frac"])
    _write(out, "report.csv", report.to_csv())
    _write(out, "summary.txt", report.to_text())


def cmd_stats(cfg: dict, out: Path) -> None:
    g = read_graph(_need(cfg, "graph"))
    listing = harness.intra_inter_listing(g)
    _write(out, "listing.csv", listing.to_csv())
    text = (f"n_nodes {g.n_nodes}\nn_edges {g.n_edges}\n"
            f"structural_delta_sp {delta_sp(g.adjacency(), g.partition())!r}\n" + listing.summary_text())
    if cfg["other"]:
        other = read_graph(_need(cfg, "other"))
        text += (f"degree_w1 {harness.degree_wasserstein(g, other)!r}\n"
                 f"clustering_w1 {harness.clustering_wasserstein(g, other)!r}\n")
    _write(out, "stats.txt", text)


HANDLERS = {
    "gen-sbm": cmd_gen_sbm, "split": cmd_split, "train-lp": cmd_train_lp, "eval-lp": cmd_eval_lp,
    "bound": cmd_bound, "train-diff": cmd_train_diff, "sample": cmd_sample, "study": cmd_study,
    "stats": cmd_stats,
}


# ------------------------------------------------------------------ parser

def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairgraph", description="Fair link prediction and graph generation.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="INI file; the [%s] section is read" % name)
        p.add_argument("--out", default="out", help="output directory (default: out)")
        for key in {**COMMON, **keys}:
            p.add_argument(_flag(key), dest=key, default=None, metavar=key.upper())
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_INPUT
    if isinstance(exc, (linkpred.TrainingDivergedError, dif.DiffusionDivergedError)):
        return EXIT_DIVERGED
    if isinstance(exc, UndefinedMetricError):
        return EXIT_UNDEFINED_METRIC
    if isinstance(exc, (GraphFormatError, GraphValidationError, SplitSizeError, WeightFileError, ValueError)):
        return EXIT_BAD_INPUT
    return EXIT_OTHER


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    command = args.command
    flags = {k: getattr(args, k) for k in {**COMMON, **COMMANDS[command]}}
    out = Path(args.out)
    handler = None
    try:
        cfg = resolve_config(command, args.config, flags)
        out.mkdir(parents=True, exist_ok=True)
        handler = _attach_log(out / "run.log")
        log.info("command %s", command)
        write_snapshot(out / "resolved_config.ini", command, cfg)
        HANDLERS[command](cfg, out)
        log.info("done")
        return EXIT_OK
    except Exception as exc:  # mapped to category exit codes
        code = _exit_code(exc)
        log.error("%s failed: %s", command, exc)
        print(f"fairgraph {command}: error: {exc}", file=sys.stderr)
        return code
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _attach_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
