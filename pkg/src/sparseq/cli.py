"""``sparseq`` command line: run experiment grids, generate planted datasets,
aggregate reports and warm the oracle cache."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .bosq import STRATEGIES, BilevelConfig, RunResult, run_bosq
from .explainer import EndpointConfig, Explainer, FileBackend, PersistentCache, RemoteBackend, SyntheticBackend
from .hypergrad import HypergradConfig
from .nnkernel import TrainConfig
from .selector import SelectionState, export_scores
from .tagcore import TagGraph, gen_planted_dataset, load_aug_features, load_dataset, read_feature_bin, save_dataset

log = logging.getLogger("sparseq")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

CONFIG_TEMPLATE = """\
# sparseq experiment configuration. Every key below shows its default.

[experiment]
strategies = ["bilevel", "random"]   # any of: bilevel random dissimilarity entropy exhaustive
seeds = [0, 1, 2]
output_dir = "runs"                 # relative to this file
parallel = 1                        # (strategy, seed) cells run concurrently

[dataset]
path = "data"                       # directory with meta.json, edges.csv, features.bin, ...
# Instead of a path, a planted dataset can be generated in memory:
# [dataset.synth]
# n = 60
# d = 8
# c = 3
# corrupt = 6
# noise = 6.0
# seed = 0

[bilevel]
k = 10
tau = 4.0
tau_min = 0.5
gamma = 0.7                         # tau <- max(tau * gamma, tau_min) after every outer step
outer_steps = 3
lambda_lr = 0.01
lambda_optimizer = "gd"             # gd | adam
candidates = "all"                  # all | non_test
debug = false                       # write hypergrad_<t>.json per outer step

[train]
n_layers = 2
hidden_dim = 128
learning_rate = 0.01
max_inner_steps = 200
patience = 50
weight_decay = 5e-4
optimizer = "adam"                  # adam | gd

[hyper]
neumann_steps = 10
# alpha = 0.01                      # Neumann damping; defaults to the inner learning rate
fd_eps_w = 1e-3
fd_eps_lambda = 1e-3
include_direct_grad = false

[oracle]
backend = "file"                    # file | synthetic | remote
# aug_path = "data/aug_features.bin" # file/synthetic source; default <dataset>/aug_features.bin
cache = "aug_cache.jsonl"           # persistent cache for synthetic/remote backends; "" disables
noise_sigma = 0.0                   # synthetic backend only
delay = 0.0                         # synthetic backend: seconds slept per call
question = "Which category does this node belong to?"
constraint_kind = "categories"      # categories | numerical
word_budget = 50
parallelism = 4
# url = "http://localhost:8000"     # remote backend; falls back to SPARSEQ_ENDPOINT
# model = "mistral-7b-instruct"
"""


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    strategies: list[str]
    seeds: list[int]
    output_dir: Path
    parallel: int
    dataset_path: Path | None
    synth: dict | None
    bilevel: dict
    train: dict
    hyper: dict
    oracle: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def bilevel_config(self, strategy: str, seed: int, debug_dir=None) -> BilevelConfig:
        b = dict(self.bilevel)
        b.pop("debug", None)
        train = TrainConfig(seed=seed, **self.train)
        return BilevelConfig(strategy=strategy, seed=seed, train=train, hyper=HypergradConfig(**self.hyper),
                             debug_dir=debug_dir, **b)


_SECTIONS = {
    "bilevel": {f.name for f in dataclasses.fields(BilevelConfig)} - {"strategy", "seed", "train", "hyper", "debug_dir"} | {"debug"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"},
    "hyper": {f.name for f in dataclasses.fields(HypergradConfig)},
    "oracle": {"backend", "aug_path", "cache", "noise_sigma", "delay", "question", "constraint_kind", "word_budget",
               "parallelism", "url", "model", "api_key", "max_tokens", "timeout", "max_retries"},
}


def _check_keys(section: str, table: dict) -> dict:
    unknown = set(table) - _SECTIONS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return dict(table)


def parse_config(raw: dict, base_dir: Path) -> ExperimentConfig:
    exp = raw.get("experiment", {})
    strategies = exp.get("strategies", ["bilevel", "random"])
    if isinstance(strategies, str):
        strategies = [strategies]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"experiment.strategies: unknown strategy {s!r} (known: {', '.join(STRATEGIES)})")
    seeds = exp.get("seeds", [0, 1, 2])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise ConfigError("experiment.seeds: need at least one seed")
    if not all(isinstance(s, int) for s in seeds):
        raise ConfigError("experiment.seeds: seeds must be integers")
    parallel = int(exp.get("parallel", 1))
    if parallel < 1:
        raise ConfigError("experiment.parallel must be >= 1")

    ds = raw.get("dataset", {})
    synth = ds.get("synth")
    path = None
    if synth is None:
        if "path" not in ds:
            raise ConfigError("dataset.path: missing (or give a [dataset.synth] table)")
        path = (base_dir / ds["path"]).resolve()
        if not path.is_dir():
            raise ConfigError(f"dataset.path: directory {path} does not exist")
    else:
        unknown = set(synth) - {"n", "d", "c", "corrupt", "noise", "seed"}
        if unknown:
            raise ConfigError(f"unknown key(s) in [dataset.synth]: {', '.join(sorted(unknown))}")

    oracle = _check_keys("oracle", raw.get("oracle", {}))
    backend = oracle.setdefault("backend", "file")
    if backend not in ("file", "synthetic", "remote"):
        raise ConfigError(f"oracle.backend: unknown backend {backend!r}")
    if "aug_path" in oracle:
        oracle["aug_path"] = str((base_dir / oracle["aug_path"]).resolve())
        if not Path(oracle["aug_path"]).is_file():
            raise ConfigError(f"oracle.aug_path: file {oracle['aug_path']} does not exist")

    cfg = ExperimentConfig(
        strategies=list(strategies),
        seeds=[int(s) for s in seeds],
        output_dir=(base_dir / exp.get("output_dir", "runs")).resolve(),
        parallel=parallel,
        dataset_path=path,
        synth=dict(synth) if synth is not None else None,
        bilevel=_check_keys("bilevel", raw.get("bilevel", {})),
        train=_check_keys("train", raw.get("train", {})),
        hyper=_check_keys("hyper", raw.get("hyper", {})),
        oracle=oracle,
        base_dir=base_dir,
    )
    try:  # surface invalid values as config errors before any work starts
        cfg.bilevel_config(cfg.strategies[0], cfg.seeds[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw, path.parent.resolve())


# --- building blocks -------------------------------------------------------------


def _load_graph(cfg: ExperimentConfig) -> tuple[TagGraph, np.ndarray | None]:
    if cfg.synth is not None:
        s = {"n": 60, "d": 8, "c": 3, "corrupt": 6, "noise": 6.0, "seed": 0, **cfg.synth}
        g, clean, _ = gen_planted_dataset(s["n"], s["d"], s["c"], s["corrupt"], s["noise"], s["seed"])
        return g, clean
    g = load_dataset(cfg.dataset_path)
    return g, None


def _aug_source(cfg: ExperimentConfig, in_memory):
    if "aug_path" in cfg.oracle:
        return read_feature_bin(cfg.oracle["aug_path"], mmap=True)
    if in_memory is not None:
        return in_memory
    aug = load_aug_features(cfg.dataset_path) if cfg.dataset_path is not None else None
    if aug is None:
        raise ConfigError("oracle: no aug_features.bin found; set oracle.aug_path")
    return aug


def make_explainer(cfg: ExperimentConfig, graph: TagGraph, in_memory=None) -> Explainer:
    o = cfg.oracle
    backend_name = o.get("backend", "file")
    if backend_name == "file":
        backend = FileBackend(_aug_source(cfg, in_memory))
    elif backend_name == "synthetic":
        backend = SyntheticBackend(np.asarray(_aug_source(cfg, in_memory)), o.get("noise_sigma", 0.0),
                                   seed=0, delay=o.get("delay", 0.0))
    else:
        extra = {k: o[k] for k in ("api_key", "max_tokens", "timeout", "max_retries") if k in o}
        try:
            endpoint = EndpointConfig.from_env(o.get("model", "default"), url=o.get("url"), **extra)
        except Exception as exc:
            raise ConfigError(f"oracle.url: {exc}") from exc
        backend = RemoteBackend(endpoint, graph.feat_dim)
    cache = None
    cache_path = o.get("cache", "aug_cache.jsonl")
    if cache_path and backend.persistent:
        cache = PersistentCache(cfg.base_dir / cache_path, dataset_id=graph.name)
    return Explainer(backend, graph.texts, o.get("question", "Which category does this node belong to?"),
                     o.get("constraint_kind", "categories"), o.get("word_budget", 50), cache,
                     o.get("parallelism", 4))


def cell_dir(out: Path, strategy: str, seed: int) -> Path:
    return out / strategy / f"seed_{seed}"


def run_cell(cfg: ExperimentConfig, graph, oracle, strategy: str, seed: int) -> RunResult:
    d = cell_dir(cfg.output_dir, strategy, seed)
    d.mkdir(parents=True, exist_ok=True)
    debug = str(d / "debug") if cfg.bilevel.get("debug") else None
    result = run_bosq(graph, oracle, cfg.bilevel_config(strategy, seed, debug))
    result.save(d / "run.json")
    if result.final_lambda is not None:
        state = SelectionState(result.final_lambda, k=cfg.bilevel_config(strategy, seed).k)
        export_scores(d / "scores.json", state, result.selected)
    return result


# --- reports ------------------------------------------------------------------------


def _sample_std(values) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def aggregate(runs: list[dict]) -> dict:
    """Per-strategy mean and sample std (n - 1) of metric and wall time."""
    if not runs:
        raise ValueError("no runs to aggregate")
    kinds = {r["metric"]["kind"] for r in runs}
    if len(kinds) > 1:
        raise ValueError("mixed task kinds: " + ", ".join(sorted(kinds)))
    kind = kinds.pop()
    rows = []
    for strategy in sorted({r["strategy"] for r in runs}):
        group = sorted((r for r in runs if r["strategy"] == strategy), key=lambda r: r["seed"])
        metric = [r["metric"]["value"] for r in group]
        total = [r["timings"]["total"] for r in group]
        oracle_t = [r["timings"].get("oracle", 0.0) for r in group]
        calls = [r["oracle_calls"] for r in group]
        rows.append({
            "strategy": strategy,
            "n": len(group),
            "seeds": [r["seed"] for r in group],
            "metric_mean": float(np.mean(metric)),
            "metric_std": _sample_std(metric),
            "time_mean": float(np.mean(total)),
            "time_std": _sample_std(total),
            "oracle_time_mean": float(np.mean(oracle_t)),
            "oracle_time_share": float(np.sum(oracle_t) / np.sum(total)) if np.sum(total) > 0 else 0.0,
            "oracle_calls_mean": float(np.mean(calls)),
            "oracle_calls_total": int(np.sum(calls)),
        })
    pick = max if kind == "accuracy" else min
    best = pick(rows, key=lambda r: r["metric_mean"])["strategy"]
    return {"metric_kind": kind, "n_runs": len(runs), "best": best, "std": "sample (n-1)", "rows": rows}


def render_markdown(report: dict) -> str:
    kind = report["metric_kind"]
    lines = [
        f"| strategy | {kind} mean ± std | total time (s) | oracle calls |",
        "|---|---|---|---|",
    ]
    for r in report["rows"]:
        cell = f"{r['metric_mean']:.4f} ± {r['metric_std']:.4f}"
        if r["strategy"] == report["best"]:
            cell = f"**{cell}**"
        lines.append(f"| {r['strategy']} | {cell} | {r['time_mean']:.2f} ± {r['time_std']:.2f} | {r['oracle_calls_mean']:g} |")
    better = "higher" if kind == "accuracy" else "lower"
    lines.append("")
    lines.append(f"std is the sample standard deviation (n-1) over seeds; bold marks the best mean ({better} is better).")
    return "\n".join(lines) + "\n"


def collect_runs(runs_dir) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(runs_dir).rglob("run.json"))]


def write_report(runs_dir) -> dict:
    runs_dir = Path(runs_dir)
    runs = collect_runs(runs_dir)
    if not runs:
        raise ValueError(f"no run.json files under {runs_dir}")
    report = aggregate(runs)
    (runs_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    (runs_dir / "report.md").write_text(render_markdown(report))
    return report


# --- commands -----------------------------------------------------------------------


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out).resolve()
    if getattr(args, "parallel", None) is not None:
        if args.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
        cfg.parallel = args.parallel
    if getattr(args, "strategy", None):
        names = [s.strip() for s in args.strategy.split(",") if s.strip()]
        for s in names:
            if s not in STRATEGIES:
                raise ConfigError(f"--strategy: unknown strategy {s!r}")
        cfg.strategies = names
    if getattr(args, "k", None) is not None:
        cfg.bilevel["k"] = args.k
        try:
            cfg.bilevel_config(cfg.strategies[0], cfg.seeds[0])
        except ValueError as exc:
            raise ConfigError(f"--k: {exc}") from exc
    return cfg


def cmd_run(config_path, args=None) -> int:
    cfg = _apply_overrides(load_config(config_path), args or argparse.Namespace())
    graph, in_memory = _load_graph(cfg)
    if graph.n_nodes < cfg.bilevel.get("k", 10):
        raise ConfigError(f"bilevel.k: budget {cfg.bilevel.get('k', 10)} exceeds the {graph.n_nodes} nodes")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    cells = [(s, seed) for s in cfg.strategies for seed in cfg.seeds]
    # each cell gets its own front end (ledger) over a shared cache file
    first = make_explainer(cfg, graph, in_memory)
    shared_cache = first.cache

    def work(cell):
        strategy, seed = cell
        oracle = make_explainer(cfg, graph, in_memory)
        oracle.cache = shared_cache
        return run_cell(cfg, graph, oracle, strategy, seed)

    with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
        futures = [(cell, pool.submit(work, cell)) for cell in cells]
        results, failure = [], None
        for cell, fut in futures:
            try:
                results.append(fut.result())
            except Exception as exc:
                if failure is None:
                    failure = (cell, exc)
    if failure is not None:
        (strategy, seed), exc = failure
        raise RuntimeError(f"cell strategy={strategy} seed={seed} failed: {exc}") from exc
    report = write_report(cfg.output_dir)
    calls = sum(r.oracle_calls for r in results)
    print(f"{len(results)} runs written to {cfg.output_dir}; new oracle calls: {calls}; best: {report['best']}")
    return EXIT_OK


def cmd_gen_synth(n, d, c, corrupt, noise, seed, out_dir) -> int:
    g, clean, corrupted = gen_planted_dataset(n, d, c, corrupt, noise, seed)
    out = Path(out_dir)
    save_dataset(g, out, aug_features=clean)
    (out / "corrupted.json").write_text(json.dumps([int(i) for i in corrupted]) + "\n")
    print(f"wrote {g.name} ({g.n_nodes} nodes, {len(corrupted)} corrupted) to {out}")
    return EXIT_OK


def cmd_report(runs_dir) -> int:
    report = write_report(runs_dir)
    sys.stdout.write(render_markdown(report))
    return EXIT_OK


def cmd_explain_cache(config_path, nodes: list[int] | None) -> int:
    cfg = load_config(config_path)
    graph, in_memory = _load_graph(cfg)
    oracle = make_explainer(cfg, graph, in_memory)
    ids = list(range(graph.n_nodes)) if nodes is None else nodes
    bad = [i for i in ids if not 0 <= i < graph.n_nodes]
    if bad:
        raise ConfigError(f"--nodes: ids out of range: {bad[:5]}")
    oracle.query(ids)
    print(f"{len(ids)} nodes: {oracle.ledger.new_calls} new calls, {oracle.ledger.cache_hits} cache hits")
    return EXIT_OK


def cmd_config_init(out) -> int:
    if out:
        path = Path(out)
        if path.exists():
            raise ConfigError(f"{path} already exists")
        path.write_text(CONFIG_TEMPLATE)
    else:
        sys.stdout.write(CONFIG_TEMPLATE)
    return EXIT_OK


def _parse_nodes(text: str | None) -> list[int] | None:
    if text is None or text == "all":
        return None
    try:
        return sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError as exc:
        raise ConfigError(f"--nodes: expected comma-separated ids, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparseq", description="Bilevel sparse querying experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (strategy, seed) cell of a config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--parallel", type=int)
    run.add_argument("--strategy", help="override strategies (comma separated)")
    run.add_argument("--k", type=int)

    gen = sub.add_parser("gen-synth", help="write a planted dataset directory")
    gen.add_argument("--n", type=int, default=60)
    gen.add_argument("--d", type=int, default=8)
    gen.add_argument("--c", type=int, default=3)
    gen.add_argument("--corrupt", type=int, default=6)
    gen.add_argument("--noise", type=float, default=6.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="aggregate run.json files into report.md / report.json")
    rep.add_argument("runs_dir")

    cache = sub.add_parser("explain-cache", help="pre-populate the oracle cache")
    cache.add_argument("--config", required=True)
    cache.add_argument("--nodes", help="comma-separated node ids or 'all' (default)")

    conf = sub.add_parser("config", help="configuration helpers")
    conf_sub = conf.add_subparsers(dest="config_command", required=True)
    init = conf_sub.add_parser("init", help="print or write the documented default config")
    init.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args)
        if args.command == "gen-synth":
            return cmd_gen_synth(args.n, args.d, args.c, args.corrupt, args.noise, args.seed, args.out)
        if args.command == "report":
            return cmd_report(args.runs_dir)
        if args.command == "explain-cache":
            return cmd_explain_cache(args.config, _parse_nodes(args.nodes))
        return cmd_config_init(args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
