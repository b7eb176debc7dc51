"""Command-line pipeline: one subcommand per stage, the run directory holds all state.

Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  missing input file (e.g. --config or --plan path not found)
  4  malformed configuration (bad JSON, unknown key, wrong type)
  5  stage-order violation (a prerequisite stage has not produced its artifact)
  6  training diverged (non-finite loss)
  7  invalid shrink plan (malformed, off-grid, or not matching the architecture)
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from calpa import pipeline, report, spectra
from calpa._util import digest
from calpa.arch import (
    PlanError,
    apply_shrink_plan,
    cost_report,
    identity_plan,
    load_graph,
    load_plan,
    save_graph,
    save_plan,
)
from calpa.criteria import SampleSpec
from calpa.harness import (
    DatasetSpec,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    finetune,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    train,
)
from calpa.harness.pgm import write_pgm
from calpa.search import SearchConfig, baseline_plan, search_unit, sweep

log = logging.getLogger("calpa")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_ORDER, EXIT_DIVERGED, EXIT_PLAN = 0, 2, 3, 4, 5, 6, 7

COMMANDS = ("gen-data", "build-arch", "train", "search", "shrink", "retrain", "finetune",
            "report", "sweep", "spectra")

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {"count": 2000, "size": 64, "payload": 0.4, "smoothing": 2.5,
                "split": [1400, 200, 400], "levels": [16, 239]},
    "arch": {"name": "srnet", "input_size": 64, "width_scale": 0.25},
    "train": {"optimizer": "adamax", "initial_lr": 1e-3, "lr_schedule": "constant", "drop_at": 0,
              "drop_factor": 0.1, "decay_every": 5000, "decay_pct": 0.1, "momentum": 0.9,
              "batch_size": 32, "max_iters": 300, "eval_every": 50},
    "search": {"step": 0.05, "tolerance": 0.05, "m": 32, "n": 10, "gamma_cap": None,
               "cumulative": True, "val_subsample": None},
    "spectra": {"layer": None, "image": 0, "k": 0, "cutoff": 0.25,
                "omega1": [0, 1], "omega2": [0, -8]},
}

# keys whose default is null and the types they accept
_NULLABLE = {("search", "gamma_cap"): (int, float), ("search", "val_subsample"): (int,),
             ("spectra", "layer"): (str,)}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------

def _check_type(path: tuple, value, default):
    if path in _NULLABLE:
        if value is None or (isinstance(value, _NULLABLE[path]) and not isinstance(value, bool)):
            return
    elif isinstance(default, bool):
        if isinstance(value, bool):
            return
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return
    elif isinstance(default, str):
        if isinstance(value, str):
            return
    elif isinstance(default, list):
        if isinstance(value, list) and len(value) == len(default):
            return
    if path == ("arch", "width_scale") and isinstance(value, (int, float, str)):
        return
    raise CliError(EXIT_CONFIG, f"config key {'.'.join(path)} has invalid value {value!r}")


def _merge(base: dict, override: dict, prefix: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = prefix + (key,)
        if key not in base:
            raise CliError(EXIT_CONFIG, f"unknown config key {'.'.join(path)}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(EXIT_CONFIG, f"config key {'.'.join(path)} must be an object")
            out[key] = _merge(base[key], value, path)
        else:
            _check_type(path, value, base[key])
            out[key] = value
    return out


def _parse_set(item: str) -> dict:
    if "=" not in item:
        raise CliError(EXIT_CONFIG, f"--set expects section.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cursor = node
    parts = key.split(".")
    for p in parts[:-1]:
        cursor[p] = {}
        cursor = cursor[p]
    cursor[parts[-1]] = value
    return node


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(EXIT_MISSING, f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CliError(EXIT_CONFIG, f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError(EXIT_CONFIG, f"config {path} must be a JSON object")
        cfg = _merge(cfg, data)
    for item in overrides or []:
        cfg = _merge(cfg, _parse_set(item))
    if seed is not None:
        cfg["seed"] = seed
    try:
        dataset_spec(cfg).validate()
        train_config(cfg).validate()
        search_config(cfg).validate()
        width_scale(cfg)
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from exc
    return cfg


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    return DatasetSpec(d["count"], d["size"], float(d["payload"]), float(d["smoothing"]), cfg["seed"],
                       tuple(d["split"]), tuple(d["levels"]))


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in names}, seed=cfg["seed"])


def search_config(cfg: dict) -> SearchConfig:
    s = cfg["search"]
    return SearchConfig(float(s["step"]), float(s["tolerance"]), SampleSpec(s["m"], s["n"], cfg["seed"]),
                        s["gamma_cap"], bool(s["cumulative"]), s["val_subsample"])


def width_scale(cfg: dict):
    value = cfg["arch"]["width_scale"]
    return Fraction(value) if isinstance(value, str) else value


# -- run directory ------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class Run:
    def __init__(self, out: Path, cfg: dict, command: str):
        self.out = out
        self.cfg = cfg
        self.command = command
        self.config_digest = digest(cfg)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, *parts, stage: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise CliError(EXIT_ORDER, f"{self.command} needs {p} - run `{stage}` first")
        return p

    def stage_dir(self, name: str) -> Path:
        d = self.path(name)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def provenance(self, directory: Path, inputs: list[Path]) -> None:
        record = {
            "command": self.command,
            "config": self.cfg,
            "config_digest": self.config_digest,
            "seed": self.cfg["seed"],
            "inputs": {str(p.relative_to(self.out)): file_digest(p) for p in inputs},
        }
        _write_text(directory / "provenance.json", json.dumps(record, indent=1, sort_keys=True) + "\n")

    def header(self) -> dict:
        return {"config_digest": self.config_digest, "seed": self.cfg["seed"]}

    def csv_header(self, **extra) -> str:
        items = {**self.header(), **extra}
        return "".join(f"# {k}: {v}\n" for k, v in items.items())

    def dataset(self):
        return load_dataset(self.require("data", "manifest.json", stage="gen-data").parent)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _tables(directory: Path, name: str, header, display, raw, prov: str) -> str:
    csv_text, _ = report.render_table(header, raw)
    _, aligned = report.render_table(header, display)
    _write_text(directory / f"{name}.csv", prov + csv_text)
    _write_text(directory / f"{name}.txt", aligned)
    return aligned


def _save_train(run: Run, name: str, result, inputs: list[Path]) -> None:
    d = run.stage_dir(name)
    result.best.meta.update(run.header())
    save_checkpoint(result.best, d / "best")
    save_checkpoint(result.last, d / "last")
    _write_text(d / "curves.csv", run.csv_header(model=result.best.graph.name) + result.curves_csv())
    run.provenance(d, inputs)
    log.info("%s: best validation accuracy %.4f at iteration %d", name, result.best.val_acc,
             result.best.iteration)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> None:
    spec = dataset_spec(run.cfg)
    d = run.stage_dir("data")
    generate_dataset(spec, d)
    run.provenance(d, [])


def cmd_build_arch(run: Run, args) -> None:
    a = run.cfg["arch"]
    graph = pipeline.reference_graph(a["name"], a["input_size"], width_scale(run.cfg))
    d = run.stage_dir("arch")
    save_graph(graph, d / "reference.json")
    _write_text(d / "reference_cost.csv", run.csv_header(model=graph.name) + cost_report(graph).to_csv())
    run.provenance(d, [])


def cmd_train(run: Run, args) -> None:
    data = run.dataset()
    arch_file = run.require("arch", "reference.json", stage="build-arch")
    graph = load_graph(arch_file)
    result = train(graph, data, train_config(run.cfg))
    _save_train(run, "reference", result, [arch_file, run.path("data", "manifest.json")])


def cmd_search(run: Run, args) -> None:
    data = run.dataset()
    ckpt_dir = run.require("reference", "best", "index.json", stage="train").parent
    ckpt = load_checkpoint(ckpt_dir)
    config = search_config(run.cfg)
    result = pipeline.search(ckpt, data, config)
    d = run.stage_dir("search")
    meta = {**run.header(), "checkpoint_digest": ckpt.weights_digest(), "search_config": config.to_dict(),
            "acc0": result.trace.acc0, "final_acc": result.trace.final_acc}
    save_plan(result.plan, d / "plan.json", meta)
    _write_text(d / "trace.csv", result.trace.to_csv({**run.header(),
                                                       "checkpoint_digest": ckpt.weights_digest(),
                                                       "cumulative": config.cumulative,
                                                       "val_subsample": config.val_subsample}))
    _write_text(d / "trace.json", json.dumps({**run.header(), **result.trace.to_dict()}, indent=1) + "\n")
    for kind in ("aggr", "avg"):
        save_plan(baseline_plan(result.plan, kind), d / f"plan_{kind}.json", {**run.header(), "baseline": kind})
    run.provenance(d, [ckpt_dir])


def _load_plan(path: Path):
    try:
        return load_plan(path)
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_PLAN, f"malformed plan {path}: {exc}") from exc


def _plan_path(run: Run, args) -> Path:
    if getattr(args, "plan", None):
        p = Path(args.plan)
        if not p.is_file():
            raise CliError(EXIT_MISSING, f"plan file not found: {p}")
        return p
    return run.require("search", "plan.json", stage="search")


def cmd_shrink(run: Run, args) -> None:
    arch_file = run.require("arch", "reference.json", stage="build-arch")
    graph = load_graph(arch_file)
    if getattr(args, "identity", False):
        plan, plan_file = identity_plan(graph), None
    else:
        plan_file = _plan_path(run, args)
        plan = _load_plan(plan_file)
    shrunk = apply_shrink_plan(graph, plan)
    d = run.stage_dir("arch")
    save_graph(shrunk, d / "calpa.json")
    _write_text(d / "calpa_cost.csv", run.csv_header(model=shrunk.name) + cost_report(shrunk).to_csv())
    run.provenance(d, [arch_file] + ([plan_file] if plan_file else []))


def cmd_retrain(run: Run, args) -> None:
    data = run.dataset()
    arch_file = run.require("arch", "calpa.json", stage="shrink")
    result = train(load_graph(arch_file), data, train_config(run.cfg))
    _save_train(run, "retrain", result, [arch_file, run.path("data", "manifest.json")])


def cmd_finetune(run: Run, args) -> None:
    data = run.dataset()
    ckpt_dir = run.require("reference", "best", "index.json", stage="train").parent
    plan_file = _plan_path(run, args)
    result = finetune(load_checkpoint(ckpt_dir), _load_plan(plan_file), data, train_config(run.cfg))
    _save_train(run, "finetune", result, [ckpt_dir, plan_file])


def _read_curves(path: Path) -> list:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or line.startswith("iteration"):
            continue
        it, tr, va, loss = line.split(",")
        rows.append((int(it), float(tr), float(va), float(loss)))
    return rows


def cmd_report(run: Run, args) -> None:
    d = run.stage_dir("report")
    prov = run.csv_header()
    arch_file = run.path("arch", "reference.json")
    if arch_file.exists():
        reference = load_graph(arch_file)
    else:
        a = run.cfg["arch"]
        reference = pipeline.reference_graph(a["name"], a["input_size"], width_scale(run.cfg))
    models = [(reference.name, reference)]
    inputs = [arch_file] if arch_file.exists() else []
    if run.path("arch", "calpa.json").exists():
        models.append(("calpa-" + reference.name, load_graph(run.path("arch", "calpa.json"))))
        inputs.append(run.path("arch", "calpa.json"))
    plan_file = run.path("search", "plan.json")
    plan = None
    if plan_file.exists():
        plan = _load_plan(plan_file)
        inputs.append(plan_file)
        for kind in ("aggr", "avg"):
            models.append((f"{kind}-{reference.name}", apply_shrink_plan(reference, baseline_plan(plan, kind))))
    header, display, raw = report.cost_rows(models)
    text = _tables(d, "cost", header, display, raw, prov)
    _write_text(d / "cost_layers.csv", prov + cost_report(reference).to_csv())

    entries, curves = [], {}
    stages = [("reference", reference.name), ("retrain", "calpa-" + reference.name + " (scratch)"),
              ("finetune", "calpa-" + reference.name + " (finetune)")]
    have_data = run.path("data", "manifest.json").exists()
    data = run.dataset() if have_data else None
    for stage, label in stages:
        ckpt_dir = run.path(stage, "best")
        if not (ckpt_dir / "index.json").exists():
            continue
        curves[label] = _read_curves(run.path(stage, "curves.csv"))
        inputs.append(ckpt_dir)
        if data is not None:
            entries.append((label, evaluate(load_checkpoint(ckpt_dir), data, "test")))
    if entries:
        header, rows = report.metrics_rows(entries)
        text += "\n" + _tables(d, "metrics", header, rows, rows, prov)
    if curves:
        report.plot_curves(curves, d / "curves.png")
    if plan is not None:
        report.plot_plan(reference, plan, d / "plan.png")
    sys.stdout.write(text)
    run.provenance(d, inputs)


def cmd_sweep(run: Run, args) -> None:
    data = run.dataset()
    ckpt_dir = run.require("reference", "best", "index.json", stage="train").parent
    ckpt = load_checkpoint(ckpt_dir)
    net = ckpt.network()
    config = search_config(run.cfg)
    if args.layers:
        layers = args.layers.split(",")
    else:
        layers = list(dict.fromkeys(search_unit(net.graph, c.id)[0] for c in net.graph.prunable_convs()))
    unknown = [lid for lid in layers if lid not in net.graph]
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown layers: {unknown}")
    validator = pipeline.validator_for(data, config, config.sample_spec.seed)
    images = pipeline.sample_images(data, config.sample_spec.m, config.sample_spec.seed)
    rows = sweep(net, layers, validator, config, images)
    d = run.stage_dir("sweep")
    body = "layer_id,gamma,acc\n" + "".join(f"{l},{g:.2f},{a:.6f}\n" for l, g, a in rows)
    _write_text(d / "sweep.csv", run.csv_header(checkpoint_digest=ckpt.weights_digest()) + body)
    report.plot_sweep(rows, d / "sweep.png")
    run.provenance(d, [ckpt_dir])


def _default_spectra_layer(graph) -> str:
    for group in graph.groups:
        if group.kind == "transformed":
            return group.lowest
    return graph.convs()[-1].id


def cmd_spectra(run: Run, args) -> None:
    data = run.dataset()
    ckpt_dir = run.require("reference", "best", "index.json", stage="train").parent
    net = load_checkpoint(ckpt_dir).network()
    s = run.cfg["spectra"]
    layer = s["layer"] or _default_spectra_layer(net.graph)
    if layer not in net.graph:
        raise CliError(EXIT_CONFIG, f"spectra.layer {layer!r} is not in the model")
    test = data.splits["test"]
    image = data.covers[test[s["image"] % len(test)]]
    d = run.stage_dir("spectra")
    maps = spectra.channel_spectra(net, image, layer, s["cutoff"])
    spectra.export_spectra(maps, d / "channels", "channel")
    k = s["k"] % len(maps)
    terms = spectra.presummation_spectra(net, image, layer, k, s["cutoff"])
    spectra.export_spectra(terms, d / f"terms_k{k}", "term")
    amp = maps[0].amplitude
    center = (amp.shape[0] // 2, amp.shape[1] // 2)
    bins = []
    for key in ("omega1", "omega2"):
        w = (center[0] + s[key][0], center[1] + s[key][1])
        if not (0 <= w[0] < amp.shape[0] and 0 <= w[1] < amp.shape[1]):
            raise CliError(EXIT_CONFIG, f"spectra.{key} offset {s[key]} leaves the {amp.shape} grid of {layer}")
        bins.append(w)
    w1, w2 = bins
    # terms with a zero amplitude at either bin carry no finite log ratio
    usable = [t for t in terms if t.amplitude[w1] > 0 and t.amplitude[w2] > 0]
    summary = {**run.header(), "layer": layer, "k": k, "cutoff": s["cutoff"],
               "omega1": list(w1), "omega2": list(w2), "terms": len(terms), "terms_used": len(usable),
               "summed_low_fraction": maps[k].low_fraction,
               "term_low_fraction_mean": float(np.mean([t.low_fraction for t in terms]))}
    if usable:
        curve = spectra.suppression_curve([spectra.amplitude_ratio(t.amplitude, w1, w2) for t in usable], w1, w2)
        _write_text(d / "suppression.csv", run.csv_header(layer=layer, k=k) + curve.to_csv())
        report.plot_suppression(curve.j, curve.ratio, d / "suppression.png")
    if maps[k].amplitude[w2] > 0:
        summary["summed_ratio"] = spectra.amplitude_ratio(maps[k].amplitude, w1, w2)
    write_pgm(d / "input.pgm", image)
    _write_text(d / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.provenance(d, [ckpt_dir])


HANDLERS = {
    "gen-data": cmd_gen_data, "build-arch": cmd_build_arch, "train": cmd_train, "search": cmd_search,
    "shrink": cmd_shrink, "retrain": cmd_retrain, "finetune": cmd_finetune, "report": cmd_report,
    "sweep": cmd_sweep, "spectra": cmd_spectra,
}

HELP = {
    "gen-data": "write the synthetic cover/stego dataset to <out>/data",
    "build-arch": "write the reference architecture to <out>/arch/reference.json",
    "train": "train the reference network (needs gen-data, build-arch)",
    "search": "bottom-up shrinking-rate search (needs train)",
    "shrink": "apply a shrink plan to the reference architecture (needs search or --plan)",
    "retrain": "train the shrunk architecture from scratch (needs shrink)",
    "finetune": "slice the trained reference by the plan and keep training (needs train, search)",
    "report": "cost and metric tables plus figures for whatever stages exist",
    "sweep": "accuracy versus pruning rate per layer with exits disabled (needs train)",
    "spectra": "channel spectra and suppression curve of one conv (needs train)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calpa", description=__doc__.split("\n\n")[0],
                                     epilog=__doc__.split("\n\n", 1)[1],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name],
                           epilog=__doc__.split("\n\n", 1)[1],
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (JSON literal); repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("shrink", "finetune"):
            p.add_argument("--plan", help="plan JSON (default: <out>/search/plan.json)")
        if name == "shrink":
            p.add_argument("--identity", action="store_true", help="apply the identity plan")
        if name == "sweep":
            p.add_argument("--layers", help="comma-separated conv ids (default: every searched layer)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "resolved_config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        HANDLERS[args.command](Run(out, cfg, args.command), args)
    except CliError as exc:
        print(f"calpa: error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"calpa: error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PlanError as exc:
        print(f"calpa: error: {exc}", file=sys.stderr)
        return EXIT_PLAN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
