"""``dislab`` command line: dataset generation, tile acquisition, training, evaluation.

Every subcommand resolves its parameters as defaults < ``--config`` file <
``--set key=value`` < explicit flags, validates them, and writes the resolved
parameters as JSON next to its outputs. Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
CACHE_ENV = "DISLAB_CACHE_DIR"
SNAPSHOT_NAME = "resolved_config.json"

log = logging.getLogger("dislab")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, module: str, operation: str, cause: BaseException):
        super().__init__(f"{module}.{operation} failed: {type(cause).__name__}: {cause}")
        self.module, self.operation, self.cause = module, operation, cause


@contextmanager
def stage(module: str, operation: str):
    """Attribute any failure inside the block to ``module.operation``."""
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(module, operation, e) from e


# ---------------------------------------------------------------- parameters

def _nonneg(v):
    return None if v >= 0 and math.isfinite(v) else "must be a finite value >= 0"


def _positive(v):
    return None if v > 0 else "must be > 0"


def _ratio(v):
    try:
        a, b = (int(x) for x in v.split(":"))
    except ValueError:
        return "must look like TRAIN:TEST, e.g. 3:1"
    return None if a >= 1 and b >= 0 else "needs TRAIN >= 1 and TEST >= 0"


def _bbox(v):
    try:
        parts = [float(x) for x in v.split(",")]
    except ValueError:
        return "must be four comma-separated numbers west,south,east,north"
    return None if len(parts) == 4 else "must be four comma-separated numbers west,south,east,north"


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Param:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    check: Callable[[Any], str | None] | None = None
    choices: tuple | None = None
    flag: str | None = None
    domain: str = ""

    @property
    def option(self) -> str:
        return self.flag or "--" + self.name.replace("_", "-")


def _p(name, parse, default, help, check=None, choices=None, flag=None, domain=""):
    return Param(name, parse, default, help, check, choices, flag, domain)


DATA_PARAMS = [
    _p("data", str, "", "dataset root with manifest.json; empty means generate a synthetic set in memory"),
    _p("synthetic", str, "digit", "synthetic dataset kind when --data is empty", choices=("map", "digit")),
    _p("count", int, 200, "synthetic content keys", _positive, domain="count >= 1"),
    _p("data_seed", int, 0, "seed for synthetic generation and the train/test split"),
    _p("split", str, "3:1", "train:test ratio for synthetic data", _ratio),
]

COMMANDS: dict[str, tuple[str, list[Param]]] = {
    "dataset-gen": ("Generate a synthetic style-triplet dataset on disk.", [
        _p("kind", str, "map", "dataset kind", choices=("map", "digit")),
        _p("count", int, 200, "number of content keys (triplets)", _positive, domain="count >= 1"),
        _p("seed", int, 0, "generation and split seed"),
        _p("image_size", int, 0, "image side in pixels; 0 picks 64 for map and 32 for digit",
           lambda v: None if v in (0, 32, 64) else "must be 0, 32 or 64"),
        _p("split", str, "3:1", "train:test ratio", _ratio),
        _p("out", str, "data", "output directory"),
    ]),
    "tiles-fetch": ("Download xyz tiles for one style over a lon/lat region.", [
        _p("url_template", str, "", "tile URL with {z}, {x}, {y} placeholders"),
        _p("style", str, "toner", "style name (subdirectory of the cache root)"),
        _p("bbox", str, "2.25,48.80,2.45,48.90", "region as west,south,east,north in degrees", _bbox),
        _p("zoom", int, 12, "zoom level", lambda v: None if 0 <= v <= 22 else "must be in [0, 22]",
           domain="0 <= zoom <= 22"),
        _p("max_concurrency", int, 4, "maximum requests in flight", _positive, domain="max_concurrency >= 1"),
        _p("min_request_interval", float, 0.1, "seconds between request starts", _nonneg),
        _p("max_retries", int, 3, "retries after the first attempt", _nonneg),
        _p("out", str, "", f"cache root; empty means ${CACHE_ENV} or ~/.cache/dislab/tiles"),
    ]),
    "tiles-align": ("Write a train/test manifest over tiles present in every style.", [
        _p("styles", str, "toner,terrain,watercolor", "comma-separated style subdirectories"),
        _p("split", str, "3:1", "train:test ratio", _ratio),
        _p("seed", int, 0, "split seed"),
        _p("out", str, "", f"cache root holding the style directories; empty means ${CACHE_ENV} or ~/.cache/dislab/tiles"),
    ]),
    "train": ("Train a DSED or FEN model and stream per-step metrics.", DATA_PARAMS + [
        _p("variant", str, "fen", "model family", choices=("fen", "dsed")),
        _p("beta", float, 4.0, "KL weight", _nonneg, domain="beta >= 0"),
        _p("gamma", float, 100.0, "Friend/Enemy cross-entropy weight (fen only)", _nonneg, domain="gamma >= 0"),
        _p("lr", float, 1e-3, "Adam learning rate for encoder and decoder", _nonneg, domain="lr >= 0"),
        _p("head_lr", _optional_float, None, "Adam learning rate for the Friend/Enemy heads; none means --lr",
           lambda v: None if v is None or v >= 0 else "must be >= 0", domain="head_lr >= 0 or none"),
        _p("batch", int, 12, "triplets per optimizer step", _positive, domain="batch >= 1"),
        _p("epochs", int, 200, "passes over the training split", _nonneg, domain="epochs >= 0"),
        _p("seed", int, 0, "initialization, noise and shuffling seed"),
        _p("latent_dim", int, 32, "latent size", _positive, domain="latent_dim >= 1"),
        _p("content_dim", int, 12, "content prefix length (fen); ignored for dsed", _positive),
        _p("checkpoint_every", int, 0, "epochs between checkpoints; 0 saves only the last", _nonneg),
        _p("resume", str, "", "checkpoint directory to continue from"),
        _p("log_wall_time", _parse_bool, False, "record wall_ms per step (breaks byte-identical metrics)"),
        _p("out", str, "runs/train", "output directory"),
    ]),
    "eval": ("Probe a trained model on the held-out split and write a report.", DATA_PARAMS + [
        _p("checkpoint", str, "", "checkpoint directory"),
        _p("pairs", int, 200, "transfer pairs scored (fen)", _positive),
        _p("seed", int, 0, "probe and pair-sampling seed"),
        _p("out", str, "runs/eval", "output directory"),
    ]),
    "transfer": ("Recombine the content of one image with the style of another (fen).", [
        _p("checkpoint", str, "", "checkpoint directory"),
        _p("content", str, "", "PNG supplying content"),
        _p("style", str, "", "PNG supplying style"),
        _p("out", str, "transfer.png", "output PNG"),
    ]),
    "grid": ("Write an image grid: inputs, reconstructions and transfers into each style.", DATA_PARAMS + [
        _p("checkpoint", str, "", "checkpoint directory"),
        _p("columns", int, 6, "held-out content keys shown", _positive),
        _p("out", str, "grid.png", "output PNG"),
    ]),
}

# keys left out of snapshots: where the snapshot lives does not affect what is produced
OUTPUT_KEYS = {"out"}


def _params(command: str) -> dict[str, Param]:
    return {p.name: p for p in COMMANDS[command][1]}


def _convert(param: Param, text: str, source: str):
    try:
        return param.parse(text)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{param.name}: cannot parse {text!r} from {source} ({e})") from e


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` pairs; a leading section header is optional and ignored."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser.read_string(text, source=str(path))
    out: dict[str, str] = {}
    for section in parser.sections():
        for k, v in parser[section].items():
            out[k.replace("-", "_")] = v.strip().strip('"').strip("'")
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    params = _params(command)
    values = {name: p.default for name, p in params.items()}
    layers: list[tuple[str, dict[str, str]]] = []
    if ns.config:
        try:
            layers.append((f"config file {ns.config}", read_config_file(ns.config)))
        except (OSError, configparser.Error) as e:
            raise UsageError(f"cannot read config file {ns.config}: {e}") from e
    sets = {}
    for item in ns.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip().replace("-", "_")] = v.strip()
    layers.append(("--set", sets))
    for source, layer in layers:
        for k, v in layer.items():
            if k not in params:
                raise UsageError(f"unknown key {k!r} in {source}; valid keys: {', '.join(sorted(params))}")
            values[k] = _convert(params[k], v, source)
    for name in params:
        if hasattr(ns, name):
            values[name] = getattr(ns, name)
    for name, p in params.items():
        v = values[name]
        if p.choices and v not in p.choices:
            raise UsageError(f"{name} must be one of {list(p.choices)}, got {v!r}")
        msg = p.check(v) if p.check else None
        if msg:
            domain = f" (domain: {p.domain})" if p.domain else ""
            raise UsageError(f"{name} {msg}{domain}; got {v!r}")
    return values


def snapshot(command: str, values: dict[str, Any]) -> dict[str, Any]:
    return {"command": command, **{k: v for k, v in sorted(values.items()) if k not in OUTPUT_KEYS}}


def write_snapshot(path: Path, command: str, values: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snapshot(command, values), indent=2, sort_keys=True) + "\n")
    return path


def _file_snapshot_path(output_file: str) -> Path:
    p = Path(output_file)
    return p.with_name(p.stem + ".config.json")


def cache_root(explicit: str) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "dislab" / "tiles"


def _split_ratio(text: str) -> tuple[int, int]:
    a, b = text.split(":")
    return int(a), int(b)


# ---------------------------------------------------------------- commands

def _load_data(v: dict[str, Any]):
    from .datasets import DatasetManifest, generate, load_triplet_array, split_train_test, synthetic_to_arrays

    if v["data"]:
        root = Path(v["data"])
        with stage("datasets", "DatasetManifest.read"):
            manifest = DatasetManifest.read(root)
        with stage("datasets", "load_triplet_array"):
            return {s: load_triplet_array(manifest, root, s) for s in ("train", "test") if manifest.keys_in_split(s)}
    with stage("datasets", "generate"):
        size = 64 if v["synthetic"] == "map" else 32
        data = generate(v["synthetic"], v["data_seed"], v["count"], size)
        data.manifest = split_train_test(data.manifest, _split_ratio(v["split"]), v["data_seed"])
        return synthetic_to_arrays(data)


def _require(v: dict[str, Any], *names: str) -> None:
    for n in names:
        if not v[n]:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _load_model(path: str):
    from .training import load_checkpoint

    with stage("training", "load_checkpoint"):
        state = load_checkpoint(path)
    state.model.eval()
    return state


def cmd_dataset_gen(v: dict[str, Any]) -> dict:
    from .datasets import generate, split_train_test, write_dataset

    size = v["image_size"] or (64 if v["kind"] == "map" else 32)
    with stage("datasets", "generate"):
        data = generate(v["kind"], v["seed"], v["count"], size)
        data.manifest = split_train_test(data.manifest, _split_ratio(v["split"]), v["seed"])
    out = Path(v["out"])
    with stage("datasets", "write_dataset"):
        write_dataset(out, data)
    write_snapshot(out / SNAPSHOT_NAME, "dataset-gen", v)
    return {"out": str(out), "triplets": len(data.manifest.content_keys())}


def cmd_tiles_fetch(v: dict[str, Any]) -> dict:
    from .tiles import BBox, FetchJob, fetch_tiles

    _require(v, "url_template")
    root = cache_root(v["out"])
    with stage("tiles", "FetchJob"):
        job = FetchJob(v["url_template"], v["style"], BBox(*(float(x) for x in v["bbox"].split(","))),
                       v["zoom"], root, max_concurrency=v["max_concurrency"],
                       min_request_interval=v["min_request_interval"], max_retries=v["max_retries"])
    with stage("tiles", "fetch_tiles"):
        report = fetch_tiles(job)
    write_snapshot(root / f"{v['style']}.fetch.config.json", "tiles-fetch", {**v, "out": str(root)})
    return {"root": str(root), "present": len(report.present), "missing": [t.key for t in report.missing],
            "cached": report.cached, "network_requests": report.network_requests}


def cmd_tiles_align(v: dict[str, Any]) -> dict:
    from .datasets import split_train_test
    from .tiles import tile_manifest

    root = cache_root(v["out"])
    styles = [s.strip() for s in v["styles"].split(",") if s.strip()]
    with stage("tiles", "tile_manifest"):
        manifest = tile_manifest(root, styles)
    with stage("datasets", "split_train_test"):
        manifest = split_train_test(manifest, _split_ratio(v["split"]), v["seed"])
        manifest.write(root)
    write_snapshot(root / SNAPSHOT_NAME, "tiles-align", v)
    return {"root": str(root), "triplets": len(manifest.content_keys())}


def train_config_from(v: dict[str, Any], image_size: int, num_styles: int):
    from .models import ModelConfig
    from .training import TrainConfig

    content = v["content_dim"] if v["variant"] == "fen" else 0
    model = ModelConfig(image_size=image_size, latent_dim=v["latent_dim"], content_dim=content,
                        num_styles=num_styles, variant=v["variant"])
    return TrainConfig(model=model, beta=v["beta"], gamma=v["gamma"], learning_rate=v["lr"],
                       head_learning_rate=v["head_lr"], batch_triplets=v["batch"], epochs=v["epochs"],
                       seed=v["seed"], checkpoint_every=v["checkpoint_every"],
                       log_wall_time=v["log_wall_time"])


def cmd_train(v: dict[str, Any]) -> dict:
    from .errors import ConfigurationError
    from .training import JsonlSink, summarize_epochs, train

    data = _load_data(v)
    if "train" not in data:
        raise StageError("datasets", "load_triplet_array", ValueError("no training triplets"))
    tr = data["train"]
    try:
        config = train_config_from(v, tr.images.shape[-1], len(tr.style_names))
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    out = Path(v["out"])
    write_snapshot(out / SNAPSHOT_NAME, "train", v)
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    sink = JsonlSink(out / "metrics.jsonl", append=bool(v["resume"]))
    try:
        with stage("training", "train"):
            result = train(config, tr, sink, out / "checkpoints", v["resume"] or None)
    finally:
        sink.close()
    summary = summarize_epochs(result.records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"out": str(out), "steps": result.state.iteration,
            "checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None}


def cmd_eval(v: dict[str, Any]) -> dict:
    from .transfer import StyleClassifier, disentanglement_report, dsed_cross_style_rates, off_diagonal_mean

    _require(v, "checkpoint")
    state = _load_model(v["checkpoint"])
    data = _load_data(v)
    if "train" not in data or "test" not in data:
        raise StageError("datasets", "load_triplet_array", ValueError("eval needs both train and test splits"))
    out = Path(v["out"])
    if state.config.variant == "fen":
        with stage("transfer", "disentanglement_report"):
            report = disentanglement_report(state.model, data["train"], data["test"], v["seed"], v["pairs"]).to_dict()
    else:
        with stage("transfer", "dsed_cross_style_rates"):
            clf = StyleClassifier.fit(data["train"], v["seed"])
            rates = dsed_cross_style_rates(state.model, data["test"], clf)
        report = {"cross_style_rates": rates.tolist(), "cross_style_rate": off_diagonal_mean(rates),
                  "n_eval": len(data["test"])}
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    write_snapshot(out / SNAPSHOT_NAME, "eval", v)
    return report


def cmd_transfer(v: dict[str, Any]) -> dict:
    from .datasets import read_png, to_tensor_image, write_png
    from .transfer import _to_uint8_hwc, style_transfer

    _require(v, "checkpoint", "content", "style")
    state = _load_model(v["checkpoint"])
    if state.config.variant != "fen":
        raise UsageError("transfer needs a fen checkpoint")
    with stage("datasets", "read_png"):
        a, b = to_tensor_image(read_png(Path(v["content"]))), to_tensor_image(read_png(Path(v["style"])))
    with stage("transfer", "style_transfer"):
        out = style_transfer(state.model, a, b)
    write_png(Path(v["out"]), _to_uint8_hwc(out))
    write_snapshot(_file_snapshot_path(v["out"]), "transfer", v)
    return {"out": v["out"]}


def cmd_grid(v: dict[str, Any]) -> dict:
    import torch

    from .transfer import emit_image_grid, reconstruct, style_transfer

    _require(v, "checkpoint")
    state = _load_model(v["checkpoint"])
    if state.config.variant != "fen":
        raise UsageError("grid needs a fen checkpoint")
    data = _load_data(v)
    test = data.get("test") or data["train"]
    n = min(v["columns"], len(test))
    inputs = test.images[:n, 0]
    with stage("transfer", "style_transfer"):
        rows = [list(inputs), list(reconstruct(state.model, inputs))]
        labels = [f"input ({test.style_names[0]})", "reconstruction"]
        for s, name in enumerate(test.style_names):
            donors = test.images[torch.roll(torch.arange(n), 1), s]
            rows.append(list(style_transfer(state.model, inputs, donors)))
            labels.append(f"content + style {name}")
    with stage("transfer", "emit_image_grid"):
        emit_image_grid(rows, labels, v["out"])
    write_snapshot(_file_snapshot_path(v["out"]), "grid", v)
    return {"out": v["out"], "rows": len(rows), "columns": n}


HANDLERS = {
    "dataset-gen": cmd_dataset_gen,
    "tiles-fetch": cmd_tiles_fetch,
    "tiles-align": cmd_tiles_align,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "grid": cmd_grid,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dislab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (desc, params) in COMMANDS.items():
        sp = sub.add_parser(name, help=desc, description=desc)
        sp.add_argument("--config", default=None, help="flat key = value config file (default: none)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; applied after --config (default: none)")
        sp.add_argument("--dry-run", action="store_true",
                        help="resolve and print the configuration, then exit (default: off)")
        for p in params:
            default = "none" if p.default is None else repr(p.default) if p.default == "" else p.default
            kw: dict[str, Any] = {"dest": p.name, "default": argparse.SUPPRESS,
                                  "help": f"{p.help} (default: {default})"}
            if p.parse is _parse_bool:
                kw["action"] = argparse.BooleanOptionalAction
            else:
                kw["type"] = p.parse
                kw["metavar"] = p.name.upper()
                if p.choices:
                    kw["choices"] = p.choices
            sp.add_argument(p.option, **kw)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(ns.command, ns)
        if ns.dry_run:
            print(json.dumps(snapshot(ns.command, values), indent=2, sort_keys=True))
            return EXIT_OK
        result = HANDLERS[ns.command](values)
    except UsageError as e:
        print(f"dislab {ns.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"dislab {ns.command}: error in {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as e:
        print(f"dislab {ns.command}: error in cli.{ns.command.replace('-', '_')} failed: "
              f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
