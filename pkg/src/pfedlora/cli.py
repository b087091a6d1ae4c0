"""Command-line entry point.

Subcommands::

    pfedlora partition --out DIR [options]   partition.csv
    pfedlora search    --out DIR [options]   per-client masks + similarity.csv
    pfedlora train     --out DIR [options]   full run: manifest, CSVs, adapters
    pfedlora eval      --run DIR             eval.csv from saved adapters
    pfedlora masks     --run DIR             similarity.csv from saved masks

Options come from ``--config FILE`` (``key = value`` lines), then
``--set key=value`` overrides, then the dedicated flags; later sources win.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric error, 5 I/O error, 6 protocol error, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .adapters import load_checkpoint, save_checkpoint
from .backbone import InjectionSite
from .config import parse_overrides, read_config, read_manifest, write_manifest
from .data import PartitionSpec, partition, write_partition_csv
from .exceptions import ConfigError, DataError, PfedloraError, StorageError
from .federation import (RunConfig, evaluate_client, load_backbone, load_corpus, make_clients,
                         prepare, run_federated)
from .metrics import emit, similarity_matrix, write_final_eval

log = logging.getLogger("pfedlora")

# flag name -> RunConfig field
FLAGS = {
    "method": str, "clients": int, "participation": float, "rounds": int,
    "local_epochs": int, "prune_epochs": int, "rank": int, "sparsity": float,
    "levels": str, "metric": str, "aggregation": str, "finetune_init": str,
    "partition": str, "classes_per_client": int, "beta": float, "corpus": str,
    "per_category": int, "lr": float, "momentum": float, "batch_size": int,
    "micro_batch": int, "seed": int, "data_seed": int, "backbone_seed": int,
    "backbone": str,
}
_FIELD_FOR_FLAG = {"levels": "level_ranks", "backbone": "backbone_path"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfedlora", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("partition", "search", "train"):
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key = value config file (e.g. a manifest)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel client workers (does not change results)")
        for flag, kind in FLAGS.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind, default=None)
    for name in ("eval", "masks"):
        p = sub.add_parser(name, help=f"{name} on a finished run directory")
        p.add_argument("--run", required=True, help="directory written by 'train'")
        p.add_argument("--out", help="output directory (default: the run directory)")
        p.add_argument("--workers", type=int, default=1)
        if name == "masks":
            p.add_argument("--site", default="L0.query",
                           help="site like L0.query, or 'all' to average every site")
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config(args.config))
    values.update(parse_overrides(args.set))
    for flag in FLAGS:
        v = getattr(args, flag)
        if v is None:
            continue
        key = _FIELD_FOR_FLAG.get(flag, flag)
        if key == "level_ranks":
            v = tuple(int(x) for x in v.split(",") if x.strip())
        values[key] = v
    return RunConfig(**values)


def _client_site_path(root: Path, cid: int, site: InjectionSite) -> Path:
    return root / "adapters" / f"client_{cid:03d}_{site}.txt"


def write_masks(registry, out_dir: Path) -> None:
    """One text file per client: ``site <site> <a|b> rows cols`` then 0/1 rows."""
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for cid, masks in sorted(registry.items()):
        lines = ["# pfedlora masks v1", f"client {cid}"]
        for site in sorted(masks):
            for tag, m in zip("ab", masks[site]):
                lines.append(f"site {site} {tag} {m.shape[0]} {m.shape[1]}")
                lines += ["".join("1" if b else "0" for b in row) for row in m]
        (mask_dir / f"client_{cid:03d}.txt").write_text("\n".join(lines) + "\n")


def read_masks(run_dir: Path) -> dict:
    registry = {}
    files = sorted((run_dir / "masks").glob("client_*.txt"))
    if not files:
        raise StorageError(f"no mask files under {run_dir / 'masks'}")
    for path in files:
        lines = path.read_text().splitlines()
        if not lines or lines[0] != "# pfedlora masks v1":
            raise DataError(f"{path}: not a mask file")
        cid = int(lines[1].split()[1])
        masks, i = {}, 2
        while i < len(lines):
            _, site, tag, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            m = np.array([[c == "1" for c in ln] for ln in lines[i + 1:i + 1 + rows]], bool)
            if m.shape != (rows, cols):
                raise DataError(f"{path}: mask {site}/{tag} has shape {m.shape}")
            masks.setdefault(InjectionSite.parse(site), [None, None])["ab".index(tag)] = m
            i += 1 + rows
        registry[cid] = {s: tuple(v) for s, v in masks.items()}
    return registry


def cmd_partition(args, config: RunConfig, out: Path) -> None:
    corpus = load_corpus(config)
    spec = PartitionSpec(config.partition, config.clients, config.data_seed,
                         config.classes_per_client, config.beta)
    write_partition_csv(partition(corpus, spec), out / "partition.csv")
    write_manifest(config, out / "manifest.txt")


def cmd_search(args, config: RunConfig, out: Path) -> None:
    _, _, server = prepare(config, args.workers)
    write_masks(server.registry, out)
    if len(server.registry) >= 2:
        similarity_matrix(server.registry, InjectionSite(0, "query")).to_csv(out / "similarity.csv")
    write_manifest(config, out / "manifest.txt")


def cmd_train(args, config: RunConfig, out: Path) -> None:
    def progress(report):
        log.info("round %d: train loss %.4f, eval ppl %.3f",
                 report.round, report.mean_train_loss, report.mean_eval_ppl)

    result = run_federated(config, args.workers, progress=progress)
    write_manifest(config, out / "manifest.txt")
    emit(result, out)
    write_masks(result.server.registry, out)
    (out / "adapters").mkdir(exist_ok=True)
    for client in result.clients:
        for site, pair in client.adapters.items():
            save_checkpoint(pair, _client_site_path(out, client.client_id, site), client.client_id)
    log.info("final mean eval perplexity %.4f", result.final_mean_ppl)


def cmd_eval(args, run_dir: Path, out: Path) -> None:
    config = read_manifest(run_dir / "manifest.txt")
    backbone = load_backbone(config)
    clients = make_clients(config, load_corpus(config))
    finals = {}
    for client in clients:
        client.adapters = {site: load_checkpoint(_client_site_path(run_dir, client.client_id, site))[0]
                           for site in client.adapters}
        finals[client.client_id] = evaluate_client(client, backbone)
    write_final_eval(finals, out / "eval.csv")
    vals = [r.perplexity for r in finals.values() if not r.skipped]
    log.info("mean eval perplexity %.4f over %d clients", float(np.mean(vals)), len(vals))


def cmd_masks(args, run_dir: Path, out: Path) -> None:
    registry = read_masks(run_dir)
    site = None if args.site == "all" else InjectionSite.parse(args.site)
    similarity_matrix(registry, site).to_csv(out / "similarity.csv")


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command in ("eval", "masks"):
            run_dir = Path(args.run)
            out = Path(args.out) if args.out else run_dir
            out.mkdir(parents=True, exist_ok=True)
            {"eval": cmd_eval, "masks": cmd_masks}[args.command](args, run_dir, out)
        else:
            config = resolve_config(args)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            {"partition": cmd_partition, "search": cmd_search,
             "train": cmd_train}[args.command](args, config, out)
    except PfedloraError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FloatingPointError as exc:
        log.error("numeric error: %s", exc)
        return 4
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return StorageError.exit_code
    return 0


def main() -> None:
    sys.exit(run())
