"""``opsaddle`` command line front end.

All file I/O of the package lives here.  Every output embeds the config hash
(JSON files as a ``config_hash`` field, CSV files as a leading
``# config_hash: ...`` line), and numbers are written with ``repr`` so that
re-reading them is exact.  Wall-clock fields are written as 0 unless the
config sets ``timing``, which keeps repeated runs byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import experiments
from .config import ExperimentConfig, apply_overrides, build_instance, build_mdp, mdp_to_dict, validate_config
from .errors import InvalidInputError, NumericalFailure, OpsaddleError
from .linear import FeatureMaps
from .mdp import OfflineDataset, TabularMdp
from .oracles import COMPARISON_HEADER

THREADS_ENV = "OPSADDLE_THREADS"


# Reading and writing.

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_to_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidInputError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path} is not valid JSON: {exc}") from exc


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, (bool, np.bool_, np.integer)) else str(v)


def write_csv(path: Path, header, rows, config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue())


def read_csv(path) -> tuple[str | None, list[str], list[list[str]]]:
    """``(config_hash, header, rows)`` of a file written by :func:`write_csv`."""
    lines = Path(path).read_text().splitlines()
    digest = None
    if lines and lines[0].startswith("# config_hash:"):
        digest = lines[0].split(":", 1)[1].strip()
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows:
        raise InvalidInputError(f"{path} has no header")
    return digest, rows[0], rows[1:]


def read_mdp(path) -> TabularMdp:
    obj = read_json(path)
    missing = {"transition", "reward", "nu0", "gamma"} - set(obj)
    if missing:
        raise InvalidInputError(f"mdp file lacks {sorted(missing)}")
    return build_mdp({k: v for k, v in obj.items() if k != "config_hash"})


def read_features(path) -> FeatureMaps:
    obj = read_json(path)
    return FeatureMaps(np.array(obj["phi_w"], dtype=float), np.array(obj["phi_q"], dtype=float))


DATASET_HEADER = ("s", "a", "r", "s_next")


def read_dataset(path, n_states: int, n_actions: int) -> OfflineDataset:
    _, header, rows = read_csv(path)
    if tuple(header) != DATASET_HEADER:
        raise InvalidInputError(f"dataset header must be {DATASET_HEADER}")
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    return OfflineDataset(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                          np.array(cols[2], dtype=float), np.array(cols[3], dtype=np.int64),
                          n_states, n_actions)


def _resolve_files(raw: dict, base: Path) -> dict:
    """Replace ``{"file": path}`` references by the inline objects they name."""
    raw = dict(raw)
    spec = raw.get("mdp_spec")
    if isinstance(spec, dict) and set(spec) == {"file"}:
        obj = read_json(base / spec["file"])
        raw["mdp_spec"] = {k: v for k, v in obj.items() if k != "config_hash"}
    beh = raw.get("behavior")
    if isinstance(beh, dict) and set(beh) == {"file"}:
        obj = read_json(base / beh["file"])
        raw["behavior"] = {"mu": obj["mu"] if isinstance(obj, dict) else obj}
    return raw


def load_config(path, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise InvalidInputError("config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["output_dir"] = out
    return validate_config(_resolve_files(raw, path.parent))


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in cfg.as_dict().items() if k != "output_dir"}
    write_json(out / "config.json", {"config_hash": cfg.config_hash(), "config": resolved})
    return out


def _threads(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise InvalidInputError(f"{THREADS_ENV} must be an integer") from exc
        if cap < 1:
            raise InvalidInputError(f"{THREADS_ENV} must be at least 1")
    return max(1, min(cap, n_jobs))


# Commands.

def _config_options(f):
    f = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Set a config field or pin a schedule constant (repeatable).")(f)
    f = click.option("--out", default=None, help="Output directory (overrides output_dir).")(f)
    f = click.option("--seed", type=int, default=None, help="Run this single seed instead of config seeds.")(f)
    f = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                     help="JSON experiment configuration.")(f)
    return f


@click.group()
def main():
    """Offline policy optimization via linear saddle-point problems."""


@main.command()
@_config_options
def generate(config_path, seed, out, overrides):
    """Write mdp.json, features.json, dataset.csv and constants.json."""
    cfg = load_config(config_path, overrides, seed, out)
    seed = cfg.seeds[0]
    inst = build_instance(cfg, seed)
    h = cfg.config_hash()
    out = _prepare_out(cfg)
    write_json(out / "mdp.json", {"config_hash": h, **mdp_to_dict(inst.mdp)})
    F = inst.features
    write_json(out / "features.json", {"config_hash": h, "dim_z": F.dim_z, "dim_xi": F.dim_xi,
                                       "phi_w": F.phi_w.tolist(), "phi_q": F.phi_q.tolist()})
    ds = inst.dataset
    if ds is None:
        rows = []
    else:
        rows = [(int(s), int(a), float(r), int(sn)) for s, a, r, sn in zip(ds.s, ds.a, ds.r, ds.s_next)]
    write_csv(out / "dataset.csv", DATASET_HEADER, rows, h)
    constants = experiments.instance_constants(cfg, inst)
    write_json(out / "constants.json", {"config_hash": h, "seed": seed, "constants": constants.as_dict()})
    click.echo(f"wrote instance files to {out}")


@main.command()
@_config_options
def run(config_path, seed, out, overrides):
    """Run the configured algorithm for every seed; write traces, results and the aggregate."""
    cfg = load_config(config_path, overrides, seed, out)
    experiments.split_overrides(cfg)
    h = cfg.config_hash()
    out = _prepare_out(cfg)

    def one(s):
        t0 = time.perf_counter()
        res = experiments.run_seed(cfg, s)
        res.result["wallclock_s"] = time.perf_counter() - t0 if cfg.timing else 0.0
        return res

    with ThreadPoolExecutor(max_workers=_threads(len(cfg.seeds))) as pool:
        results = list(pool.map(one, cfg.seeds))
    for res in results:
        write_csv(out / f"trace_seed{res.seed}.csv", res.trace.columns, res.trace.table(), h)
        write_json(out / f"result_seed{res.seed}.json",
                   {"config_hash": h, "seed": res.seed, "algorithm": cfg.algorithm, "result": res.result,
                    "schedule": res.schedule, "constants": res.constants.as_dict()})
    agg = experiments.aggregate([r.trace for r in results], [r.result for r in results])
    write_json(out / "aggregate.json", {"config_hash": h, "algorithm": cfg.algorithm,
                                        "seeds": list(cfg.seeds), **agg})
    click.echo(f"{cfg.algorithm}: {len(results)} seed(s) written to {out}")


@main.command("compare-oracles")
@_config_options
def compare_oracles_cmd(config_path, seed, out, overrides):
    """Oracle error against sample budget; writes oracle_comparison.csv."""
    cfg = load_config(config_path, overrides, seed, out)
    seed = cfg.seeds[0]
    timer = None if cfg.timing else (lambda: 0.0)
    rows = experiments.oracle_comparison(cfg, seed, timer)
    out = _prepare_out(cfg)
    write_csv(out / "oracle_comparison.csv", COMPARISON_HEADER, [tuple(r) for r in rows], cfg.config_hash())
    click.echo(f"wrote {len(rows)} rows to {out / 'oracle_comparison.csv'}")


@main.command("bias-report")
@_config_options
def bias_report_cmd(config_path, seed, out, overrides):
    """Bias terms of the surrogate gradient; writes bias_report.json."""
    cfg = load_config(config_path, overrides, seed, out)
    seed = cfg.seeds[0]
    summary = experiments.bias_summary(cfg, seed)
    out = _prepare_out(cfg)
    write_json(out / "bias_report.json", {"config_hash": cfg.config_hash(), "seed": seed, **summary})
    click.echo(f"wrote {out / 'bias_report.json'}")


@main.command()
@_config_options
def check(config_path, seed, out, overrides):
    """Run the invariant suite on the configured instance; exits 4 if any check fails."""
    cfg = load_config(config_path, overrides, seed, out)
    seed = cfg.seeds[0]
    checks = experiments.invariant_checks(cfg, seed)
    out = _prepare_out(cfg)
    write_json(out / "check.json", {"config_hash": cfg.config_hash(), "seed": seed,
                                    "checks": [{"name": c.name, "value": c.value, "tol": c.tol, "ok": c.ok}
                                               for c in checks]})
    for c in checks:
        click.echo(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.value:.3e} (tol {c.tol:.0e})")
    failed = [c.name for c in checks if not c.ok]
    if failed:
        raise NumericalFailure(f"invariant checks failed: {', '.join(failed)}")


def run_cli(argv=None) -> int:
    """Entry point mapping package errors to exit codes."""
    try:
        main.main(args=argv, prog_name="opsaddle", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        return 1
    except OpsaddleError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return 0


def entry() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    entry()
