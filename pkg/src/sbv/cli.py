"""Command-line entry point: ``sbv <subcommand> [options]``.

Per-cell pipeline (one phi, one seed):

* ``gen-data``          simulate a toy dataset and split it by trajectory
* ``train-candidates``  train the FQI grid (plus the Q* estimate) and write its manifest
* ``rank``              score the candidates with every configured selector
* ``evaluate``          Monte Carlo truth for each candidate plus ranking metrics

Experiments:

* ``sweep``             selectors across stochasticity levels and seeds
* ``groups``            oracle-MSBE bands against true returns
* ``ablate-split``      same-train versus separate-half backup fitting
* ``fqe-sensitivity``   FQE backend sensitivity across two candidate families
* ``verify-props``      exact tabular checks of the error bounds and oracles

Every command reads an optional JSON config (see :data:`CONFIG_DEFAULTS`),
writes CSV reports plus an ``effective_config.json`` echo, and logs to
stderr. Outputs are staged and only moved into place once the command
succeeds. Failures print one ``error: kind=... message=...`` line and exit
nonzero (2 for usage or config errors, 1 for runtime errors).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .candidates import read_manifest, write_manifest
from .data import (DatasetSplit, fmt_float, read_dataset_csv,
                   write_dataset_csv)
from .harness import (ABLATION_HEADER, BAND_HEADER, CELL_HEADER, FQE_CROSS_HEADER, FQE_HEADER,
                      GROUP_HEADER, TRUTH_HEADER, FqeFamily, ToyExperimentConfig,
                      ablation_win_rate, cell_metrics, default_fqe_families, evaluate_truth,
                      fqe_backend_gap, fqe_match_rates, fqe_sensitivity_experiment,
                      msbe_group_experiment, noise_sweep_experiment,
                      run_methods, split_ablation_experiment,
                      toy_candidates, toy_dataset, toy_split)
from .regression import spec_from_dict, spec_to_dict
from .selectors import SCORES_HEADER, score_rows
from .tabular import read_tabular_mdp
from .verify import format_results, mdp_suite, run_all

log = logging.getLogger("sbv")


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def write_report(records: Sequence[dict], path: str | Path, header: Sequence[str]) -> None:
    """Write records as CSV in ``header`` order with 17-significant-digit floats."""
    if not records:
        raise ValueError(f"refusing to write an empty report to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            missing = [h for h in header if h not in r]
            if missing:
                raise ValueError(f"record lacks columns {missing}")
            w.writerow([_cell(r[h]) for h in header])


def _parse_cell(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_report(path: str | Path) -> tuple[list[str], list[dict]]:
    """Read a report back; numeric cells become int or float."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [dict(zip(header, (_parse_cell(c) for c in row))) for row in reader]


class StagedOutput:
    """Collects files in a temporary sibling of ``out`` and moves them in on success."""

    def __init__(self, out: str | Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.out.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.tmp.iterdir()):
                os.replace(f, self.out / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _default_families() -> list:
    return [{"name": f.name, "fqi_regressors": [spec_to_dict(r) for r in f.fqi_regressors],
             "backend": spec_to_dict(f.backend)} for f in default_fqe_families()]


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated CLI configuration: toy experiment settings plus experiment layout."""

    toy: ToyExperimentConfig = field(default_factory=ToyExperimentConfig)
    phis: tuple = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    seeds: tuple = tuple(range(10))
    group_phi: float = 0.25
    oracle: dict = field(default_factory=lambda: {"k": 100, "fit_shape": [2000, 100],
                                                  "eval_shape": [1000, 25], "s1_weight": 2.0})
    ablation_phis: tuple = (0.0, 0.25)
    fqe_phis: tuple = (0.0, 0.25)
    fqe_families: tuple = field(default_factory=lambda: tuple(_default_families()))
    output_dir: str = "out"

    @property
    def oracle_kw(self) -> dict:
        o = dict(self.oracle)
        return {"k": int(o["k"]), "fit_shape": tuple(o["fit_shape"]),
                "eval_shape": tuple(o["eval_shape"]), "s1_weight": float(o["s1_weight"])}

    @property
    def families(self) -> tuple[FqeFamily, ...]:
        return tuple(FqeFamily(f["name"], tuple(spec_from_dict(r) for r in f["fqi_regressors"]),
                               spec_from_dict(f["backend"])) for f in self.fqe_families)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.toy.to_dict().items()}
        d.update({"phis": list(self.phis), "seeds": list(self.seeds), "group_phi": self.group_phi,
                  "oracle": dict(self.oracle), "ablation_phis": list(self.ablation_phis),
                  "fqe_phis": list(self.fqe_phis), "fqe_families": [dict(f) for f in self.fqe_families],
                  "output_dir": self.output_dir})
        return d


_TOY_KEYS = {f.name for f in fields(ToyExperimentConfig)}
_LAYOUT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"toy"}
CONFIG_DEFAULTS = ExperimentConfig().to_dict()


def _phi_list(v, key: str, errors: list) -> tuple:
    try:
        out = tuple(float(x) for x in v)
    except (TypeError, ValueError):
        errors.append(f"{key} must be a list of numbers")
        return ()
    if not out:
        errors.append(f"{key} must not be empty")
    if any(not 0.0 <= p <= 0.25 for p in out):
        errors.append(f"{key} values must lie in [0, 0.25]")
    return out


def _seed_list(v, errors: list) -> tuple:
    if isinstance(v, int) and not isinstance(v, bool):
        if v < 1:
            errors.append("seeds must be >= 1 when given as a count")
        return tuple(range(v))
    try:
        out = tuple(int(s) for s in v)
    except (TypeError, ValueError):
        errors.append("seeds must be a count or a list of integers")
        return ()
    if not out or any(s < 0 for s in out) or len(set(out)) != len(out):
        errors.append("seeds must be distinct nonnegative integers")
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a config mapping; every problem is reported at once."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    errors = []
    unknown = sorted(set(raw) - _TOY_KEYS - _LAYOUT_KEYS)
    if unknown:
        errors.append(f"unknown keys {unknown}")
    toy = None
    try:
        toy = ToyExperimentConfig(**{k: raw[k] for k in _TOY_KEYS if k in raw})
    except (TypeError, ValueError) as exc:
        errors.append(str(exc))
    kw = {}
    if "phis" in raw:
        kw["phis"] = _phi_list(raw["phis"], "phis", errors)
    if "ablation_phis" in raw:
        kw["ablation_phis"] = _phi_list(raw["ablation_phis"], "ablation_phis", errors)
    if "fqe_phis" in raw:
        kw["fqe_phis"] = _phi_list(raw["fqe_phis"], "fqe_phis", errors)
    if "seeds" in raw:
        kw["seeds"] = _seed_list(raw["seeds"], errors)
    if "group_phi" in raw:
        phi = _phi_list([raw["group_phi"]], "group_phi", errors)
        if phi:
            kw["group_phi"] = phi[0]
    if "oracle" in raw:
        o = raw["oracle"]
        want = {"k", "fit_shape", "eval_shape", "s1_weight"}
        if not isinstance(o, dict) or set(o) != want:
            errors.append(f"oracle must have exactly the keys {sorted(want)}")
        elif (int(o["k"]) < 1 or float(o["s1_weight"]) <= 0
              or any(len(o[s]) != 2 or min(o[s]) < 1 for s in ("fit_shape", "eval_shape"))):
            errors.append("oracle needs k >= 1, s1_weight > 0 and two positive entries per shape")
        else:
            kw["oracle"] = {"k": int(o["k"]), "fit_shape": [int(x) for x in o["fit_shape"]],
                            "eval_shape": [int(x) for x in o["eval_shape"]], "s1_weight": float(o["s1_weight"])}
    if "fqe_families" in raw:
        fams = raw["fqe_families"]
        try:
            if len(fams) != 2:
                raise ValueError("exactly two families are compared")
            norm = []
            for f in fams:
                if set(f) != {"name", "fqi_regressors", "backend"} or not f["fqi_regressors"]:
                    raise ValueError("each family needs name, a nonempty fqi_regressors list and backend")
                regs = [spec_to_dict(spec_from_dict(r)) for r in f["fqi_regressors"]]
                norm.append({"name": str(f["name"]), "fqi_regressors": regs,
                             "backend": spec_to_dict(spec_from_dict(f["backend"]))})
            if norm[0]["name"] == norm[1]["name"]:
                raise ValueError("family names must differ")
            kw["fqe_families"] = tuple(norm)
        except (TypeError, ValueError, KeyError) as exc:
            errors.append(f"fqe_families: {exc}")
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
            errors.append("output_dir must be a nonempty string")
        else:
            kw["output_dir"] = raw["output_dir"]
    if errors:
        raise UsageError("invalid config: " + "; ".join(errors))
    return ExperimentConfig(toy=toy, **kw)


def parse_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON config file; ``None`` gives all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Per-cell pipeline
# ---------------------------------------------------------------------------

CELL_FILE = "cell.json"


def _write_text(path: Path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _load_cell(data_dir: Path, cfg: ExperimentConfig) -> tuple[float, int, DatasetSplit]:
    try:
        with open(data_dir / CELL_FILE) as fh:
            cell = json.load(fh)
        mdp = cfg.toy.mdp_config
        train = read_dataset_csv(data_dir / "train.csv", mdp)
        val = read_dataset_csv(data_dir / "validation.csv", mdp)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{data_dir} is not a gen-data output: {exc}") from None
    return float(cell["phi"]), int(cell["seed"]), DatasetSplit(train, val, int(cell["split_seed"]))


def _cell_candidates(data_dir: Path, cfg: ExperimentConfig, phi: float, seed: int, split: DatasetSplit):
    cands = toy_candidates(phi, seed, split.train, cfg.toy)
    manifest = data_dir / "manifest.csv"
    if manifest.exists():
        ids = [r["id"] for r in read_manifest(manifest)]
        if ids != cands.ids:
            raise UsageError(f"{manifest} does not match the configured candidate grid; rerun train-candidates")
    return cands


def cmd_gen_data(args, cfg: ExperimentConfig) -> None:
    data = toy_dataset(args.phi, args.seed, cfg.toy)
    split = toy_split(data, args.seed, cfg.toy)
    with StagedOutput(args.out) as tmp:
        write_dataset_csv(data, tmp / "dataset.csv")
        write_dataset_csv(split.train, tmp / "train.csv")
        write_dataset_csv(split.validation, tmp / "validation.csv")
        _write_text(tmp / CELL_FILE, json.dumps({"phi": args.phi, "seed": args.seed,
                                                 "split_seed": split.seed}, sort_keys=True) + "\n")
        _write_text(tmp / "effective_config.json", config_json(cfg))
    log.info("command=gen-data phi=%g seed=%d transitions=%d", args.phi, args.seed, data.num_transitions)


def cmd_train_candidates(args, cfg: ExperimentConfig) -> None:
    data_dir = Path(args.data)
    phi, seed, split = _load_cell(data_dir, cfg)
    cands = toy_candidates(phi, seed, split.train, cfg.toy)
    with StagedOutput(args.out or data_dir) as tmp:
        write_manifest(cands, tmp / "manifest.csv")
        _write_text(tmp / "effective_config.json", config_json(cfg))
    log.info("command=train-candidates phi=%g seed=%d candidates=%d", phi, seed, len(cands))


def cmd_rank(args, cfg: ExperimentConfig) -> None:
    data_dir = Path(args.data)
    phi, seed, split = _load_cell(data_dir, cfg)
    cands = _cell_candidates(data_dir, cfg, phi, seed, split)
    rankings = run_methods(cands, split, cfg.toy, f"phi={phi:g} seed={seed}", seed)
    rows = [r for ranked in rankings.values() for r in score_rows(ranked)]
    with StagedOutput(args.out or data_dir) as tmp:
        write_report(rows, tmp / "scores.csv", SCORES_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    data_dir = Path(args.data)
    phi, seed, split = _load_cell(data_dir, cfg)
    cands = _cell_candidates(data_dir, cfg, phi, seed, split)
    truth = evaluate_truth(phi, cands, seed, cfg.toy)
    truth_rows = [{"phi": phi, "seed": seed, "candidate_id": t.candidate_id, "value": t.value, "se": t.se}
                  for t in truth]
    metrics = []
    if not args.no_rank:
        rankings = run_methods(cands, split, cfg.toy, f"phi={phi:g} seed={seed}", seed)
        metrics = [cell_metrics(phi, seed, ranked, truth, cfg.toy.top_k) for ranked in rankings.values()]
    with StagedOutput(args.out or data_dir) as tmp:
        write_report(truth_rows, tmp / "truth.csv", TRUTH_HEADER)
        if metrics:
            write_report(metrics, tmp / "metrics.csv", CELL_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _experiment_out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.output_dir)


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    res = noise_sweep_experiment(cfg.phis, cfg.seeds, cfg.toy)
    with StagedOutput(_experiment_out(args, cfg)) as tmp:
        write_report(res.cells, tmp / "cells.csv", CELL_HEADER)
        write_report(res.summary, tmp / "summary.csv", CELL_HEADER)
        write_report(res.scores, tmp / "scores.csv", ["phi", "seed"] + SCORES_HEADER)
        write_report(res.truth, tmp / "truth.csv", TRUTH_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))
    for r in res.summary:
        print(f"phi={fmt_float(r['phi'])} method={r['method']} top3_mean={r['top3_mean']:.4f} "
              f"top3_max={r['top3_max']:.4f} spearman={r['spearman']:.4f} {r['flag']}".rstrip())


def cmd_groups(args, cfg: ExperimentConfig) -> None:
    rows, bands = msbe_group_experiment(cfg.group_phi, cfg.seeds, cfg.toy, cfg.oracle_kw)
    with StagedOutput(_experiment_out(args, cfg)) as tmp:
        write_report(rows, tmp / "groups.csv", GROUP_HEADER)
        write_report(bands, tmp / "bands.csv", BAND_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))
    for r in bands:
        print(f"seed={r['seed']} band={r['band']} count={r['count']} min_value={r['min_value']:.4f}")


def cmd_ablate_split(args, cfg: ExperimentConfig) -> None:
    rows = split_ablation_experiment(cfg.ablation_phis, cfg.seeds, cfg.toy)
    with StagedOutput(_experiment_out(args, cfg)) as tmp:
        write_report(rows, tmp / "ablation.csv", ABLATION_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))
    print(f"same_train_win_rate={ablation_win_rate(rows):.4f}")


def cmd_fqe_sensitivity(args, cfg: ExperimentConfig) -> None:
    rows, cross = fqe_sensitivity_experiment(cfg.families, cfg.seeds, cfg.toy, cfg.fqe_phis)
    with StagedOutput(_experiment_out(args, cfg)) as tmp:
        write_report(rows, tmp / "fqe_cells.csv", FQE_HEADER)
        write_report(cross, tmp / "fqe_cross.csv", FQE_CROSS_HEADER)
        _write_text(tmp / "effective_config.json", config_json(cfg))
    match, cross_rate = fqe_match_rates(rows)
    print(f"self_preference={match:.4f} cross_preference={cross_rate:.4f}")
    for phi, gap, se in fqe_backend_gap(cross):
        print(f"phi={fmt_float(phi)} backend_top3_gap={gap:.4f} pooled_se={se:.4f}")


VERIFY_HEADER = ["check", "cases", "worst", "tolerance", "passed"]


def cmd_verify_props(args, cfg: ExperimentConfig) -> int:
    if args.mdp:
        try:
            results = mdp_suite([read_tabular_mdp(p) for p in args.mdp], seed=args.seed)
        except (OSError, ValueError, IndexError) as exc:
            raise UsageError(f"bad MDP file: {exc}") from None
    else:
        results = run_all(args.seeds, args.seed)
    print(format_results(results))
    if args.out:
        with StagedOutput(args.out) as tmp:
            write_report([{"check": r.name, "cases": r.cases, "worst": r.worst, "tolerance": r.tolerance,
                           "passed": r.passed} for r in results], tmp / "props.csv", VERIFY_HEADER)
    failed = [r.name for r in results if not r.passed]
    if failed:
        _error("check", f"failed checks: {','.join(failed)}")
        return 1
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _phi_arg(s: str) -> tuple:
    try:
        vals = tuple(float(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {s!r}") from None
    if any(not 0.0 <= v <= 0.25 for v in vals):
        raise argparse.ArgumentTypeError("phi values must lie in [0, 0.25]")
    return vals


def _count_arg(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbv", description="Offline model selection with supervised Bellman validation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        sp.add_argument("--out", help=out_help)
        return sp

    sp = common(sub.add_parser("gen-data", help="simulate and split one toy dataset"))
    sp.add_argument("--phi", type=float, required=True, help="stochasticity in [0, 0.25]")
    sp.add_argument("--seed", type=int, default=0, help="cell seed")
    for name, hlp in (("train-candidates", "train the candidate grid for a gen-data directory"),
                      ("rank", "score the candidates with every configured method"),
                      ("evaluate", "true values and ranking metrics for a gen-data directory")):
        sp = common(sub.add_parser(name, help=hlp), "output directory (default: the data directory)")
        sp.add_argument("--data", required=True, help="directory written by gen-data")
        if name == "evaluate":
            sp.add_argument("--no-rank", action="store_true", help="skip the ranking metrics")
    for name, hlp in (("sweep", "selectors across phi values and seeds"),
                      ("groups", "oracle MSBE bands against true returns"),
                      ("ablate-split", "same-train versus separate-half backup fitting"),
                      ("fqe-sensitivity", "FQE backend sensitivity over two candidate families")):
        sp = common(sub.add_parser(name, help=hlp), "output directory (default: output_dir from the config)")
        sp.add_argument("--phi", type=_phi_arg, help="comma-separated phi values (overrides the config)")
        sp.add_argument("--seeds", type=_count_arg, help="use seeds 0..N-1 (overrides the config)")
    sp = sub.add_parser("verify-props", help="exact tabular checks of the bounds and oracle equivalences")
    sp.add_argument("--seeds", type=_count_arg, default=200, help="random MDPs in the bound suite")
    sp.add_argument("--seed", type=int, default=0, help="root seed")
    sp.add_argument("--mdp", action="append", metavar="FILE",
                    help="check the bounds on this tabular MDP file instead (repeatable)")
    sp.add_argument("--out", help="also write props.csv here")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-candidates": cmd_train_candidates, "rank": cmd_rank,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "groups": cmd_groups,
            "ablate-split": cmd_ablate_split, "fqe-sensitivity": cmd_fqe_sensitivity,
            "verify-props": cmd_verify_props}


def _error(kind: str, message: str) -> None:
    print(f"error: kind={kind} message={json.dumps(message)}", file=sys.stderr)


def _apply_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    raw = cfg.to_dict()
    phis = getattr(args, "phi", None)
    if isinstance(phis, tuple):
        key = {"groups": "group_phi", "ablate-split": "ablation_phis", "fqe-sensitivity": "fqe_phis"}.get(
            args.command, "phis")
        if key == "group_phi":
            if len(phis) != 1:
                raise UsageError("groups takes a single --phi value")
            phis = phis[0]
        raw[key] = list(phis) if isinstance(phis, tuple) else phis
    if getattr(args, "seeds", None) is not None and args.command != "verify-props":
        raw["seeds"] = args.seeds
    return config_from_dict(raw)


def run_command(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.command == "gen-data" and not 0.0 <= args.phi <= 0.25:
            raise UsageError("--phi must lie in [0, 0.25]")
        if args.command == "gen-data" and not args.out:
            raise UsageError("gen-data needs --out")
        cfg = _apply_overrides(args, parse_config(getattr(args, "config", None)))
    except UsageError as exc:
        _error("usage", str(exc))
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        code = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        _error("usage", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure becomes one error line
        log.debug("traceback", exc_info=True)
        _error("runtime", f"{args.command}: {type(exc).__name__}: {exc}")
        return 1
    return int(code or 0)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
