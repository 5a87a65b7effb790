"""``g2l`` command line: synth, global, local, g2l and eval.

All artifacts land under ``--out`` with fixed names.  Errors print one line
``G2L-ERROR: <kind>: <message>`` on stderr; exit code 2 means a bad config or
input, 3 a failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (FoldSplit, generate_synthetic, load_dataset, load_folds, make_folds, save_dataset,
                   save_folds, split_sequences)
from .errors import CheckpointError, ConfigError, DatasetError, G2LError, StructureParseError
from .global_search import (GlobalSearchConfig, history_csv, load_checkpoint, run_global_search,
                            save_checkpoint)
from .local_search import LocalSearchState, run_local_search
from .metrics import MetricsReport
from .search_space import DilationStructure, decode_structure, encode_structure
from .tcn import (StructureEvaluator, TcnConfig, TrainingContext, build_model, derive_seed,
                  evaluate_model, load_model, loss_curve_csv, save_model, train_epochs)

log = logging.getLogger("g2lsearch")

HISTORY = "history.csv"
TRAJECTORY = "trajectory.csv"
POPULATION = "population.ckpt"
REPORT = "report.json"
EFFECTIVE_CONFIG = "effective-config.txt"
STRUCTURE = "structure.txt"
LOCAL_CKPT = "local.ckpt"
LOCAL_MODEL = "local-model.bin"
SUMMARY = "summary.json"


class InputError(G2LError):
    """Bad user input discovered after config validation (exit code 2)."""


# ---------------------------------------------------------------------------
# shared plumbing


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / EFFECTIVE_CONFIG).write_text(cfg.echo())
    except OSError as exc:
        raise InputError(f"cannot write to output directory {out}: {exc.strerror}") from None
    return out


def _dataset(cfg: RunConfig):
    """Sequences plus fold splits, from ``data.root`` or generated in memory."""
    root = cfg["data.root"]
    if root:
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"data.root {root} does not exist")
        seqs = load_dataset(root)
        if (root / "folds.json").exists():
            folds = load_folds(root / "folds.json")
        else:
            folds = make_folds([s.id for s in seqs], cfg["data.num_folds"], cfg["seed"])
    else:
        seqs = generate_synthetic(cfg.synth_config())
        folds = make_folds([s.id for s in seqs], cfg["data.num_folds"], cfg["seed"])
    num_classes = 1 + max(int(s.labels.max()) for s in seqs)
    return seqs, folds, num_classes


def _search_split(cfg: RunConfig):
    seqs, folds, num_classes = _dataset(cfg)
    fold = cfg["data.fold"]
    if fold >= len(folds):
        raise ConfigError(f"data.fold={fold} but the dataset has {len(folds)} folds")
    train, val = split_sequences(seqs, folds[fold])
    return train, val, num_classes


@contextmanager
def _mapper(workers: int):
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield lambda fn, items: list(ex.map(fn, items))


def _read_structure(args, default_shape) -> DilationStructure:
    text = getattr(args, "init", None) or getattr(args, "structure", None)
    path = getattr(args, "init_file", None) or getattr(args, "structure_file", None)
    if text and path:
        raise InputError("give the structure inline or as a file, not both")
    if path:
        try:
            text = Path(path).read_text().strip()
        except OSError as exc:
            raise InputError(f"{path}: cannot read structure file ({exc.strerror})") from None
    if not text:
        if len(set(default_shape)) == 1:
            return DilationStructure.exponential(len(default_shape), default_shape[0])
        raise InputError("no structure given and global.shape is ragged")
    return decode_structure(text)


def _write_structure(out: Path, s: DilationStructure, name: str = STRUCTURE) -> None:
    _atomic_write(out / name, encode_structure(s) + "\n")


# ---------------------------------------------------------------------------
# global


def _check_resume_config(saved: dict | None, gcfg: GlobalSearchConfig) -> None:
    if saved is None:
        return
    now = {"iterations": gcfg.iterations, "population_size": gcfg.population_size,
           "mutation_prob": gcfg.mutation_prob, "epochs": gcfg.epochs, "seed": gcfg.seed,
           "k": gcfg.space.k, "T": gcfg.space.T, "shape": list(gcfg.shape)}
    # the iteration budget may grow on resume, everything else must match
    diff = [k for k in now if k != "iterations" and saved.get(k) != now[k]]
    if diff:
        raise ConfigError(f"checkpoint was written with different settings: {', '.join(diff)}")


def _global_phase(args, cfg: RunConfig, out: Path, resume_path=None):
    gcfg = cfg.global_config()
    train, val, num_classes = _search_split(cfg)
    evaluator = StructureEvaluator(train, val, num_classes, cfg["metrics.fitness"], cfg["tcn.hidden"],
                                   cfg.training_config(gcfg.epochs), cfg["seed"])
    resume = None
    if resume_path is not None:
        resume, saved = load_checkpoint(resume_path)
        _check_resume_config(saved, gcfg)

    def checkpoint(state):
        save_checkpoint(out / POPULATION, state, gcfg)
        _atomic_write(out / HISTORY, history_csv(state.history))

    with _mapper(args.workers) as map_fn:
        result = run_global_search(gcfg, evaluator, map_fn=map_fn, checkpoint=checkpoint,
                                   resume=resume, stop_after=args.stop_after)
    _atomic_write(out / HISTORY, history_csv(result.history))
    for w in result.warnings[len(resume.warnings) if resume else 0:]:
        log.warning("%s", w)
    return result, evaluator


def cmd_global(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    result, _ = _global_phase(args, cfg, out, args.resume)
    best = result.best
    _write_structure(out, best.structure)
    done = result.history[-1].iteration if result.history else 0
    print(f"global: {done}/{cfg['global.iterations']} iterations, {result.evaluations} evaluations, "
          f"best {best.fitness:.3f} {encode_structure(best.structure)}")
    return 0


# ---------------------------------------------------------------------------
# local


def _save_local_state(out: Path, state: LocalSearchState) -> None:
    save_model(state.model, out / (LOCAL_MODEL + ".tmp"))
    (out / (LOCAL_MODEL + ".tmp")).replace(out / LOCAL_MODEL)
    payload = {
        "format": "g2l-local", "version": 1, "iteration": state.iteration,
        "trajectory": [encode_structure(s) for s in state.trajectory],
        "rng_state": state.rng_state, "pmfs": state.pmfs, "model": LOCAL_MODEL,
    }
    _atomic_write(out / LOCAL_CKPT, json.dumps(payload, sort_keys=True))


def load_local_state(path) -> LocalSearchState:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        if d.get("format") != "g2l-local":
            raise CheckpointError(f"{path}: not a local-search checkpoint")
        model = load_model(path.parent / d["model"])
        return LocalSearchState(int(d["iteration"]), [decode_structure(s) for s in d["trajectory"]],
                                model, d["rng_state"], d["pmfs"])
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _trajectory_csv(result) -> str:
    lines = ["iteration,layer_index,dilation"]
    lines += [f"{it},{layer},{d}" for it, layer, d in result.trajectory_rows()]
    return "\n".join(lines) + "\n"


def _local_phase(cfg: RunConfig, out: Path, initial: DilationStructure | None, resume_path=None):
    lcfg = cfg.local_config()
    train, _, num_classes = _search_split(cfg)
    trainer = TrainingContext(train, cfg.training_config(lcfg.epochs_per_update), num_classes,
                              cfg["tcn.hidden"])
    resume = load_local_state(resume_path) if resume_path is not None else None
    if resume is not None:
        initial = resume.trajectory[0]
    result = run_local_search(initial, lcfg, trainer, checkpoint=lambda st: _save_local_state(out, st),
                              resume=resume)
    _atomic_write(out / TRAJECTORY, _trajectory_csv(result))
    _write_structure(out, result.structure)
    return result


def cmd_local(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    initial = None if args.resume else _read_structure(args, cfg.shape())
    result = _local_phase(cfg, out, initial, args.resume)
    print(f"local: {len(result.trajectory) - 1} updates, {encode_structure(result.trajectory[0])} "
          f"-> {encode_structure(result.structure)}")
    return 0


# ---------------------------------------------------------------------------
# g2l


def _checkpoint_kind(path) -> str:
    try:
        return json.loads(Path(path).read_text()).get("format", "")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    except (ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def cmd_g2l(args, cfg: RunConfig) -> int:
    """Global search, then local refinement of its best structure.

    ``--resume`` takes either checkpoint: a population checkpoint continues
    the global phase, a local one skips straight to the local phase.
    """
    out = _prepare_out(args, cfg)
    kind = _checkpoint_kind(args.resume) if args.resume else None
    if kind == "g2l-local":
        local = _local_phase(cfg, out, None, args.resume)
        global_best = local.trajectory[0]
        global_fitness = None
    else:
        result, _ = _global_phase(args, cfg, out, args.resume)
        done = result.history[-1].iteration if result.history else 0
        if done < cfg["global.iterations"]:
            print(f"g2l: stopped after global iteration {done}; resume with --resume {out / POPULATION}")
            return 0
        global_best, global_fitness = result.best.structure, result.best.fitness
        _write_structure(out, global_best, "global-structure.txt")
        local = _local_phase(cfg, out, global_best)

    summary = {
        "global_structure": encode_structure(global_best),
        "global_fitness": global_fitness,
        "local_structure": encode_structure(local.structure),
    }
    _atomic_write(out / SUMMARY, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"g2l: {encode_structure(global_best)} -> {encode_structure(local.structure)}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _parse_fold_selection(text: str, n: int) -> list[int]:
    if text.strip().lower() == "all":
        return list(range(n))
    try:
        idx = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"folds must be 'all' or comma-separated integers, got {text!r}") from None
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise ConfigError(f"fold index {bad[0]} out of range [0, {n})")
    return idx


def evaluate_folds(structure: DilationStructure, seqs, folds: list[FoldSplit], fold_ids, cfg: RunConfig,
                   num_classes: int, out: Path | None = None) -> dict:
    """Full-budget training on each fold's train split, metrics on its val split.

    With ``out`` set, each fold's loss curve goes to ``loss-fold<i>.csv``.
    """
    thresholds = cfg.thresholds()
    tcfg = cfg.training_config(cfg["eval.epochs"])
    seed = derive_seed(cfg["seed"], structure)
    rows, reports = [], []
    for i in fold_ids:
        train, val = split_sequences(seqs, folds[i])
        model = build_model(TcnConfig(train[0].features.shape[0], num_classes, structure, cfg["tcn.hidden"]),
                            seed)
        curve = train_epochs(model, train, tcfg, tcfg.epochs, np.random.default_rng(seed))
        if out is not None:
            _atomic_write(out / f"loss-fold{i}.csv", loss_curve_csv(curve))
        rep = evaluate_model(model, val, thresholds)
        reports.append(rep)
        rows.append({"fold": i, **rep.to_dict()})
        log.info("fold %d: %s", i, rep.to_dict())
    return {"structure": encode_structure(structure), "epochs": tcfg.epochs, "folds": rows,
            "mean": MetricsReport.mean(reports).to_dict()}


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    structure = _read_structure(args, cfg.shape())
    seqs, folds, num_classes = _dataset(cfg)
    fold_ids = _parse_fold_selection(args.folds or cfg["eval.folds"], len(folds))
    payload = evaluate_folds(structure, seqs, folds, fold_ids, cfg, num_classes, out)
    _atomic_write(out / REPORT, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    m = payload["mean"]
    f1 = " ".join(f"F1@{k}={v:.2f}" for k, v in m["f1"].items())
    print(f"eval: {len(fold_ids)} folds, Acc={m['acc']:.2f} Edit={m['edit']:.2f} {f1}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    seqs = generate_synthetic(cfg.synth_config())
    try:
        save_dataset(out, seqs)
        save_folds(out / "folds.json", make_folds([s.id for s in seqs], cfg["data.num_folds"], cfg["seed"]))
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from None
    frames = sum(len(s) for s in seqs)
    print(f"synth: {len(seqs)} videos, {frames} frames, {cfg['data.num_classes']} classes -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {"synth": cmd_synth, "global": cmd_global, "local": cmd_local, "g2l": cmd_g2l,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel fitness evaluations (default: CPU count)")
    common.add_argument("--resume", help="checkpoint to continue from")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="g2l", description="Dilation structure search for temporal CNNs.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    for name in ("global", "g2l"):
        sp = sub.add_parser(name, parents=[common],
                            help="genetic global search" if name == "global" else "global then local search")
        sp.add_argument("--stop-after", type=int, help="halt after this global iteration")
    sp = sub.add_parser("local", parents=[common], help="EGI local search from one structure")
    sp.add_argument("--init", help="initial structure, e.g. '1,2,4|1,2,4'")
    sp.add_argument("--init-file", help="file holding the initial structure")
    sp = sub.add_parser("eval", parents=[common], help="cross-validated full-budget evaluation")
    sp.add_argument("--structure", help="structure text")
    sp.add_argument("--structure-file", help="file holding the structure")
    sp.add_argument("--folds", help="'all' or comma-separated fold indices")
    return p


def _load_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    if getattr(args, "stop_after", None) is not None and args.stop_after < 0:
        raise ConfigError("--stop-after must be >= 0")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, StructureParseError, InputError, DatasetError) as exc:
        print(f"G2L-ERROR: config: {exc}", file=sys.stderr)
        return 2
    except (G2LError, OSError, ValueError, RuntimeError) as exc:
        print(f"G2L-ERROR: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
