"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data, I/O or
checkpoint error, 3 numeric failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import evaluation as ev
from . import gradcheck
from .data import (DataError, InteractionDataset, SynthConfig, build_examples, chronological_split,
                   core_filter, derive_rng, load_drivers, load_interactions, quantile_boundaries,
                   synthesize, write_drivers, write_interactions)
from .metrics import MetricError, MetricsReport, write_report
from .model import ClsrModel
from .train import NumericError, Trainer

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STEP_LOG = "steps.jsonl"
EPOCH_LOG = "epochs.jsonl"
LAST = "last.npz"
BEST = "best.npz"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# data plumbing


def prepare_dataset(cfg: cfgmod.RunConfig) -> InteractionDataset:
    """Load, filter and chronologically split the configured interactions."""
    if cfg.data is None:
        raise DataError("config sets no data path")
    if cfg.drivers is not None and cfg.core:
        raise DataError("a driver sidecar indexes unfiltered sequences; use core=0 with drivers")
    try:
        records = load_interactions(cfg.data, cfg.format, cfg.behaviors)
        drivers = load_drivers(cfg.drivers) if cfg.drivers is not None else None
    except OSError as exc:
        raise DataError(f"cannot read data: {exc}") from None
    if cfg.core:
        records = core_filter(records, cfg.core)
    if not records:
        raise DataError("no interactions left after filtering")
    ds = InteractionDataset.from_records(records, drivers)
    if cfg.t_val is not None:
        t_val, t_test = cfg.t_val, cfg.t_test
    else:
        t_val, t_test = quantile_boundaries(ds, cfg.val_frac, cfg.test_frac)
    return chronological_split(ds, t_val, t_test)


def eval_examples(ds: InteractionDataset, cfg: cfgmod.RunConfig, split: str):
    seed = int(derive_rng(cfg.seed, "eval", split).integers(0, 2**31 - 1))
    return build_examples(ds, cfg.eval_negatives, cfg.max_seq_len, seed, splits={split})


def _check_ids(ck: ckpt.Checkpoint, ds: InteractionDataset) -> None:
    if list(ck.user_ids) != list(ds.user_ids) or list(ck.item_ids) != list(ds.item_ids):
        raise DataError("checkpoint id maps do not match the dataset")


# ---------------------------------------------------------------------------
# train


def _trainer_meta(state) -> dict:
    best = state.best_gauc if np.isfinite(state.best_gauc) else None
    return {"best_gauc": best, "best_epoch": state.best_epoch, "bad_epochs": state.bad_epochs}


def _keep_lines(path: Path, keep) -> None:
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines() if ln and keep(json.loads(ln))]
    path.write_text("".join(ln + "\n" for ln in lines))


def cmd_train(cfg: cfgmod.RunConfig, resume: bool = False) -> dict:
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(cfg)
    mc = cfg.model_config()
    model = ClsrModel(mc, ds.n_users, ds.n_items, seed=cfg.seed)
    val = eval_examples(ds, cfg, "val")
    trainer = Trainer(model, ds, cfg.train_settings(), val_examples=val or None)
    st = trainer.state
    ids = dict(user_ids=list(ds.user_ids), item_ids=list(ds.item_ids))
    steps_path, epochs_path = out / STEP_LOG, out / EPOCH_LOG

    if resume:
        last = ckpt.load(out / LAST, expect=mc)
        _check_ids(last, ds)
        last.apply(model, trainer.optimizer)
        st.epoch, st.step = last.epoch, last.step
        meta = last.trainer
        st.best_epoch, st.bad_epochs = meta.get("best_epoch", -1), meta.get("bad_epochs", 0)
        if meta.get("best_gauc") is not None:
            st.best_gauc = meta["best_gauc"]
            best = ckpt.load(out / BEST, expect=mc)
            st.best_params, st.best_buffers = best.params, best.buffers
        # drop anything logged after the checkpoint was written
        _keep_lines(steps_path, lambda r: r["step"] <= last.step)
        _keep_lines(epochs_path, lambda r: r["epoch"] < last.epoch)
    else:
        for p in (steps_path, epochs_path):
            p.unlink(missing_ok=True)
    for p in (steps_path, epochs_path):
        p.touch()
    (out / "config.txt").write_text(cfg.to_text())

    def save_last():
        ckpt.save(out / LAST, ckpt.Checkpoint.capture(
            model, trainer.optimizer, epoch=st.epoch, step=st.step, trainer=_trainer_meta(st),
            rng={"seed": cfg.seed, "streams": ["negatives", "order"], "next_epoch": st.epoch},
            run_config=cfg.to_dict(), **ids))

    def save_best(params, buffers, epoch):
        ckpt.save(out / BEST, ckpt.Checkpoint(
            config=mc, params=params, buffers=buffers, epoch=epoch, step=st.step,
            trainer=_trainer_meta(st), run_config=cfg.to_dict(), **ids))

    written = 0

    def on_epoch(tr, record):
        nonlocal written
        tr.log.append_lines(steps_path, start=written)
        written = len(tr.log.steps)
        with epochs_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        save_last()
        if st.best_epoch == record["epoch"]:
            save_best(st.best_params, st.best_buffers, record["epoch"] + 1)

    trainer.on_epoch = on_epoch
    if not resume:
        save_last()
    trainer.run()
    if st.best_params is None:
        # no validation examples (or zero epochs): the latest weights stand in for the best
        params, buffers = trainer.snapshot()
        save_best(params, buffers, st.epoch)
        save_last()
    return {"epochs": st.epoch, "steps": st.step,
            "best_val_gauc": st.best_gauc if np.isfinite(st.best_gauc) else None,
            "best_epoch": st.best_epoch, "out_dir": str(out)}


# ---------------------------------------------------------------------------
# evaluate / suite


def _load_model(cfg: cfgmod.RunConfig, path, ds: InteractionDataset) -> ClsrModel:
    path = Path(path) if path is not None else cfg.output_dir() / BEST
    loaded = ckpt.load(path, expect=cfg.model_config())
    _check_ids(loaded, ds)
    return loaded.build_model()


def _header(cfg: cfgmod.RunConfig, **cell) -> dict:
    return {**{k: cfgmod.format_value(v) for k, v in cfg.to_dict().items()},
            **{f"cell.{k}": v for k, v in cell.items()}}


def cell_name(split: str, spec: ev.ProtocolSpec, side, fixed_alpha) -> str:
    name = f"{split}_{spec.label()}_{ev.Side(side).value}"
    if fixed_alpha is not None:
        name += f"_alpha{fixed_alpha:g}"
    return name


def cmd_evaluate(cfg: cfgmod.RunConfig, checkpoint=None, protocol="none", k=0, seed=0,
                 side="both", fixed_alpha=None, split="test", out=None) -> tuple[MetricsReport, Path]:
    ds = prepare_dataset(cfg)
    model = _load_model(cfg, checkpoint, ds)
    spec = ev.ProtocolSpec(protocol, truncate_k=k, seed=seed)
    examples = eval_examples(ds, cfg, split)
    if not examples:
        raise DataError(f"no {split} examples")
    report = ev.evaluate(model, examples, spec, side=side, fixed_alpha=fixed_alpha)
    stem = Path(out) if out else cfg.output_dir() / "eval" / cell_name(split, spec, side, fixed_alpha)
    write_report(report, stem, _header(cfg, split=split, protocol=spec.label(), side=ev.Side(side).value,
                                       fixed_alpha="none" if fixed_alpha is None else fixed_alpha))
    return report, stem


SUITE_KS = (5, 10, 20, 40)
SUITE_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def suite_cells(ks=SUITE_KS, alphas=SUITE_ALPHAS, shuffle_seed=0) -> list:
    """``[(name, ProtocolSpec, side, fixed_alpha), ...]`` for every report the suite writes."""
    cells = []
    for side in ev.Side:
        cells.append((f"{side.value}_none", ev.ProtocolSpec(), side, None))
        cells.append((f"{side.value}_shuffle", ev.ProtocolSpec("shuffle", seed=shuffle_seed), side, None))
        for k in ks:
            cells.append((f"{side.value}_truncate_k{k}", ev.ProtocolSpec("truncate", truncate_k=k), side, None))
    for a in alphas:
        cells.append((f"fixed_alpha_{a:g}", ev.ProtocolSpec(), ev.Side.BOTH, float(a)))
    return cells


def _write_flat(stem: Path, values: dict, header: dict) -> None:
    lines = [f"config.{k}={v}" for k, v in sorted(header.items())]
    lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items()]
    Path(f"{stem}.txt").write_text("\n".join(lines) + "\n")
    Path(f"{stem}.json").write_text(json.dumps({"config": header, "metrics": values},
                                               indent=2, sort_keys=True) + "\n")


def cmd_suite(cfg: cfgmod.RunConfig, checkpoint=None, split="test", ks=SUITE_KS,
              alphas=SUITE_ALPHAS, shuffle_seed=0, out=None) -> Path:
    ds = prepare_dataset(cfg)
    model = _load_model(cfg, checkpoint, ds)
    examples = eval_examples(ds, cfg, split)
    if not examples:
        raise DataError(f"no {split} examples")
    out = Path(out) if out else cfg.output_dir() / "suite"
    out.mkdir(parents=True, exist_ok=True)
    rows, manifest = [], []
    for name, spec, side, alpha in suite_cells(ks, alphas, shuffle_seed):
        report = ev.evaluate(model, examples, spec, side=side, fixed_alpha=alpha)
        write_report(report, out / name, _header(cfg, split=split, protocol=spec.label(), side=side.value,
                                                  fixed_alpha="none" if alpha is None else alpha))
        rows.append((name, report))
        manifest.append(name)
    dis = ev.disentanglement(model, examples)
    _write_flat(out / "disentanglement", dis.flat(), _header(cfg, split=split))
    manifest.append("disentanglement")
    ndcg_ks = sorted(rows[0][1].ndcg)
    lines = ["\t".join(["cell", "auc", "gauc", "mrr", *[f"ndcg@{k}" for k in ndcg_ks], "n"])]
    for name, r in rows:
        vals = [r.auc, r.gauc, r.mrr, *[r.ndcg[k] for k in ndcg_ks]]
        lines.append("\t".join([name, *[f"{v:.6f}" for v in vals], str(r.n_instances)]))
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps({"cells": manifest}, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# synthesize / sweep / grad-check


def synth_config(overrides) -> SynthConfig:
    types = {f.name: f.type for f in fields(SynthConfig)}
    values = {}
    for item in overrides or ():
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise cfgmod.ConfigError(f"unknown generator setting {item!r}")
        try:
            values[key] = int(text) if types[key] == "int" else float(text)
        except ValueError:
            raise cfgmod.ConfigError(f"{key}: {text!r} is not a number") from None
    try:
        cfg = SynthConfig(**values)
        cfg.validate()
    except DataError as exc:
        raise cfgmod.ConfigError(str(exc)) from None
    return cfg


def cmd_synthesize(gen: SynthConfig, seed: int, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    syn = synthesize(gen, seed)
    write_interactions(out / "interactions.csv", syn.records)
    write_drivers(out / "drivers.csv", syn.drivers)
    text = "".join(f"{f.name}={getattr(gen, f.name)!r}\n" for f in fields(gen)) + f"seed={seed}\n"
    (out / "generator.txt").write_text(text)
    return {"interactions": len(syn.records), "users": gen.n_users, "out_dir": str(out)}


def cmd_sweep(base: cfgmod.RunConfig, grid: dict, dry_run: bool = False) -> tuple[int, Path]:
    """Run one ``train`` process per grid point; returns the first nonzero exit code (or 0)."""
    combos = cfgmod.expand_sweep(grid)
    root = base.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    status, rows = EXIT_OK, []
    for i, combo in enumerate(combos):
        run_dir = root / f"run_{i:03d}"
        run_cfg = base.with_updates({**combo, "out_dir": str(run_dir.resolve())})
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg_path = run_dir / "run_config.txt"
        cfg_path.write_text(run_cfg.to_text())
        code, best = None, None
        if not dry_run:
            code = subprocess.call([sys.executable, "-m", "clsr", "train", "--config", str(cfg_path)])
            if code != EXIT_OK and status == EXIT_OK:
                status = code
            epochs = run_dir / EPOCH_LOG
            if epochs.exists():
                gaucs = [json.loads(ln).get("val_gauc") for ln in epochs.read_text().splitlines() if ln]
                gaucs = [g for g in gaucs if g is not None]
                best = max(gaucs) if gaucs else None
        rows.append((run_dir.name, combo, code, best))
    keys = list(grid)
    lines = ["\t".join(["run", *keys, "exit", "best_val_gauc"])]
    for name, combo, code, best in rows:
        lines.append("\t".join([name, *[combo[k] for k in keys], "-" if code is None else str(code),
                                "-" if best is None else f"{best:.6f}"]))
    summary = root / "sweep_summary.tsv"
    summary.write_text("\n".join(lines) + "\n")
    return status, summary


def cmd_grad_check(seeds: int = 10, layers=None) -> dict:
    return gradcheck.run_suite(range(seeds), layers)


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clsr", description="Contrastive long/short-term interest recommender.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value run config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, applied after --config)")

    t = sub.add_parser("train", help="train a model")
    with_config(t)
    t.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.npz")

    e = sub.add_parser("evaluate", help="evaluate one cell")
    with_config(e)
    e.add_argument("--checkpoint", help="default <out_dir>/best.npz")
    e.add_argument("--protocol", choices=[x.value for x in ev.Protocol], default="none")
    e.add_argument("--k", type=int, default=0, help="history length kept by truncate")
    e.add_argument("--seed", type=int, default=0, help="shuffle seed")
    e.add_argument("--side", choices=[x.value for x in ev.Side], default="both")
    e.add_argument("--fixed-alpha", type=float)
    e.add_argument("--split", choices=["val", "test"], default="test")
    e.add_argument("--out", help="report path stem")

    s = sub.add_parser("suite", help="run every analysis cell")
    with_config(s)
    s.add_argument("--checkpoint")
    s.add_argument("--split", choices=["val", "test"], default="test")
    s.add_argument("--ks", default=",".join(map(str, SUITE_KS)))
    s.add_argument("--alphas", default=",".join(f"{a:g}" for a in SUITE_ALPHAS))
    s.add_argument("--seed", type=int, default=0, help="shuffle seed")
    s.add_argument("--out", help="bundle directory")

    y = sub.add_parser("synthesize", help="write a synthetic dataset and its driver sidecar")
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    w = sub.add_parser("sweep", help="train every point of a grid")
    with_config(w)
    w.add_argument("--grid", required=True, help="file of key=v1,v2,... lines")
    w.add_argument("--dry-run", action="store_true", help="write run configs only")

    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--layers", nargs="*", choices=list(gradcheck.LAYERS))
    return p


def _csv_numbers(text: str, cast):
    try:
        return tuple(cast(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def _run(args) -> int:
    if args.command is None:
        raise UsageError("missing command; see --help")
    if args.command == "grad-check":
        res = cmd_grad_check(args.seeds, args.layers)
        ok = True
        for name, err in res.items():
            passed = err < gradcheck.TOL
            ok &= passed
            print(f"{name:22s} {err:.3e} {'ok' if passed else 'FAIL'}")
        return EXIT_OK if ok else EXIT_NUMERIC
    if args.command == "synthesize":
        info = cmd_synthesize(synth_config(args.set), args.seed, args.out)
        print(json.dumps(info))
        return EXIT_OK
    cfg = cfgmod.load(args.config, args.set)
    if args.command == "train":
        print(json.dumps(cmd_train(cfg, resume=args.resume)))
    elif args.command == "evaluate":
        report, stem = cmd_evaluate(cfg, args.checkpoint, args.protocol, args.k, args.seed, args.side,
                                    args.fixed_alpha, args.split, args.out)
        print(json.dumps({"report": f"{stem}.txt", "auc": report.auc, "gauc": report.gauc}))
    elif args.command == "suite":
        out = cmd_suite(cfg, args.checkpoint, args.split, _csv_numbers(args.ks, int),
                        _csv_numbers(args.alphas, float), args.seed, args.out)
        print((out / "summary.tsv").read_text(), end="")
    elif args.command == "sweep":
        try:
            grid = cfgmod.parse_lines(Path(args.grid).read_text().splitlines(), args.grid)
        except OSError as exc:
            raise cfgmod.ConfigError(f"cannot read grid {args.grid}: {exc.strerror}") from None
        code, summary = cmd_sweep(cfg, grid, args.dry_run)
        print(summary.read_text(), end="")
        return code
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return _run(build_parser().parse_args(argv))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt.CheckpointError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
