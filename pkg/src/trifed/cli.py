"""Experiment runner.

Subcommands:

* ``run``         execute a federation (or an ablation arm) and write
                  metrics.csv, summary.json, and the final global checkpoint
* ``compare``     tabulate final accuracies across finished run directories
* ``report``      render matplotlib figures next to each run's metrics.csv
* ``dump-config`` print the bundled scenario as editable JSON
* ``dump-task``   write one client's synthetic dataset as CSV

Exit codes: 0 success, 2 parse problem, 3 numeric divergence, 4 invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .client_trainer import check_gradients
from .errors import (
    ConfigError,
    FormatError,
    NumericDivergenceError,
    NumericInputError,
    ProtocolError,
    ShapeError,
    SolverError,
)
from .federation import Federation, serialize_stack
from .scenarios import apply_arm, bundled_scenario, bundled_scenario_bytes, config_from_doc
from .taskgen import gen_task

ARMS = ("H2TUNE", "LOCAL", "NO_DISENTANGLE", "NO_MASK")
GRAD_CHECK_TOLERANCE = 1e-5

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4


class _ParseFailure(Exception):
    pass


@dataclass(frozen=True)
class ExperimentManifest:
    """What identifies a run: scenario source and hash, seed, arm, output."""

    config_path: str | None
    config_hash: str
    seed: int
    baseline: str
    out_dir: str


def git_blob_sha1(data: bytes) -> str:
    """Content hash the way git hashes a blob object."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _load_doc(config_path):
    if config_path is None:
        raw = bundled_scenario_bytes()
        return bundled_scenario(), raw
    raw = Path(config_path).read_bytes()
    return json.loads(raw), raw


def _write_metrics(path: Path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "k", "share_loss", "specific_loss", "eval_acc", "gg_norm"])
        for record in history:
            for cm in record.clients:
                writer.writerow([record.round_index, cm.client_id,
                                 repr(cm.share_loss), repr(cm.specific_loss),
                                 repr(cm.eval_acc), repr(cm.gg_norm)])


def cmd_run(args) -> int:
    doc, raw = _load_doc(args.config)
    arm = args.baseline
    out_dir = Path(args.out) if args.out else Path("runs") / f"{arm.lower()}-s{args.seed or doc['seed']}"
    # hash recorded before anything runs
    manifest = ExperimentManifest(config_path=args.config,
                                  config_hash=git_blob_sha1(raw),
                                  seed=int(args.seed if args.seed is not None
                                           else doc["seed"]),
                                  baseline=arm, out_dir=str(out_dir))
    doc = apply_arm(doc, arm)
    out_dir.mkdir(parents=True, exist_ok=True)
    exchange_dir = str(out_dir / "exchange") if args.transport == "files" else None
    config = config_from_doc(doc, rounds=args.rounds, seed=manifest.seed,
                             transport=args.transport,
                             exchange_dir=exchange_dir, workers=args.workers)
    started = time.perf_counter()
    fed = Federation(config, communicate=(arm != "LOCAL"))
    history = fed.run()
    runtime = time.perf_counter() - started
    _write_metrics(out_dir / "metrics.csv", history)
    (out_dir / "R_g.r2g").write_bytes(serialize_stack(fed.global_stack))
    final_acc = {str(k): acc for k, acc in enumerate(fed.evaluate())}
    summary = {
        "arm": manifest.baseline,
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "rounds": config.rounds,
        "epochs": config.local_epochs,
        "transport": config.transport,
        "final_acc": final_acc,
        "mean_final_acc": float(np.mean(list(map(float, final_acc.values())))),
        "runtime_sec": runtime,
    }
    if args.check_grads:
        worst = 0.0
        for state in fed.clients:
            batch = (state.data.x_train[:4], state.data.y_train[:4])
            worst = max(worst, check_gradients(state, batch))
        summary["gradient_check"] = worst
        if worst > GRAD_CHECK_TOLERANCE:
            (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
            print(f"gradient check failed: worst relative error {worst:.3e}",
                  file=sys.stderr)
            return EXIT_INVARIANT
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{arm}: mean final accuracy {summary['mean_final_acc']:.4f} "
          f"over {config.rounds} rounds -> {out_dir}")
    return EXIT_OK


def _read_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.json"
    if not path.exists():
        raise _ParseFailure(f"no summary.json in {run_dir}")
    return json.loads(path.read_text())


def cmd_compare(args) -> int:
    dirs = [Path(d) for d in args.dirs]
    summaries = [_read_summary(d) for d in dirs]
    hashes = {s["config_hash"] for s in summaries}
    if len(hashes) != 1:
        print("refusing to compare runs with different scenario hashes: "
              + ", ".join(sorted(hashes)), file=sys.stderr)
        return EXIT_PARSE
    labels = [d.name for d in dirs]
    client_ids = sorted(summaries[0]["final_acc"], key=int)
    writer = csv.writer(sys.stdout)
    header = ["client"] + labels + [f"delta_{lab}" for lab in labels[1:]]
    writer.writerow(header)
    for cid in client_ids:
        accs = [float(s["final_acc"][cid]) for s in summaries]
        writer.writerow([cid] + [repr(a) for a in accs]
                        + [repr(a - accs[0]) for a in accs[1:]])
    means = [float(s["mean_final_acc"]) for s in summaries]
    writer.writerow(["mean"] + [repr(m) for m in means]
                    + [repr(m - means[0]) for m in means[1:]])
    return EXIT_OK


def _read_metrics(run_dir: Path):
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise _ParseFailure(f"no metrics.csv in {run_dir}")
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"t": int(row["t"]), "k": int(row["k"]),
                         "share_loss": float(row["share_loss"]),
                         "specific_loss": float(row["specific_loss"]),
                         "eval_acc": float(row["eval_acc"]),
                         "gg_norm": float(row["gg_norm"])})
    return rows


def _per_round_means(rows):
    by_round = {}
    for row in rows:
        by_round.setdefault(row["t"], []).append(row)
    out = []
    for t in sorted(by_round):
        group = by_round[t]
        out.append({
            "t": t,
            "share_loss": float(np.mean([r["share_loss"] for r in group])),
            "specific_loss": float(np.mean([r["specific_loss"] for r in group])),
            "eval_acc": float(np.mean([r["eval_acc"] for r in group])),
            "gg_sq": float(np.mean([r["gg_norm"] ** 2 for r in group])),
        })
    return out


def _render_run_figures(run_dir: Path, rows, plt):
    clients = sorted({r["k"] for r in rows})
    means = _per_round_means(rows)
    ts = [m["t"] for m in means]

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in clients:
        pts = [(r["t"], r["eval_acc"]) for r in rows if r["k"] == k]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=f"client {k}")
    ax.plot(ts, [m["eval_acc"] for m in means], "k--", label="mean")
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run_dir / "accuracy.png", dpi=150)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, [m["share_loss"] for m in means], label="share loss")
    ax.plot(ts, [m["specific_loss"] for m in means], label="specific loss")
    ax.set_xlabel("round")
    ax.set_ylabel("mean loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(run_dir / "losses.png", dpi=150)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    positive = [max(m["gg_sq"], 1e-16) for m in means]
    ax.semilogy(ts, positive)
    ax.set_xlabel("round")
    ax.set_ylabel("mean squared update norm / lr^2")
    fig.tight_layout()
    fig.savefig(run_dir / "gg_norm.png", dpi=150)
    plt.close(fig)


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    combined = []
    for d in args.dirs:
        run_dir = Path(d)
        rows = _read_metrics(run_dir)
        means = _per_round_means(rows)
        with open(run_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "share_loss", "specific_loss", "eval_acc", "gg_sq"])
            for m in means:
                writer.writerow([m["t"], repr(m["share_loss"]),
                                 repr(m["specific_loss"]), repr(m["eval_acc"]),
                                 repr(m["gg_sq"])])
        _render_run_figures(run_dir, rows, plt)
        combined.append((run_dir.name, means))
        print(f"wrote report.csv, accuracy.png, losses.png, gg_norm.png -> {run_dir}")
    if args.out and len(combined) > 1:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, means in combined:
            ax.plot([m["t"] for m in means], [m["eval_acc"] for m in means], label=label)
        ax.set_xlabel("round")
        ax.set_ylabel("mean test accuracy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "accuracy_compare.png", dpi=150)
        plt.close(fig)
        print(f"wrote accuracy_compare.png -> {out_dir}")
    return EXIT_OK


def cmd_dump_config(args) -> int:
    text = bundled_scenario_bytes().decode()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_task(args) -> int:
    doc, _ = _load_doc(args.config)
    config = config_from_doc(doc)
    if not 0 <= args.client < len(config.clients):
        raise ConfigError(f"client {args.client} not in scenario "
                          f"(have {len(config.clients)})")
    data = gen_task(config.clients[args.client].task)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = data.x_train.shape[1]
        writer.writerow(["split", "label"] + [f"x{i}" for i in range(dim)])
        for split, xs, ys in (("train", data.x_train, data.y_train),
                              ("test", data.x_test, data.y_test)):
            for x, y in zip(xs, ys):
                writer.writerow([split, int(y)] + [repr(v) for v in x])
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trifed",
                                     description="Federated triple-LoRA experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federation arm")
    run.add_argument("--config", default=None, help="scenario JSON (default: bundled)")
    run.add_argument("--rounds", type=int, default=None, help="override round count")
    run.add_argument("--seed", type=int, default=None, help="override master seed")
    run.add_argument("--baseline", choices=ARMS, default="H2TUNE")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--check-grads", action="store_true",
                     help="verify analytic gradients after the run")
    run.add_argument("--transport", choices=("inproc", "files"), default="inproc")
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(func=cmd_run)

    comp = sub.add_parser("compare", help="compare finished run directories")
    comp.add_argument("dirs", nargs="+")
    comp.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="render figures for run directories")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--out", default=None,
                     help="directory for the cross-run comparison figure")
    rep.set_defaults(func=cmd_report)

    dc = sub.add_parser("dump-config", help="print the bundled scenario JSON")
    dc.add_argument("--out", default=None)
    dc.set_defaults(func=cmd_dump_config)

    dt = sub.add_parser("dump-task", help="write one client's dataset as CSV")
    dt.add_argument("--config", default=None)
    dt.add_argument("--client", type=int, required=True)
    dt.add_argument("--out", required=True)
    dt.set_defaults(func=cmd_dump_task)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (json.JSONDecodeError, KeyError, TypeError, FileNotFoundError,
            _ParseFailure) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except (NumericDivergenceError, SolverError, NumericInputError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ShapeError, FormatError, ProtocolError) as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
