"""Batch command-line front door.

Three subcommands: ``synth`` writes reproducible synthetic datasets,
``value`` runs one valuation method end to end (files in, result file out),
and ``bench`` times method matchups at a sweep of sizes, writing a CSV
report and a rendered figure next to it.

Exit codes: 0 success, 2 usage error, 3 data error, 4 budget refusal.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import exact, lsh, montecarlo, oracle, sellers
from .core import (
    ANALYST,
    BudgetExceededError,
    DataError,
    Dataset,
    GameSpec,
    QuerySet,
    UnsupportedGameError,
    ValuationResult,
    aggregate_over_queries,
    composite_utility,
    game_utility,
)
from .datafiles import (
    ingest,
    load_seller_map,
    synth_classification,
    synth_regression,
    write_dataset,
)
from .montecarlo import McConfig, estimate_shapley_mc

__all__ = ["main"]

VALUE_METHODS = (
    "exact",
    "truncated",
    "lsh",
    "mc",
    "weighted",
    "seller",
    "composite",
    "oracle",
)
BENCH_SCENARIOS = ("exact-vs-baseline", "bennett-vs-hoeffding", "weighted-exact-vs-mc")

SCHEMA_VERSION = 1


class _UsageError(Exception):
    pass


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, dict):
        inner = ", ".join(
            f"{json.dumps(str(k))}: {_format_value(val)}" for k, val in v.items()
        )
        return "{" + inner + "}"
    raise TypeError(f"cannot serialize {type(v)!r}")


def _dump_json(obj: dict) -> str:
    # Hand-rolled so every float carries 17 significant digits: result files
    # are comparable byte-for-byte and reproduce doubles exactly.
    return _format_value(obj) + "\n"


def _write_result(path, payload: dict, out_format: str) -> None:
    if out_format == "json":
        text = _dump_json(payload)
    else:
        lines = ["player,value"]
        for i, v in enumerate(payload["values"]):
            lines.append(f"{i + 1},{format(float(v), '.17g')}")
        if payload.get("analyst_value") is not None:
            lines.append(f"analyst,{format(float(payload['analyst_value']), '.17g')}")
        text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _map_queries(fn, n_queries: int, threads: int) -> list:
    if threads <= 1 or n_queries <= 1:
        return [fn(j) for j in range(n_queries)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_queries)))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="knnshap",
        description="Shapley valuation of training data under KNN utilities",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a reproducible synthetic dataset")
    sp.add_argument("--kind", choices=("classification", "regression"), default="classification")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--label-noise", type=float, default=0.1)
    sp.add_argument("--contrast-knob", type=float, default=1.0)
    sp.add_argument("--n-test", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output path prefix")
    sp.add_argument("--format", choices=("csv", "binary"), default="csv")

    vp = sub.add_parser("value", help="run one valuation method")
    vp.add_argument("method", choices=VALUE_METHODS)
    vp.add_argument("--train", required=True)
    vp.add_argument("--test", required=True)
    vp.add_argument("--label", default="y")
    vp.add_argument("--task", choices=("classification", "regression"), default="classification")
    vp.add_argument("--data-format", choices=("auto", "csv", "binary"), default="auto")
    vp.add_argument("--k", type=int, default=1)
    vp.add_argument("--epsilon", type=float, default=0.1)
    vp.add_argument("--delta", type=float, default=0.1)
    vp.add_argument("--bound", choices=("hoeffding", "bennett", "bennett_approx", "heuristic"), default="bennett")
    vp.add_argument("--max-permutations", type=int, default=1_000_000)
    vp.add_argument("--range", type=float, default=None, help="utility-difference range override")
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--sellers", default=None, help="seller column name or a (point_id, seller_id) CSV path")
    vp.add_argument("--weights", default=None, help="weight rule for weighted games")
    vp.add_argument("--composite", action="store_true", help="oracle only: play the composite game")
    vp.add_argument("--budget", type=int, default=None)
    vp.add_argument("--budget-override", action="store_true")
    vp.add_argument("--width", type=float, default=None, help="lsh projection width")
    vp.add_argument("--tables", type=int, default=None, help="lsh table count")
    vp.add_argument("--bits", type=int, default=None, help="lsh bits per table")
    vp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    vp.add_argument("--out", default=None, help="result path (default stdout)")
    vp.add_argument("--format", choices=("json", "csv"), default="json")

    bp = sub.add_parser("bench", help="time method matchups and write a CSV report")
    bp.add_argument("scenario", choices=BENCH_SCENARIOS)
    bp.add_argument("--sizes", default="1000,10000", help="comma-separated training sizes")
    bp.add_argument("--k-sweep", default="1,2,3", help="comma-separated K values (weighted scenario)")
    bp.add_argument("--n", type=int, default=100, help="training size for the K sweep")
    bp.add_argument("--queries", type=int, default=100)
    bp.add_argument("--d", type=int, default=32)
    bp.add_argument("--k", type=int, default=1)
    bp.add_argument("--epsilon", type=float, default=0.1)
    bp.add_argument("--delta", type=float, default=0.1)
    bp.add_argument("--contrast-knob", type=float, default=4.0)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--out", required=True, help="output path prefix for the CSV and figure")
    bp.add_argument("--no-figure", action="store_true", help="skip rendering the figure")
    return p


def _load_sets(args):
    train = ingest(
        args.train,
        fmt=args.data_format,
        label_column=args.label,
        label_kind="class" if args.task == "classification" else "real",
        seller_column=args.sellers
        if args.sellers is not None and not os.path.exists(args.sellers)
        else None,
    )
    test = ingest(
        args.test,
        fmt=args.data_format,
        label_column=args.label,
        label_kind="class" if args.task == "classification" else "real",
    )
    seller_map = None
    if args.sellers is not None:
        if os.path.exists(args.sellers):
            seller_map = load_seller_map(args.sellers, len(train.labels))
        elif train.sellers is not None:
            seller_map = train.sellers
        else:
            raise DataError(f"--sellers {args.sellers!r}: no such file or CSV column")
    return train.as_dataset(), test.as_queryset(), seller_map


def _oracle_values(dataset, queries, spec, composite: bool):
    """Brute-force valuation of whatever game the flags describe."""
    if spec.seller_map is not None:
        m = spec.n_sellers
        point_ids = [np.nonzero(spec.seller_map == j + 1)[0] for j in range(m)]
    else:
        m = dataset.n
        point_ids = None
    per_query = []
    analysts = []
    for j in range(queries.n):
        game = game_utility(dataset, queries.features[j], queries.labels[j], spec)

        def nu(players: tuple[int, ...]) -> float:
            if composite:
                mapped = [ANALYST if p == m else p for p in players]
                return composite_utility(
                    dataset, mapped, queries.features[j], queries.labels[j], spec
                )
            if point_ids is not None:
                pts = [p for s in players for p in point_ids[s]]
            else:
                pts = list(players)
            return game.value(pts)

        vals = oracle.shapley_bruteforce_subsets(m + 1 if composite else m, nu)
        if composite:
            per_query.append(vals[:m])
            analysts.append(vals[m])
        else:
            per_query.append(vals)
    values = aggregate_over_queries(np.vstack(per_query))
    analyst = float(np.mean(analysts)) if composite else None
    return values, analyst


def _run_value(args) -> dict:
    dataset, queries, seller_map = _load_sets(args)
    method = args.method
    weighting = "weighted" if (args.weights is not None or method == "weighted") else "unweighted"
    weight_rule = args.weights if args.weights is not None else "inverse_distance"
    spec = GameSpec(
        task=args.task,
        k=args.k,
        weighting=weighting,
        weight_rule=weight_rule,
        composite=method == "composite" or (method in ("oracle", "mc") and args.composite),
        seller_map=seller_map if method in ("seller", "oracle", "mc", "composite") else None,
    )
    spec.validate_against(dataset)
    guarantee = None
    analyst_value = None
    diagnostics: dict = {}
    started = time.perf_counter()

    if method in ("exact", "truncated", "weighted"):
        if method == "truncated" and args.task != "classification":
            raise UnsupportedGameError("truncated valuation supports classification only")

        def one(j):
            x, y = queries.features[j], queries.labels[j]
            if method == "exact" and args.task == "classification":
                return exact.shapley_unweighted_classification(dataset, x, y, args.k)
            if method == "exact":
                return exact.shapley_unweighted_regression(dataset, x, y, args.k)
            if method == "truncated":
                return exact.shapley_truncated(
                    dataset, x, y, args.k, exact.TruncationConfig(args.epsilon)
                )
            return exact.shapley_weighted(
                dataset,
                x,
                y,
                spec,
                budget=args.budget if args.budget else 10_000_000,
                override=args.budget_override,
            )

        rows = _map_queries(one, queries.n, args.threads)
        values = aggregate_over_queries(np.vstack(rows))
        if method == "truncated":
            guarantee = (args.epsilon, 0.0)
            diagnostics["k_star"] = exact.TruncationConfig(args.epsilon).kstar(args.k)
    elif method == "composite":
        if spec.seller_map is not None:

            def one(j):
                return sellers.shapley_per_seller_composite(
                    dataset,
                    queries.features[j],
                    queries.labels[j],
                    spec,
                    budget=args.budget if args.budget else 1_000_000,
                    override=args.budget_override,
                )

        else:

            def one(j):
                return exact.shapley_composite(
                    dataset,
                    queries.features[j],
                    queries.labels[j],
                    spec,
                    budget=args.budget if args.budget else 10_000_000,
                    override=args.budget_override,
                )

        rows = _map_queries(one, queries.n, args.threads)
        values = aggregate_over_queries(np.vstack([v for v, _ in rows]))
        analyst_value = float(np.mean([a for _, a in rows]))
    elif method == "seller":
        if spec.seller_map is None:
            raise _UsageError("value seller requires --sellers")

        def one(j):
            return sellers.shapley_per_seller(
                dataset,
                queries.features[j],
                queries.labels[j],
                spec,
                budget=args.budget if args.budget else 1_000_000,
                override=args.budget_override,
            )

        rows = _map_queries(one, queries.n, args.threads)
        values = aggregate_over_queries(np.vstack(rows))
    elif method == "lsh":
        if args.task != "classification":
            raise _UsageError("value lsh supports classification only (use exact or mc for regression)")
        params = None
        if args.width is not None and args.tables is not None and args.bits is not None:
            params = lsh.LshParams(m=args.bits, l=args.tables, width=args.width, seed=args.seed)
        elif any(v is not None for v in (args.width, args.tables, args.bits)):
            raise _UsageError("--width, --tables, and --bits must be given together")
        res = lsh.shapley_lsh(
            dataset, queries, args.k, args.epsilon, args.delta, params=params, spec=spec
        )
        values = res.values
        guarantee = res.guarantee
        diagnostics.update(res.diagnostics)
    elif method == "mc":
        config = McConfig(
            epsilon=args.epsilon,
            delta=args.delta,
            range_r=args.range,
            bound=args.bound,
            max_permutations=args.max_permutations,
            seed=args.seed,
        )
        res = estimate_shapley_mc(dataset, queries, spec, config)
        values = res.values
        analyst_value = res.analyst_value
        guarantee = res.guarantee
        diagnostics.update(res.diagnostics)
    elif method == "oracle":
        values, analyst_value = _oracle_values(dataset, queries, spec, spec.composite)
    else:  # pragma: no cover
        raise _UsageError(f"unknown method {method}")

    diagnostics["runtime_ms"] = (time.perf_counter() - started) * 1000.0
    payload = {
        "schema": SCHEMA_VERSION,
        "method": method,
        "config": {
            "task": args.task,
            "k": args.k,
            "weighting": weighting,
            "weight_rule": weight_rule if weighting == "weighted" else None,
            "epsilon": args.epsilon,
            "delta": args.delta,
            "bound": args.bound if method == "mc" else None,
            "seed": args.seed,
            "n": dataset.n,
            "d": dataset.dim,
            "n_test": queries.n,
            "sellers": int(spec.n_sellers) if spec.seller_map is not None else None,
        },
        "guarantee": list(guarantee) if guarantee is not None else None,
        "values": [float(v) for v in values],
        "analyst_value": analyst_value,
        "diagnostics": diagnostics,
    }
    return payload


# ---------------------------------------------------------------------------
# bench scenarios


def bench_exact_vs_baseline(
    sizes, n_queries=100, k=1, epsilon=0.1, delta=0.1, seed=0, d=32, contrast_knob=4.0
):
    """Rows of (method, n, runtime_seconds, max_abs_error) per training size.

    The baseline is permutation sampling at the Hoeffding count with the same
    nominal (epsilon, delta) target; its error column is measured against the
    exact values.
    """
    rows = []
    for n in sizes:
        dataset, queries = synth_classification(
            n, d, classes=2, contrast_knob=contrast_knob, seed=seed, n_test=n_queries
        )
        t0 = time.perf_counter()
        per_query = [
            exact.shapley_unweighted_classification(
                dataset, queries.features[j], queries.labels[j], k
            )
            for j in range(queries.n)
        ]
        exact_values = aggregate_over_queries(np.vstack(per_query))
        t_exact = time.perf_counter() - t0

        config = McConfig(
            epsilon=epsilon,
            delta=delta,
            range_r=1.0 / k,
            bound="hoeffding",
            max_permutations=10_000_000,
            seed=seed,
        )
        spec = GameSpec(task="classification", k=k)
        t0 = time.perf_counter()
        res = estimate_shapley_mc(dataset, queries, spec, config)
        t_mc = time.perf_counter() - t0
        err = float(np.max(np.abs(res.values - exact_values)))
        rows.append(("exact", n, t_exact, 0.0))
        rows.append(("baseline_mc", n, t_mc, err))
    return rows


def bench_bennett_vs_hoeffding(sizes, k=1, epsilon=0.1, delta=0.1, range_r=1.0):
    """Rows of (bound, n, permutations) comparing sample-size rules."""
    config = McConfig(epsilon=epsilon, delta=delta, range_r=range_r)
    rows = []
    for n in sizes:
        rows.append(("hoeffding", n, montecarlo.hoeffding_permutations(n, config)))
        rows.append(("bennett", n, montecarlo.bennett_permutations(n, k, config)))
        rows.append(("bennett_approx", n, montecarlo.bennett_approx_permutations(k, config)))
    return rows


def bench_weighted_exact_vs_mc(
    n=100, k_values=(1, 2, 3), n_queries=2, epsilon=0.1, delta=0.1, seed=0, d=8
):
    """Rows of (method, k, runtime_seconds, max_abs_error) for the K sweep."""
    rows = []
    for k in k_values:
        dataset, queries = synth_classification(
            n, d, classes=2, contrast_knob=2.0, seed=seed, n_test=n_queries
        )
        spec = GameSpec(task="classification", k=k, weighting="weighted")
        t0 = time.perf_counter()
        per_query = [
            exact.shapley_weighted(dataset, queries.features[j], queries.labels[j], spec)
            for j in range(queries.n)
        ]
        exact_values = aggregate_over_queries(np.vstack(per_query))
        t_exact = time.perf_counter() - t0

        config = McConfig(
            epsilon=epsilon, delta=delta, bound="bennett_approx", seed=seed,
            max_permutations=10_000_000,
        )
        t0 = time.perf_counter()
        res = estimate_shapley_mc(dataset, queries, spec, config)
        t_mc = time.perf_counter() - t0
        err = float(np.max(np.abs(res.values - exact_values)))
        rows.append(("exact", k, t_exact, 0.0))
        rows.append(("mc", k, t_mc, err))
    return rows


_BENCH_COLUMNS = {
    "exact-vs-baseline": ("method", "n", "runtime_seconds", "max_abs_error"),
    "bennett-vs-hoeffding": ("bound", "n", "permutations"),
    "weighted-exact-vs-mc": ("method", "k", "runtime_seconds", "max_abs_error"),
}


def _write_bench_csv(path, scenario, rows) -> None:
    cols = _BENCH_COLUMNS[scenario]
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(format(v, ".6g"))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _render_bench_figure(path, scenario, rows) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if scenario == "bennett-vs-hoeffding":
        by = {}
        for bound, n, t in rows:
            by.setdefault(bound, []).append((n, t))
        for bound, pts in by.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=bound)
        ax.set_xscale("log")
        ax.set_xlabel("training points")
        ax.set_ylabel("permutations required")
    else:
        xlabel = "training points" if scenario == "exact-vs-baseline" else "K"
        by = {}
        for method, x, t, _err in rows:
            by.setdefault(method, []).append((x, t))
        for method, pts in by.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        if scenario == "exact-vs-baseline":
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("runtime (s)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    ax.set_title(scenario)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _run_bench(args) -> None:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if args.scenario == "exact-vs-baseline":
        rows = bench_exact_vs_baseline(
            sizes,
            n_queries=args.queries,
            k=args.k,
            epsilon=args.epsilon,
            delta=args.delta,
            seed=args.seed,
            d=args.d,
            contrast_knob=args.contrast_knob,
        )
    elif args.scenario == "bennett-vs-hoeffding":
        rows = bench_bennett_vs_hoeffding(
            sizes, k=args.k, epsilon=args.epsilon, delta=args.delta
        )
    else:
        k_values = [int(s) for s in args.k_sweep.split(",") if s]
        rows = bench_weighted_exact_vs_mc(
            n=args.n,
            k_values=k_values,
            epsilon=args.epsilon,
            delta=args.delta,
            seed=args.seed,
        )
    csv_path = args.out + ".csv"
    _write_bench_csv(csv_path, args.scenario, rows)
    print(f"wrote {csv_path}")
    if not args.no_figure:
        fig_path = args.out + ".png"
        _render_bench_figure(fig_path, args.scenario, rows)
        print(f"wrote {fig_path}")


def _run_synth(args) -> None:
    if args.kind == "classification":
        dataset, queries = synth_classification(
            args.n,
            args.d,
            classes=args.classes,
            contrast_knob=args.contrast_knob,
            seed=args.seed,
            n_test=args.n_test,
        )
        label_kind = "class"
    else:
        dataset, queries = synth_regression(
            args.n, args.d, label_noise=args.label_noise, seed=args.seed, n_test=args.n_test
        )
        label_kind = "real"
    ext = "csv" if args.format == "csv" else "bin"
    train_path = f"{args.out}_train.{ext}"
    test_path = f"{args.out}_test.{ext}"
    write_dataset(train_path, dataset.features, dataset.labels, label_kind, fmt=args.format)
    write_dataset(test_path, queries.features, queries.labels, label_kind, fmt=args.format)
    print(f"wrote {train_path}")
    print(f"wrote {test_path}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        if args.command == "synth":
            _run_synth(args)
        elif args.command == "value":
            payload = _run_value(args)
            _write_result(args.out, payload, args.format)
        else:
            _run_bench(args)
        return 0
    except (_UsageError, UnsupportedGameError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except BudgetExceededError as e:
        print(f"budget refusal: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
