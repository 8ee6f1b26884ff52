"""End-to-end experiment orchestration and machine-readable reports.

A run is: prepare data for the configured shift protocol, split it
chronologically, train one model per seed, evaluate in-distribution and
shifted test AUC (plus invariant-recognition accuracy when ground truth
exists), and aggregate mean/std across seeds.  Reports are JSON with sorted
keys and no timestamps, so identical configs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .config import train_config_for_seed, validate_config
from .graphs import (
    DataError,
    DynamicGraph,
    apply_attribute_filter,
    chronological_split,
    load_edgelist,
    load_features,
    sample_negative_edges,
    save_edgelist,
    save_features,
    SplitSpec,
)
from .invariance import channel_variance_all, masks_from_partitions, partition_all
from .metrics import auc, i_acc
from .rng import derive
from .synthetic import gen_env_synthetic, gen_feature_shift, gen_random_graph
from .training import (
    AdamState,
    Model,
    TrainConfig,
    build_model,
    fit,
    predict_links,
    save_checkpoint,
)

_EMPTY_EDGES = np.zeros((0, 2), dtype=np.int64)


@dataclass
class PreparedData:
    graph: DynamicGraph
    split: SplitSpec
    ood_edges: dict[int, np.ndarray]
    invariant_channels: tuple[int, ...] | None
    data_seed: int


def merge_ood(g: DynamicGraph, ood_edges: dict[int, np.ndarray] | None) -> DynamicGraph:
    """Union the withheld edges back into their snapshots (evaluation view)."""
    if not ood_edges or all(len(v) == 0 for v in ood_edges.values()):
        return g
    edge_lists = []
    for t in range(g.num_snapshots):
        extra = ood_edges.get(t)
        if extra is not None and len(extra):
            edge_lists.append(np.concatenate([g.snapshots[t], extra], axis=0))
        else:
            edge_lists.append(g.snapshots[t])
    merged = DynamicGraph.from_edges(g.num_nodes, edge_lists)
    merged.features = g.features
    return merged


def prepare_data(norm: dict) -> PreparedData:
    """Materialize the configured protocol into graph + split + OOD edges."""
    protocol = norm["protocol"]
    counts = norm["split"]
    kind = protocol["kind"]
    seed = protocol["seed"]
    if protocol.get("data_dir"):
        graph, ood_all, invariant, meta = load_dataset(protocol["data_dir"])
        seed = meta["protocol"]["seed"]  # split/eval negatives follow the dataset
    elif kind == "env_synthetic":
        test_n = protocol["test_snapshots"] or counts["test"]
        res = gen_env_synthetic(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["channels"],
            protocol["sigma_e"], protocol["q_bar"], seed,
            test_snapshots=test_n, feature_dim=protocol["feature_dim"],
            neighbors=protocol["neighbors"],
        )
        graph, ood_all, invariant = res.graph, res.ood_edges, res.invariant_channels
    elif kind == "attribute_filter":
        base = gen_random_graph(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["edges_per_snapshot"],
            num_attrs=protocol["num_attrs"], seed=seed, feature_dim=protocol["feature_dim"],
        )
        graph, ood_list = apply_attribute_filter(base, protocol["shifted_attr"])
        ood_all = {t: e for t, e in enumerate(ood_list)}
        invariant = None
    elif kind == "feature_shift":
        base = gen_random_graph(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["edges_per_snapshot"],
            num_attrs=0, seed=seed, feature_dim=protocol["feature_dim"],
        )
        graph = gen_feature_shift(base, protocol["p_bar"], protocol["sigma"], seed,
                                  iters=protocol["iters"], lr=protocol["fit_lr"])
        ood_all = {}
        invariant = None
    else:  # pragma: no cover - validate_config guards this
        raise DataError(f"unhandled protocol kind {kind!r}")

    test_start = graph.num_snapshots - counts["test"]
    ood_test = {t: e for t, e in ood_all.items() if t >= test_start and len(e)}
    split = chronological_split(graph, counts["train"], counts["val"], counts["test"],
                                seed=seed, exclude=ood_test)
    return PreparedData(graph=graph, split=split, ood_edges=ood_test,
                        invariant_channels=invariant, data_seed=seed)


# --------------------------------------------------------------------------
# dataset files


def generate_dataset(norm: dict, out_dir) -> None:
    """Write the configured protocol's dataset in the exchange formats."""
    os.makedirs(out_dir, exist_ok=True)
    protocol = norm["protocol"]
    kind = protocol["kind"]
    seed = protocol["seed"]
    invariant = None
    ood: dict[int, np.ndarray] = {}
    if kind == "env_synthetic":
        test_n = protocol["test_snapshots"] or norm["split"]["test"]
        res = gen_env_synthetic(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["channels"],
            protocol["sigma_e"], protocol["q_bar"], seed,
            test_snapshots=test_n, feature_dim=protocol["feature_dim"],
            neighbors=protocol["neighbors"],
        )
        graph, ood, invariant = res.graph, res.ood_edges, list(res.invariant_channels)
    elif kind == "attribute_filter":
        graph = gen_random_graph(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["edges_per_snapshot"],
            num_attrs=protocol["num_attrs"], seed=seed, feature_dim=protocol["feature_dim"],
        )
    else:
        base = gen_random_graph(
            protocol["num_nodes"], protocol["num_snapshots"], protocol["edges_per_snapshot"],
            num_attrs=0, seed=seed, feature_dim=protocol["feature_dim"],
        )
        graph = gen_feature_shift(base, protocol["p_bar"], protocol["sigma"], seed,
                                  iters=protocol["iters"], lr=protocol["fit_lr"])
    save_edgelist(os.path.join(out_dir, "edges.txt"), graph)
    save_features(os.path.join(out_dir, "features.csv"), graph.features)
    if ood:
        with open(os.path.join(out_dir, "ood_edges.txt"), "w", encoding="utf-8") as fh:
            for t in sorted(ood):
                for u, v in ood[t]:
                    fh.write(f"{t} {u} {v}\n")
    meta = {
        "protocol": protocol,
        "num_nodes": graph.num_nodes,
        "num_snapshots": graph.num_snapshots,
        "feature_dim": int(graph.features.shape[2]),
        "invariant_channels": invariant,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(data_dir):
    """Read back a generated dataset directory.

    Returns (graph, per-snapshot OOD edge dict, ground-truth invariant set or
    None, metadata).  Attribute-filter datasets apply the filter here, so the
    returned graph is already the training view.
    """
    meta_path = os.path.join(data_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{data_dir}: missing meta.json")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    n, t_len = meta["num_nodes"], meta["num_snapshots"]
    graph = load_edgelist(os.path.join(data_dir, "edges.txt"), n, t_len)
    features_path = os.path.join(data_dir, "features.csv")
    if os.path.exists(features_path):
        graph.features = load_features(features_path, n, t_len)
    kind = meta["protocol"]["kind"]
    ood: dict[int, np.ndarray] = {}
    invariant = None
    if kind == "env_synthetic":
        invariant = tuple(meta["invariant_channels"])
        ood_path = os.path.join(data_dir, "ood_edges.txt")
        if os.path.exists(ood_path):
            per_t: dict[int, list] = {}
            with open(ood_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    t, u, v = (int(x) for x in line.split())
                    per_t.setdefault(t, []).append((u, v))
            ood = {t: np.asarray(e, dtype=np.int64) for t, e in per_t.items()}
    elif kind == "attribute_filter":
        graph, ood_list = apply_attribute_filter(graph, meta["protocol"]["shifted_attr"])
        ood = {t: e for t, e in enumerate(ood_list) if len(e)}
    return graph, ood, invariant, meta


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: Model, g: DynamicGraph, split: SplitSpec,
             ood_edges: dict[int, np.ndarray] | None, cfg: TrainConfig,
             eval_seed: int, ground_truth: tuple[int, ...] | None = None) -> dict:
    """Test AUC without and with the withheld-shift edges.

    The encoder sees the evaluation view (withheld edges restored in test
    snapshots); each test snapshot is scored from the representation one step
    earlier with the invariant-masked predictor.  The shifted positives are
    balanced by equal-count extra negatives drawn with a fixed seed.
    """
    for tv in split.test_range:
        if len(split.positives[tv]) == 0:
            raise DataError(f"test snapshot {tv} has no positive edges")
    eval_g = merge_ood(g, ood_edges)
    rep = model.encoder.encode(eval_g)
    partitions = partition_all(channel_variance_all(rep.z.data),
                               cfg.partition_rule, cfg.quant_scale)
    masks = masks_from_partitions(partitions, cfg.channels)
    id_aucs, ood_aucs = [], []
    for tv in split.test_range:
        pos_scores = predict_links(rep, tv - 1, split.positives[tv], masks).data
        neg_scores = predict_links(rep, tv - 1, split.negatives[tv], masks).data
        id_aucs.append(auc(pos_scores, neg_scores))
        extra = (ood_edges or {}).get(tv, _EMPTY_EDGES)
        if len(extra):
            extra_neg = sample_negative_edges(eval_g, tv, len(extra),
                                              derive(eval_seed, "ood-neg", tv))
            all_pos = np.concatenate([pos_scores, predict_links(rep, tv - 1, extra, masks).data])
            all_neg = np.concatenate([neg_scores, predict_links(rep, tv - 1, extra_neg, masks).data])
            ood_aucs.append(auc(all_pos, all_neg))
        else:
            ood_aucs.append(id_aucs[-1])
    out = {
        "auc_no_ood": float(np.mean(id_aucs)),
        "auc_ood": float(np.mean(ood_aucs)),
    }
    if ground_truth is not None:
        out["i_acc"] = i_acc([p.invariant for p in partitions], ground_truth, cfg.channels)
    return out


# --------------------------------------------------------------------------
# the full run


def _aggregate(per_seed: list[dict], key: str) -> dict | None:
    values = [row[key] for row in per_seed if row.get(key) is not None]
    if not values:
        return None
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


def run_experiment(config: dict, out_dir: str | None = None) -> dict:
    """Generate-or-load data, train over every seed, evaluate, aggregate.

    With ``out_dir`` set, writes ``report.json``, one loss-curve CSV and one
    checkpoint per seed.  The report carries the normalized config echo.
    """
    norm = validate_config(config)
    data = prepare_data(norm)
    feature_dim = data.graph.features.shape[2]
    per_seed = []
    histories = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for seed in norm["seeds"]:
        cfg = train_config_for_seed(norm, seed)
        model = build_model(feature_dim, data.graph.num_snapshots, cfg)
        opt = AdamState(model.parameters(), lr=cfg.lr)
        result = fit(model, data.graph, data.split, cfg, opt)
        metrics = evaluate(model, data.graph, data.split, data.ood_edges, cfg,
                           eval_seed=data.data_seed, ground_truth=data.invariant_channels)
        row = {
            "seed": seed,
            "auc_no_ood": metrics["auc_no_ood"],
            "auc_ood": metrics["auc_ood"],
            "i_acc": metrics.get("i_acc"),
            "best_epoch": result.best_epoch,
            "best_val_auc": result.best_val_auc,
            "epochs_run": len(result.history),
        }
        per_seed.append(row)
        histories[seed] = result.history
        if out_dir:
            echo = {"config": _config_echo(norm), "seed": seed}
            save_checkpoint(os.path.join(out_dir, f"checkpoint_seed{seed}.ckpt"),
                            model, opt, echo)
    report = {
        "config": _config_echo(norm),
        "seeds": norm["seeds"],
        "per_seed": per_seed,
        "aggregate": {
            "auc_no_ood": _aggregate(per_seed, "auc_no_ood"),
            "auc_ood": _aggregate(per_seed, "auc_ood"),
            "i_acc": _aggregate(per_seed, "i_acc"),
        },
    }
    if out_dir:
        write_report(os.path.join(out_dir, "report.json"), report)
        for seed, history in histories.items():
            _write_loss_curve(os.path.join(out_dir, f"loss_curve_seed{seed}.csv"), history)
    return report


def _config_echo(norm: dict) -> dict:
    return {k: norm[k] for k in ("protocol", "split", "train", "seeds", "no_intervention")}


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_loss_curve(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "task", "risk", "cvae", "total", "val_auc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.task), repr(row.risk), repr(row.cvae),
                             repr(row.total), repr(row.val_auc)])


def run_sweep(config: dict, which: str = "alpha,beta", out_dir: str | None = None) -> list[dict]:
    """Run the loss-weight grid, one full experiment per combination."""
    from .config import sweep_grid

    norm = validate_config(config)
    rows = []
    for overrides in sweep_grid(which):
        combo = json.loads(json.dumps(norm))  # deep copy
        combo["train"].update(overrides)
        combo_dir = None
        if out_dir:
            tag = "_".join(f"{k}{v:g}" for k, v in sorted(overrides.items()))
            combo_dir = os.path.join(out_dir, tag)
        report = run_experiment(combo, combo_dir)
        rows.append({**overrides, "aggregate": report["aggregate"]})
    if out_dir:
        write_report(os.path.join(out_dir, "sweep_summary.json"),
                     {"which": which, "rows": rows})
    return rows
