"""Command-line entry point: ``smat <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config schema
violation, 4 checkpoint checksum failure, 5 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import analysis, kernels
from .adapt import SelectionSearchConfig, finetune_full, lr_search, select_experts
from .checkpoint import (Checkpoint, CheckpointError, mask_checkpoint, model_checkpoint,
                         model_from_checkpoint, specs_from_json, state_from_checkpoint,
                         state_to_checkpoint)
from .config import ConfigError, RunConfig
from .experts import fit_domain_mask
from .fewshot import Episode, accuracy, protonet_logits
from .l0mask import binarize, deterministic_gate, expected_density
from .metaopt import (TrainState, dense_meta_tune, direct_weights, fixed_gates, merged_model,
                      metrics_header, train)
from .params import Architecture, ParamSet
from .tasks import get_suite, pretrain_backbone, sample_episode

log = logging.getLogger("smat")

EVAL_HEADER_BASE = ["task_id", "domain", "is_ood", "n_way", "k_shot", "mode", "accuracy", "ci95"]


# helpers ----------------------------------------------------------------------

def threads() -> int:
    try:
        return max(1, int(os.environ.get("SMLT_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn: Callable, items: Sequence) -> list:
    """``map`` that may fan out to ``SMLT_THREADS`` workers; results keep input order."""
    n = threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def load_checked(path) -> Checkpoint:
    """Load a checkpoint and check its segments against the recorded architecture."""
    ck = Checkpoint.load(path)
    cfg = ck.header.get("config")
    if cfg is not None and "specs" in ck.header:
        arch = Architecture(**cfg["arch"])
        if specs_from_json(ck.header["specs"]) != arch.specs():
            raise CheckpointError(f"{path}: segments do not match the configured architecture")
    return ck


def run_config_of(ck: Checkpoint) -> RunConfig:
    return RunConfig.from_dict(ck.header["config"])


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        d = cfg.to_dict()
        d["pretrain"]["seed"] = args.seed
        d["train"]["seed"] = args.seed
        cfg = RunConfig.from_dict(d)
    return cfg


def write_csv(path, header, rows) -> None:
    analysis.write_csv(path, header, rows)


def ci95(values) -> float:
    """Normal-approximation half-width of the 95% interval of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))


# evaluation -------------------------------------------------------------------

def evaluate_episode(state: TrainState, ep: Episode, mode: str, cfg: RunConfig,
                     lrs: dict[str, float] | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Query accuracy plus the (normalized, raw) merge weights used."""
    metric = cfg.train.metric
    gates = fixed_gates(state)
    if mode == "select":
        sc = SelectionSearchConfig(cfg.adapt.rounds, cfg.adapt.accept_prob, cfg.train.seed,
                                   cfg.adapt.select_leave_one_out)
        w, _ = select_experts(state, ep, sc, metric, gates)
    else:
        w = direct_weights(state, ep)
    if mode == "finetune":
        lr = (lrs or {}).get(ep.domain, cfg.adapt.lr_grid[0])
        logits = finetune_full(state, ep, cfg.adapt.ft_steps, lr, metric,
                               cfg.adapt.ft_leave_one_out, w, gates).query_logits
    else:
        logits = protonet_logits(merged_model(state, w, gates), ep, metric)
    return accuracy(logits, ep.query_y), w.alpha.data, w.raw.data


def finetune_lrs(state: TrainState, cfg: RunConfig, spec, which: Sequence[str]) -> dict[str, float]:
    grid = cfg.adapt.lr_grid
    if len(grid) == 1:
        return {d.name: grid[0] for d in spec.id_domains + spec.ood_domains}
    val = [sample_episode(spec, "val", w, i) for w in which
           for i in range(cfg.adapt.lr_search_episodes)]
    return lr_search(state, val, grid, cfg.adapt.ft_steps, cfg.train.metric)


def eval_rows(state: TrainState, cfg: RunConfig, spec, split: str, mode: str,
              n_episodes: int, which: Sequence[str] = ("id", "ood")):
    lrs = finetune_lrs(state, cfg, spec, which) if mode == "finetune" else None
    m = state.pool.n_experts
    header = EVAL_HEADER_BASE + [f"alpha_{i + 1}" for i in range(m)] + [f"raw_{i + 1}" for i in range(m)]
    eps = [(w, i, sample_episode(spec, split, w, i)) for w in which for i in range(n_episodes)]
    results = ordered_map(lambda t: evaluate_episode(state, t[2], mode, cfg, lrs), eps)
    rows, accs = [], {w: [] for w in which}
    for tid, ((w, i, ep), (acc, alpha, raw)) in enumerate(zip(eps, results)):
        accs[w].append(acc)
        rows.append([str(tid), ep.domain, str(int(ep.is_ood)), str(ep.n_way), str(ep.k_shot),
                     mode, repr(float(acc)), ""] + [repr(float(x)) for x in alpha]
                    + [repr(float(x)) for x in raw])
    summary = {}
    for w in which:
        label = f"{w.upper()}_AVG"
        mean, half = float(np.mean(accs[w])), ci95(accs[w])
        summary[w] = (mean, half)
        rows.append([label, "", str(int(w == "ood")), "", "", mode, repr(mean), repr(half)]
                    + [""] * (2 * m))
    return header, rows, summary, lrs


# commands -----------------------------------------------------------------------

def cmd_config(args) -> int:
    from .config import SCHEMA

    print(json.dumps(SCHEMA, indent=2) if args.schema else RunConfig().to_json())
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    spec = get_suite(cfg.suite, cfg.suite_seed)
    theta = pretrain_backbone(spec, cfg.pretrain)
    model_checkpoint(theta, {"config": cfg.to_dict()}, "pretrained").save(args.out)
    log.info("pre-trained backbone written to %s", args.out)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    theta_pre = model_from_checkpoint(load_checked(args.from_pretrained))
    spec = get_suite(cfg.suite, cfg.suite_seed)
    tc = cfg.train
    if args.max_steps is not None:
        d = cfg.to_dict()
        d["train"]["max_steps"] = args.max_steps
        cfg = RunConfig.from_dict(d)
        tc = cfg.train

    def stream(step, i):
        return sample_episode(spec, "train", "id", step * tc.batch_tasks + i)

    val_id = [sample_episode(spec, "val", "id", i) for i in range(tc.val_episodes)] if tc.eval_every else []
    val_ood = [sample_episode(spec, "val", "ood", i) for i in range(tc.val_episodes)] if tc.eval_every else []
    if args.dense:
        tuned = dense_meta_tune(theta_pre, stream, tc.max_steps, tc.lr_main, tc.batch_tasks, tc.metric)
        model_checkpoint(tuned, {"config": cfg.to_dict()}, "dense").save(args.out)
        return 0
    res = train(tc, theta_pre, stream, val_id, val_ood)
    state = res.best_state if args.keep_best else res.state
    state_to_checkpoint(state, {"config": cfg.to_dict()}).save(args.out)
    if args.metrics:
        write_csv(args.metrics, metrics_header(tc.n_experts), res.rows)
    log.info("trained %d steps; checkpoint %s", tc.max_steps, args.out)
    return 0


def _eval_config(args, ck: Checkpoint) -> RunConfig:
    cfg = run_config_of(ck)
    d = cfg.to_dict()
    for key, attr in (("rounds", "rounds"), ("accept_prob", "accept_prob"),
                      ("ft_steps", "ft_steps")):
        v = getattr(args, attr, None)
        if v is not None:
            d["adapt"][key] = v
    if getattr(args, "lr_grid", None):
        d["adapt"]["lr_grid"] = [float(x) for x in args.lr_grid.split(",")]
    return RunConfig.from_dict(d)


def cmd_eval(args) -> int:
    ck = load_checked(args.checkpoint)
    cfg = _eval_config(args, ck)
    state = state_from_checkpoint(ck)
    spec = get_suite(args.suite or cfg.suite, cfg.suite_seed)
    which = ["id", "ood"] if args.which == "both" else [args.which]
    header, rows, summary, lrs = eval_rows(state, cfg, spec, args.split, args.mode,
                                           args.episodes, which)
    write_csv(args.out, header, rows)
    for w, (mean, half) in summary.items():
        print(f"{w.upper()} avg {100 * mean:.2f} +- {100 * half:.2f}")
    if lrs:
        log.info("fine-tuning learning rates: %s", lrs)
    return 0


def cmd_fit_domain_mask(args) -> int:
    pre_ck = load_checked(args.pretrained)
    cfg = run_config_of(pre_ck)
    theta_pre = model_from_checkpoint(pre_ck)
    theta_tuned = model_from_checkpoint(load_checked(args.tuned))
    spec = get_suite(cfg.suite, cfg.suite_seed)
    dom = spec.domain(args.domain)
    which = "ood" if dom in spec.ood_domains else "id"
    # OOD domains have no training split; their validation split drives the fit
    fit_split = "train" if which == "id" else "val"
    episodes = (sample_episode(spec, fit_split, which, i, domain=dom.name) for i in range(args.steps))
    rng = np.random.default_rng([cfg.train.seed, 41])
    res = fit_domain_mask(theta_pre, theta_tuned, episodes, args.tau, args.steps, rng,
                          cfg.train.metric, lr=args.lr)
    mask_checkpoint(res.mask, theta_pre.specs,
                    {"config": cfg.to_dict(), "domain": dom.name, "tau": args.tau}).save(args.out)
    gate = deterministic_gate(res.mask).z.data
    base = theta_pre.flatten_view()
    masked = ParamSet.unflatten(theta_pre.specs, base + (theta_tuned.flatten_view() - base) * gate)
    models = {"pretrained": theta_pre, "tuned": theta_tuned, "masked": masked}
    density = {"pretrained": 0.0, "tuned": 1.0, "masked": float(binarize(gate).mean())}
    rows = []
    for target, w, dname in (("domain", which, dom.name), ("id", "id", None), ("ood", "ood", None)):
        eps = [sample_episode(spec, "test", w, i, domain=dname) for i in range(args.episodes)]
        for name, net in models.items():
            accs = [accuracy(protonet_logits(net, e, cfg.train.metric), e.query_y) for e in eps]
            rows.append([dom.name, repr(args.tau), name, target, repr(density[name]),
                         repr(float(np.mean(accs))), repr(ci95(accs))])
    write_csv(args.csv, ["domain", "tau", "model", "eval_on", "density", "accuracy", "ci95"], rows)
    print(f"expected density {expected_density(res.mask).item():.4f}")
    return 0


def cmd_analyze(args) -> int:
    ck = load_checked(args.checkpoint)
    cfg = run_config_of(ck)
    state = state_from_checkpoint(ck)
    if args.report == "sparsity":
        rep = analysis.sparsity_report(state.pool)
        write_csv(args.out, rep.header, rep.rows)
    elif args.report == "overlap":
        header, rows = analysis.overlap_rows(analysis.mask_overlap_matrix(state.pool, args.threshold))
        write_csv(args.out, header, rows)
    elif args.report == "alignment":
        spec = get_suite(cfg.suite, cfg.suite_seed)
        eps = [sample_episode(spec, "test", "id", i) for i in range(2 * args.pairs)]
        pairs = [(eps[2 * i], eps[2 * i + 1]) for i in range(args.pairs)]
        tc = cfg.train
        res = analysis.gradient_alignment(state, pairs, beta_w=tc.beta_w, temp=tc.kd_temp,
                                          k_teacher=tc.k_teacher, lr_teacher=tc.lr_teacher,
                                          metric=tc.metric)
        write_csv(args.out, analysis.ALIGNMENT_HEADER, analysis.alignment_rows(res))
    else:
        if not args.log:
            raise CheckpointError("--report selection needs --log <eval csv>")
        header, rows = analysis.selection_rows(analysis.selection_stats(analysis.read_eval_log(args.log)))
        write_csv(args.out, header, rows)
    return 0


# parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smat", description="Sparse interpolated experts for few-shot meta-tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print the default run config (or its schema)")
    c.add_argument("--schema", action="store_true")
    c.set_defaults(fn=cmd_config)

    c = sub.add_parser("pretrain", help="pre-train the backbone on pooled ID classes")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_pretrain)

    c = sub.add_parser("train", help="meta-train the expert pool and router")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--from-pretrained", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--metrics")
    c.add_argument("--max-steps", type=int)
    c.add_argument("--keep-best", action="store_true",
                   help="save the state with the best held-out ID accuracy")
    c.add_argument("--dense", action="store_true", help="plain dense meta-tuning baseline instead")
    c.set_defaults(fn=cmd_train)

    c = sub.add_parser("eval", help="few-shot evaluation to a results CSV")
    c.add_argument("checkpoint")
    c.add_argument("--suite")
    c.add_argument("--split", default="test", choices=["train", "val", "test"])
    c.add_argument("--which", default="both", choices=["id", "ood", "both"])
    c.add_argument("--mode", default="direct", choices=["direct", "select", "finetune"])
    c.add_argument("--episodes", type=int, default=100)
    c.add_argument("--rounds", type=int)
    c.add_argument("--accept-prob", type=float)
    c.add_argument("--ft-steps", type=int)
    c.add_argument("--lr-grid", help="comma-separated fine-tuning learning rates")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_eval)

    c = sub.add_parser("fit-domain-mask", help="sparse interpolation mask for one domain")
    c.add_argument("pretrained")
    c.add_argument("tuned")
    c.add_argument("--domain", required=True)
    c.add_argument("--tau", type=float, default=0.9)
    c.add_argument("--steps", type=int, default=1000)
    c.add_argument("--lr", type=float, default=0.05)
    c.add_argument("--episodes", type=int, default=100)
    c.add_argument("--out", required=True)
    c.add_argument("--csv", required=True)
    c.set_defaults(fn=cmd_fit_domain_mask)

    c = sub.add_parser("analyze", help="diagnostic reports as CSV")
    c.add_argument("checkpoint")
    c.add_argument("--log", help="evaluation CSV (selection report)")
    c.add_argument("--report", required=True, choices=["sparsity", "overlap", "alignment", "selection"])
    c.add_argument("--threshold", type=float, default=0.5)
    c.add_argument("--pairs", type=int, default=20)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as e:
        print(f"smat: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError, KeyError) as e:
        print(f"smat: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
