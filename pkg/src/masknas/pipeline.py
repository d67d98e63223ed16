"""Stage orchestration: run the search pipeline end to end with resumable
checkpoints and deterministic artifacts.

Each stage writes one checkpoint and one metrics CSV into the output
directory.  Stages chain through their checkpoints, so a later stage demands
the earlier stage's file and refuses to run without it.  Re-running a
finished stage is a no-op; re-running an interrupted one picks up at the
last completed epoch and produces the same bytes a straight-through run
would have.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, echo_config
from .dataio import Dataset, load_dataset
from .derive import (DerivedArch, derive_heuristic, edge_importance_report,
                     export_dot, from_masks, masks_from_arch,
                     sample_random_arch, write_histogram_csvs)
from .errors import (DivergenceError, FormatError, PrerequisiteError)
from .finetune import (FinetuneState, build_finetune_model, epochs_to_target,
                       finetune)
from .masker import (HierMasks, MaskTrainState, init_masks, sparsity_report,
                     train_masks)
from .rng import derive_seed
from .searchspace import (SearchSpaceSpec, Supernet, build_supernet,
                          count_params)
from .trainer import (AdamState, SGDState, TrainState, evaluate,
                      train_supernet)

CSV_HEADER = "stage,epoch,split,loss,accuracy,lr,params"
ABLATION_HEADER = "arm,runs,accuracy,accuracy_std,loss,params,epochs_to_target"


# ------------------------------------------------------------------ formatting

def format_row(row) -> str:
    stage, epoch, split, loss, acc, lr, params = row
    return (f"{stage},{int(epoch)},{split},{repr(float(loss))},"
            f"{repr(float(acc))},{repr(float(lr))},{int(params)}")


def write_metrics_csv(path, rows):
    lines = [CSV_HEADER] + [format_row(r) for r in rows]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def rows_to_meta(rows) -> list:
    return [[str(r[0]), int(r[1]), str(r[2]), float(r[3]), float(r[4]),
             float(r[5]), int(r[6])] for r in rows]


def rows_from_meta(items) -> list:
    return [(r[0], r[1], r[2], r[3], r[4], r[5], r[6]) for r in items]


# ----------------------------------------------------------- state <-> arrays

def spec_to_meta(spec: SearchSpaceSpec) -> dict:
    return {
        "nodes_per_cell": spec.nodes_per_cell,
        "num_cells": spec.num_cells,
        "init_channels": spec.init_channels,
        "num_candidate_ops": spec.num_candidate_ops,
        "num_classes": spec.num_classes,
        "in_channels": spec.in_channels,
        "reduction_cells": (None if spec.reduction_cells is None
                            else list(spec.reduction_cells)),
        "candidate_ops": (None if spec.candidate_ops is None
                          else list(spec.candidate_ops)),
    }


def spec_from_meta(d: dict) -> SearchSpaceSpec:
    return SearchSpaceSpec(
        nodes_per_cell=d["nodes_per_cell"],
        num_cells=d["num_cells"],
        init_channels=d["init_channels"],
        num_candidate_ops=d["num_candidate_ops"],
        num_classes=d["num_classes"],
        in_channels=d["in_channels"],
        reduction_cells=(None if d["reduction_cells"] is None
                         else tuple(d["reduction_cells"])),
        candidate_ops=(None if d["candidate_ops"] is None
                       else tuple(d["candidate_ops"])),
    )


def net_to_arrays(net: Supernet) -> dict[str, np.ndarray]:
    out = {}
    for name, t in net.named_params():
        out[f"param.{name}"] = t.data
    for name, t in net.arch_named_params():
        out[name] = t.data
    for name, b in net.named_buffers():
        out[f"buffer.{name}"] = b
    return out


def net_from_arrays(meta: dict, arrays: dict) -> Supernet:
    spec = spec_from_meta(meta["spec"])
    net = build_supernet(spec, meta["net_seed"])
    try:
        for name, t in net.named_params():
            t.data = arrays[f"param.{name}"].copy()
        for name, t in net.arch_named_params():
            t.data = arrays[name].copy()
        for name, _ in net.named_buffers():
            net.set_buffer(name, arrays[f"buffer.{name}"].copy())
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing array {exc}") from None
    return net


def _opt_to_arrays(sgd: dict, adam: dict):
    meta = {"sgd_names": sorted(sgd), "adam_t": {}}
    arrays = {}
    for name in sorted(sgd):
        v = sgd[name].velocity
        arrays[f"opt.sgd.{name}"] = (v if v is not None
                                     else np.zeros(0))
    for name in sorted(adam):
        st = adam[name]
        meta["adam_t"][name] = st.t
        arrays[f"opt.adam.{name}.m"] = (st.m if st.m is not None
                                        else np.zeros(0))
        arrays[f"opt.adam.{name}.v"] = (st.v if st.v is not None
                                        else np.zeros(0))
    return meta, arrays


def _opt_from_arrays(meta: dict, arrays: dict):
    sgd = {}
    for name in meta["sgd_names"]:
        arr = arrays[f"opt.sgd.{name}"]
        sgd[name] = SGDState(velocity=None if arr.size == 0 else arr.copy())
    adam = {}
    for name, t in meta["adam_t"].items():
        m = arrays[f"opt.adam.{name}.m"]
        v = arrays[f"opt.adam.{name}.v"]
        adam[name] = AdamState(m=None if m.size == 0 else m.copy(),
                               v=None if v.size == 0 else v.copy(),
                               t=int(t))
    return sgd, adam


def masks_to_arrays(masks: HierMasks) -> dict[str, np.ndarray]:
    return {name: arr for name, arr in masks.named_arrays()}


def masks_from_arrays(tau: float, arrays: dict) -> HierMasks:
    alpha, beta, w = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("mask.alpha."):
            alpha[name[len("mask.alpha."):]] = arr.copy()
        elif name.startswith("mask.beta."):
            beta[name[len("mask.beta."):]] = arr.copy()
        elif name.startswith("mask.w."):
            w[name[len("mask.w."):]] = arr.copy()
    if not alpha or not beta:
        raise FormatError("checkpoint holds no mask arrays")
    return HierMasks(alpha, beta, w, tau=float(tau))


# ------------------------------------------------------------------ run paths

class RunPaths:
    """File layout of one output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        j = lambda name: os.path.join(out_dir, name)
        self.config_echo = j("config.resolved")
        self.supernet_ckpt = j("supernet.ckpt")
        self.masks_ckpt = j("masks.ckpt")
        self.final_ckpt = j("final.ckpt")
        self.supernet_csv = j("supernet_metrics.csv")
        self.mask_csv = j("mask_metrics.csv")
        self.finetune_csv = j("finetune_metrics.csv")
        self.eval_csv = j("eval.csv")
        self.ablation_csv = j("ablation.csv")
        self.arch_dot = j("arch.dot")
        self.edge_importance_csv = j("edge_importance.csv")

    def prepare(self, cfg: ExperimentConfig):
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self.config_echo, "w", encoding="utf-8") as f:
            f.write(echo_config(cfg))


# ------------------------------------------------------------------- datasets

def resolve_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training pool and test set, normalized by training statistics."""
    train = load_dataset(cfg.dataset)
    if cfg.test_dataset:
        test = load_dataset(cfg.test_dataset, count=256)
    elif cfg.dataset.startswith("synthetic:"):
        parts = cfg.dataset.split(":")
        tseed = derive_seed(int(parts[2]), "test")
        test = load_dataset(f"synthetic:{parts[1]}:{tseed}:256")
    else:
        raise PrerequisiteError(
            "test_dataset must be set when dataset is a file")
    mean, std = train.channel_stats()
    return train.normalized(mean, std), test.normalized(mean, std)


def _wrap_divergence(exc: DivergenceError, ckpt_path: str):
    last = ckpt_path if os.path.exists(ckpt_path) else None
    raise DivergenceError(str(exc), last_checkpoint=last) from None


def _load_stage(path: str, stage: str) -> Checkpoint:
    ck = load_checkpoint(path)
    if ck.stage != stage:
        raise FormatError(
            f"{path}: expected a {stage!r} checkpoint, found {ck.stage!r}")
    return ck


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise PrerequisiteError(f"{what} checkpoint not found at {path}; "
                                "run the earlier stage first")


# -------------------------------------------------------------------- stages

def stage_supernet(cfg: ExperimentConfig, out_dir: str, resume: bool = True):
    """Train the weight-sharing model; returns (net, metrics rows)."""
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    tcfg = replace(cfg.trainer, seed=derive_seed(cfg.seed, "supernet"))
    state = None
    rows = []
    if resume and os.path.exists(paths.supernet_ckpt):
        ck = _load_stage(paths.supernet_ckpt, "supernet")
        net = net_from_arrays(ck.meta, ck.arrays)
        sgd, adam = _opt_from_arrays(ck.meta, ck.arrays)
        state = TrainState(epoch=ck.meta["epoch"], arch_t=ck.meta["arch_t"],
                           sgd=sgd, adam=adam)
        rows = rows_from_meta(ck.meta["metrics"])
    else:
        net = build_supernet(cfg.search, derive_seed(cfg.seed, "init"))
    if state is not None and state.epoch >= tcfg.epochs:
        write_metrics_csv(paths.supernet_csv, rows)
        return net, rows
    train, _ = resolve_datasets(cfg)

    def checkpoint(ep, net_, state_, metrics):
        all_rows = rows + metrics
        meta = {"spec": spec_to_meta(cfg.search),
                "net_seed": int(net_.seed),
                "epoch": state_.epoch, "arch_t": state_.arch_t,
                "metrics": rows_to_meta(all_rows)}
        omet, oarr = _opt_to_arrays(state_.sgd, state_.adam)
        meta.update(omet)
        save_checkpoint(paths.supernet_ckpt, "supernet", meta,
                        {**net_to_arrays(net_), **oarr})

    try:
        net, new_rows, state, _split = train_supernet(
            net, train, tcfg, state=state, on_epoch=checkpoint)
    except DivergenceError as exc:
        _wrap_divergence(exc, paths.supernet_ckpt)
    rows = rows + new_rows
    write_metrics_csv(paths.supernet_csv, rows)
    return net, rows


def stage_masks(cfg: ExperimentConfig, out_dir: str, resume: bool = True):
    """Search binary masks over the trained supernet; returns (net, masks,
    metrics rows)."""
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    _require(paths.supernet_ckpt, "supernet")
    sck = _load_stage(paths.supernet_ckpt, "supernet")
    if sck.meta["epoch"] < cfg.trainer.epochs:
        raise PrerequisiteError(
            f"supernet trained {sck.meta['epoch']}/{cfg.trainer.epochs} "
            "epochs; finish train-supernet first")
    net = net_from_arrays(sck.meta, sck.arrays)
    mcfg = replace(cfg.masker, seed=derive_seed(cfg.seed, "mask"))
    state = None
    rows = []
    if resume and os.path.exists(paths.masks_ckpt):
        ck = _load_stage(paths.masks_ckpt, "masks")
        masks = masks_from_arrays(ck.meta["tau"], ck.arrays)
        sgd, adam = _opt_from_arrays(ck.meta, ck.arrays)
        state = MaskTrainState(adam=adam, epoch=ck.meta["epoch"])
        rows = rows_from_meta(ck.meta["metrics"])
    else:
        masks = init_masks(net, mcfg)
    if state is not None and state.epoch >= mcfg.epochs:
        write_metrics_csv(paths.mask_csv, rows)
        return net, masks, rows
    train, _ = resolve_datasets(cfg)

    def checkpoint(ep, masks_, state_, metrics):
        all_rows = rows + metrics
        meta = {"tau": float(masks_.tau), "epoch": state_.epoch,
                "metrics": rows_to_meta(all_rows),
                "sparsity": sparsity_report(masks_)}
        omet, oarr = _opt_to_arrays({}, state_.adam)
        meta.update(omet)
        save_checkpoint(paths.masks_ckpt, "masks", meta,
                        {**masks_to_arrays(masks_), **oarr})

    try:
        masks, new_rows, state = train_masks(
            net, masks, train, mcfg, state=state, on_epoch=checkpoint)
    except DivergenceError as exc:
        _wrap_divergence(exc, paths.masks_ckpt)
    rows = rows + new_rows
    write_metrics_csv(paths.mask_csv, rows)
    return net, masks, rows


def _load_trained(paths: RunPaths):
    _require(paths.supernet_ckpt, "supernet")
    _require(paths.masks_ckpt, "mask search")
    sck = _load_stage(paths.supernet_ckpt, "supernet")
    mck = _load_stage(paths.masks_ckpt, "masks")
    net = net_from_arrays(sck.meta, sck.arrays)
    masks = masks_from_arrays(mck.meta["tau"], mck.arrays)
    return net, masks, sck, mck


def stage_finetune(cfg: ExperimentConfig, out_dir: str, resume: bool = True):
    """Fine-tune the masked model; returns (model, metrics rows)."""
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    net, masks, sck, mck = _load_trained(paths)
    if mck.meta["epoch"] < cfg.masker.epochs:
        raise PrerequisiteError(
            f"mask search ran {mck.meta['epoch']}/{cfg.masker.epochs} "
            "epochs; finish search-mask first")
    fcfg = replace(cfg.finetune, seed=derive_seed(cfg.seed, "finetune"))
    state = None
    rows = []
    model = None
    if resume and os.path.exists(paths.final_ckpt):
        ck = _load_stage(paths.final_ckpt, "final")
        model = net_from_arrays(ck.meta, ck.arrays)
        sgd, _ = _opt_from_arrays(ck.meta, ck.arrays)
        state = FinetuneState(epoch=ck.meta["epoch"], sgd=sgd)
        rows = rows_from_meta(ck.meta["metrics"])
    train, test = resolve_datasets(cfg)

    def checkpoint(ep, model_, state_, metrics):
        all_rows = rows + metrics
        meta = {"spec": spec_to_meta(cfg.search),
                "net_seed": int(model_.seed),
                "epoch": state_.epoch, "metrics": rows_to_meta(all_rows),
                "adam_t": {}}
        omet, oarr = _opt_to_arrays(state_.sgd, {})
        meta.update(omet)
        save_checkpoint(paths.final_ckpt, "final", meta,
                        {**net_to_arrays(model_), **masks_to_arrays(masks),
                         **oarr})

    if state is not None and state.epoch >= fcfg.epochs:
        write_metrics_csv(paths.finetune_csv, rows)
        return model, rows
    try:
        model, new_rows, state = finetune(
            net, masks, train, test, fcfg, state=state,
            on_epoch=checkpoint, model=model)
    except DivergenceError as exc:
        _wrap_divergence(exc, paths.final_ckpt)
    rows = rows + new_rows
    write_metrics_csv(paths.finetune_csv, rows)
    return model, rows


def stage_derive(cfg: ExperimentConfig, out_dir: str) -> DerivedArch:
    """Extract the discrete architecture and its summary artifacts."""
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    net, masks, _sck, _mck = _load_trained(paths)
    arch = from_masks(net, masks)
    export_dot(arch, paths.arch_dot)
    write_histogram_csvs(arch, out_dir)
    report = edge_importance_report(net)
    lines = ["kind,node,edge,weight"]
    for kind in sorted(report):
        for node in sorted(report[kind]):
            for e, wt in enumerate(report[kind][node]["weights"]):
                lines.append(f"{kind},{node},{e},{repr(float(wt))}")
    with open(paths.edge_importance_csv, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return arch


def run_eval(cfg: ExperimentConfig, out_dir: str):
    """Loss, accuracy and parameter counts before and after masking."""
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    net, masks, sck, _mck = _load_trained(paths)
    _train, test = resolve_datasets(cfg)
    binary = masks.binarize()
    bs = cfg.trainer.batch_size
    rows = []
    loss, acc = evaluate(net, test, bs)
    rows.append(("eval_supernet", sck.meta["epoch"], "test", loss, acc, 0.0,
                 count_params(net)))
    loss, acc = evaluate(net, test, bs, masks=binary)
    rows.append(("eval_masked", sck.meta["epoch"], "test", loss, acc, 0.0,
                 count_params(net, binary)))
    if os.path.exists(paths.final_ckpt):
        fck = _load_stage(paths.final_ckpt, "final")
        model = net_from_arrays(fck.meta, fck.arrays)
        loss, acc = evaluate(model, test, bs, masks=binary)
        rows.append(("eval_final", fck.meta["epoch"], "test", loss, acc, 0.0,
                     count_params(model, binary)))
    write_metrics_csv(paths.eval_csv, rows)
    return rows


def run_pipeline(cfg: ExperimentConfig, out_dir: str, resume: bool = True):
    """All four stages in order; returns the derived architecture."""
    stage_supernet(cfg, out_dir, resume=resume)
    stage_masks(cfg, out_dir, resume=resume)
    stage_finetune(cfg, out_dir, resume=resume)
    return stage_derive(cfg, out_dir)


# ------------------------------------------------------------------- ablation

def _best_val_loss(rows) -> float:
    vals = [r[3] for r in rows if r[0] == "supernet" and r[2] == "val"]
    if not vals:
        raise PrerequisiteError("supernet metrics hold no validation rows")
    return min(vals)


def _arm_run(net, masks, train, test, fcfg, target):
    model, rows, _state = finetune(net, masks, train, test, fcfg)
    test_rows = [r for r in rows if r[2] == "test"]
    last = test_rows[-1]
    return {"loss": float(last[3]), "acc": float(last[4]),
            "params": int(last[6]),
            "ett": epochs_to_target(rows, target)}


def run_ablation(cfg: ExperimentConfig, out_dir: str):
    """Compare the searched masks against simpler derivation rules.

    Arms: the full mask hierarchy, the two heuristic discretizations (the
    single-level one on a copy whose edge-mixing logits are zeroed, so every
    edge weighs in uniformly), the mean over random architectures, and a
    from-scratch re-initialization of the mask arm's architecture.  All warm
    arms inherit the supernet weights.  Rows land in ablation.csv.
    """
    paths = RunPaths(out_dir)
    paths.prepare(cfg)
    net, masks, sck, _mck = _load_trained(paths)
    train, test = resolve_datasets(cfg)
    target = _best_val_loss(rows_from_meta(sck.meta["metrics"])) \
        * cfg.ablation.target_loss_factor

    def fcfg(*labels):
        return replace(cfg.finetune,
                       seed=derive_seed(cfg.seed, "ablate", *labels))

    results = []
    res = _arm_run(net, masks, train, test, fcfg("hier"), target)
    results.append(("hier_mask", [res]))

    arch_m = derive_heuristic(net, "multi")
    res = _arm_run(net, masks_from_arch(net, arch_m), train, test,
                   fcfg("multi"), target)
    results.append(("heur_multi", [res]))

    flat = net.clone()
    for kind in flat.spec.kinds:
        flat.arch[kind].beta.data = np.zeros_like(flat.arch[kind].beta.data)
    arch_s = derive_heuristic(flat, "single")
    res = _arm_run(flat, masks_from_arch(flat, arch_s), train, test,
                   fcfg("single"), target)
    results.append(("heur_single", [res]))

    rand = []
    for k in range(cfg.ablation.random_arch_count):
        arch_r = sample_random_arch(cfg.search,
                                    derive_seed(cfg.seed, "randarch", k))
        rand.append(_arm_run(net, masks_from_arch(net, arch_r), train, test,
                             fcfg("rand", k), target))
    results.append(("random_arch", rand))

    res = _arm_run(net, masks, train, test,
                   replace(fcfg("reinit"), init_mode="random"), target)
    results.append(("random_init", [res]))

    lines = [ABLATION_HEADER]
    for arm, runs in results:
        accs = np.array([r["acc"] for r in runs])
        lines.append(",".join([
            arm, str(len(runs)),
            repr(float(accs.mean())),
            repr(float(accs.std())),
            repr(float(np.mean([r["loss"] for r in runs]))),
            repr(float(np.mean([r["params"] for r in runs]))),
            repr(float(np.mean([r["ett"] for r in runs]))),
        ]))
    with open(paths.ablation_csv, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return results
