"""Training and evaluation loops.

Training is sequential over shuffled scenes with gradient accumulation per
batch. Evaluation may fan forward passes out to worker threads, but every
accumulator is filled in fixed scene order afterward, so the thread count
can never change a result.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from . import model as mdl
from .config import RunConfig
from .inference import InferenceResult, infer
from .scenes import ClassTable, Scene


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


def _dn_rng(seed: int, epoch: int, scene_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xDE401, epoch, scene_idx]))


def train(
    cfg: RunConfig,
    table: ClassTable,
    scenes: list[Scene],
    log=None,
) -> tuple[ad.ParameterStore, list[int]]:
    """Train from scratch on `scenes`; returns the store and the class
    vocabulary (table ids) it was trained against. `log` is an optional
    callable taking one record per epoch."""
    vocab = mdl.class_vocab(table, held_out=tuple(cfg.corpus.held_out))
    embs = mdl.vocab_embeddings(table, vocab)
    dims = cfg.model
    store = mdl.init_params(dims, cfg.seed)
    statics = [
        mdl.build_statics(s, vocab, dims, tau=cfg.tau, mask_gate=cfg.flags.mask_gate)
        for s in scenes
    ]

    n = len(scenes)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0D7]))
    for epoch in range(cfg.optim.epochs):
        order = order_rng.permutation(n)
        t0 = time.monotonic()
        sums = np.zeros(3)
        for start in range(0, n, cfg.optim.batch_size):
            batch = order[start:start + cfg.optim.batch_size]
            store.zero_grads()
            for idx in batch:
                idx = int(idx)
                loss, report, _ = mdl.scene_loss(
                    store, scenes[idx], statics[idx], embs, dims,
                    cfg.flags, cfg.loss,
                    dn_rng=_dn_rng(cfg.seed, epoch, idx),
                    affinity_threshold=cfg.theta_aff,
                    box_jitter=cfg.denoise.box_jitter,
                    label_flip=cfg.denoise.label_flip,
                )
                if not math.isfinite(report.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                sums += (report.cls, report.mask_focal, report.dice)
                ad.backward(ad.mul(loss, 1.0 / len(batch)))
            if not store.grads_finite():
                raise NumericError(f"non-finite gradient at epoch {epoch}")
            store.adam_step(
                lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay,
            )
        if log is not None:
            log({
                "epoch": epoch,
                "cls": sums[0] / n,
                "mask_focal": sums[1] / n,
                "dice": sums[2] / n,
                "total": (cfg.loss.cls * sums[0] + cfg.loss.mask_focal * sums[1]
                          + cfg.loss.dice * sums[2]) / n,
                "seconds": round(time.monotonic() - t0, 3),
            })
    return store, vocab


def infer_scene(
    store: ad.ParameterStore,
    scene: Scene,
    table: ClassTable,
    cfg: RunConfig,
    mode: str = "closed",
) -> InferenceResult:
    """Forward + assembly for one scene with the full class table."""
    vocab = mdl.class_vocab(table)
    embs = mdl.vocab_embeddings(table, vocab)
    dims = cfg.model
    statics = mdl.build_statics(
        scene, vocab, dims, tau=cfg.tau, mask_gate=cfg.flags.mask_gate
    )
    outs = mdl.forward_scene(
        store, scene, statics, embs, dims, cfg.flags,
        plan=None, affinity_threshold=cfg.theta_aff,
    )
    last = outs[-1]
    is_thing = np.array([table.entries[c].is_thing for c in vocab])
    return infer(
        last.affinity.values, last.cls.values, scene.patches, is_thing,
        (scene.height, scene.width), mode=mode,
        field=scene.embed_field, class_embs=embs,
        kappa=cfg.kappa, theta_aff=cfg.theta_aff, theta_score=cfg.theta_score,
        temperature=cfg.clip_temperature,
    )


def evaluate(
    store: ad.ParameterStore,
    scenes: list[Scene],
    table: ClassTable,
    cfg: RunConfig,
    mode: str = "closed",
    threads: int = 1,
) -> dict:
    """Metric report over a scene list. Forward passes are read-only against
    the store, so scenes can run on several threads; accumulation stays in
    scene order regardless."""
    if threads < 1:
        raise ValueError("threads must be >= 1")

    def work(scene: Scene) -> InferenceResult:
        return infer_scene(store, scene, table, cfg, mode)

    if threads == 1:
        results = [work(s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, scenes))

    pq = mx.PQAccumulator()
    ap = mx.APAccumulator()
    miou = mx.MIoUAccumulator()
    for res, scene in zip(results, scenes):
        mx.add_scene_to_accumulators(res, scene, pq, ap, miou)

    pq_res = pq.result()
    ap_res = ap.result()
    miou_res = miou.result()
    held = set(cfg.corpus.held_out)

    def subset(d: dict, keep) -> dict:
        vals = [v["pq"] if isinstance(v, dict) else v for c, v in d.items() if keep(c)]
        return float(np.mean(vals)) if vals else 0.0

    report = {
        "mode": mode,
        "kappa": cfg.kappa if mode == "open" else None,
        "n_scenes": len(scenes),
        "pq": pq_res["pq"], "sq": pq_res["sq"], "rq": pq_res["rq"],
        "pq_per_class": {str(c): v for c, v in pq_res["per_class"].items()},
        "ap": ap_res["ap"],
        "ap_per_class": {str(c): v for c, v in ap_res["per_class"].items()},
        "miou": miou_res["miou"],
        "miou_per_class": {str(c): v for c, v in miou_res["per_class"].items()},
    }
    if held:
        report["pq_held_out"] = subset(pq_res["per_class"], lambda c: c in held)
        report["pq_seen"] = subset(pq_res["per_class"], lambda c: c not in held)
    return report
