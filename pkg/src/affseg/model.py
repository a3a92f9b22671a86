"""Whole-network assembly: one parameter store, one forward pass per scene,
and the per-scene training loss with per-stage re-matching."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import supervision as sv
from .autodiff import ParameterStore, Tensor
from .decoder import StageOutput, decode, init_decoder_params
from .encoder import encode_patches, init_encoder_params, patch_descriptors, position_embedding
from .masks import BBox, bbox_of
from .scenes import ClassTable, GtInstance, Scene
from .supervision import DenoisePlan, MatchWeights, Targets


@dataclass
class ModelDims:
    dim: int = 64
    heads: int = 4
    stages: int = 6
    roi_size: int = 7
    embed_dim: int = 32

    @property
    def feat_dim(self) -> int:
        return self.roi_size * self.roi_size * 3


@dataclass
class FeatureFlags:
    """Ablation switches. Defaults reproduce the full model."""

    mask_gate: bool = True        # gate RoI features by the patch mask
    dca: bool = True              # affinity-masked cross-attention
    stacking: bool = True         # residual accumulation of affinity logits
    qe: bool = True               # region-feature query enhancement
    self_affinity_negatives: bool = True
    denoising: bool = True
    use_mfl: bool = True
    use_dice: bool = True


@dataclass
class LossWeights:
    cls: float = 2.0
    mask_focal: float = 1.0
    dice: float = 1.0
    match: MatchWeights = field(default_factory=MatchWeights)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def init_params(dims: ModelDims, seed: int) -> ParameterStore:
    store = ParameterStore()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A12A]))
    init_encoder_params(store, dims.feat_dim, dims.dim, dims.stages, rng)
    init_decoder_params(
        store, dims.dim, dims.embed_dim, dims.stages, dims.heads, dims.feat_dim, rng
    )
    return store


# --- static per-scene precomputation -----------------------------------------

@dataclass
class SceneStatics:
    """Everything about a scene that does not depend on parameters. Built once
    and reused across epochs."""

    feats: np.ndarray            # (N, F) raw patch descriptors
    pos: np.ndarray              # (N, D) patch position embeddings
    boxes: list[BBox]
    gt_vocab: list[GtInstance]   # gt with class ids remapped to vocab indices
    match_matrix: np.ndarray     # (K, N)
    semantic_rows: np.ndarray    # (C, N)
    present: np.ndarray          # (C,) bool
    image_hw: tuple[int, int]


def class_vocab(table: ClassTable, held_out: tuple[int, ...] = ()) -> list[int]:
    """Ordered class ids the model scores against; held-out ids drop out."""
    return [e.class_id for e in table.entries if e.class_id not in held_out]


def vocab_embeddings(table: ClassTable, vocab: list[int]) -> np.ndarray:
    return np.stack([table.entries[c].embedding for c in vocab])


def build_statics(
    scene: Scene,
    vocab: list[int],
    dims: ModelDims,
    tau: float = 0.8,
    mask_gate: bool = True,
) -> SceneStatics:
    feats, pos, boxes = patch_descriptors(
        scene.image, scene.patches, dims.roi_size, dims.dim, use_mask_gate=mask_gate
    )
    index = {c: i for i, c in enumerate(vocab)}
    gt_vocab = []
    for g in scene.gt:
        if g.class_id not in index:
            raise ValueError(f"scene contains class {g.class_id} outside the vocabulary")
        gt_vocab.append(GtInstance(g.mask, index[g.class_id], g.is_thing))
    G = sv.build_match_matrix(gt_vocab, scene.patches, boxes, tau)
    sem_rows, present = sv.semantic_union_rows(gt_vocab, scene.patches, len(vocab), boxes, tau)
    return SceneStatics(
        feats=feats, pos=pos, boxes=boxes, gt_vocab=gt_vocab,
        match_matrix=G, semantic_rows=sem_rows, present=present,
        image_hw=(scene.height, scene.width),
    )


# --- forward -----------------------------------------------------------------

def denoising_queries(
    store: ParameterStore,
    plan: DenoisePlan,
    class_embs: np.ndarray,
    image_hw: tuple[int, int],
    dim: int,
) -> Tensor:
    """Query vectors for the denoising rows: the semantic projection of the
    (possibly flipped) class embedding plus the jittered box position."""
    h, w = image_hw
    emb = class_embs[plan.query_classes]
    proj = ad.add(ad.matmul(Tensor(emb), store["dec.sem.w"]), store["dec.sem.b"])
    pos = np.stack([position_embedding(b, w, h, dim) for b in plan.boxes])
    return ad.add(proj, Tensor(pos))


def forward_scene(
    store: ParameterStore,
    scene: Scene,
    statics: SceneStatics,
    class_embs: np.ndarray,
    dims: ModelDims,
    flags: FeatureFlags,
    plan: DenoisePlan | None = None,
    affinity_threshold: float = 0.5,
) -> list[StageOutput]:
    enc = encode_patches(store, statics.feats, statics.pos, dims.stages, dims.heads)
    extra = None
    attn_mask = None
    if plan is not None and len(plan.boxes):
        extra = denoising_queries(store, plan, class_embs, statics.image_hw, dims.dim)
        n_real = class_embs.shape[0] + len(statics.boxes)
        attn_mask = sv.visibility_mask(n_real, len(plan.boxes))
    return decode(
        store, enc, statics.boxes, scene.image, class_embs,
        dims.stages, dims.heads, dims.roi_size,
        extra_queries=extra, self_attn_mask=attn_mask,
        use_dca=flags.dca, use_stacking=flags.stacking, use_qe=flags.qe,
        dca_threshold=affinity_threshold, qe_threshold=affinity_threshold,
    )


# --- loss ---------------------------------------------------------------------

def stage_targets(
    stage: StageOutput,
    statics: SceneStatics,
    n_classes: int,
    weights: LossWeights,
    plan: DenoisePlan | None,
    flags: FeatureFlags,
    affinity_threshold: float = 0.5,
) -> Targets:
    """Hungarian-matched targets for one stage (assignment is re-done per
    stage against that stage's own affinity and class scores)."""
    n_p = len(statics.boxes)
    gt = statics.gt_vocab
    cost = None
    if gt and n_p:
        aff = stage.affinity.values[n_classes:n_classes + n_p]
        cls = stage.cls.values[n_classes:n_classes + n_p]
        # an ablated mask term leaves the assignment cost as well as the loss
        match_w = weights.match
        if not (flags.use_mfl and flags.use_dice):
            match_w = replace(
                match_w,
                mask_focal=match_w.mask_focal if flags.use_mfl else 0.0,
                dice=match_w.dice if flags.use_dice else 0.0,
            )
        cost = sv.matching_cost(
            cls, aff, gt, statics.match_matrix, statics.boxes, statics.image_hw,
            match_w, weights.focal_alpha, weights.focal_gamma,
            affinity_threshold,
        )
    tgt = sv.build_targets(
        gt, n_classes, n_p, statics.match_matrix, statics.semantic_rows,
        statics.present, cost,
        self_affinity_negatives=flags.self_affinity_negatives,
    )
    if plan is not None and len(plan.boxes):
        tgt = sv.extend_targets(tgt, plan)
    return tgt


def scene_loss(
    store: ParameterStore,
    scene: Scene,
    statics: SceneStatics,
    class_embs: np.ndarray,
    dims: ModelDims,
    flags: FeatureFlags,
    weights: LossWeights,
    dn_rng: np.random.Generator | None = None,
    affinity_threshold: float = 0.5,
    box_jitter: float = 0.2,
    label_flip: float = 0.2,
) -> tuple[Tensor, sv.LossReport, list[StageOutput]]:
    """Full training loss of one scene. `dn_rng` drives denoising noise and
    must be provided when denoising is enabled."""
    plan = None
    if flags.denoising and statics.gt_vocab:
        if dn_rng is None:
            raise ValueError("denoising requires a random generator")
        plan = sv.denoising_plan(
            statics.gt_vocab, statics.match_matrix, class_embs.shape[0],
            dn_rng, statics.image_hw,
            box_jitter=box_jitter, label_flip=label_flip,
        )
    outs = forward_scene(
        store, scene, statics, class_embs, dims, flags, plan, affinity_threshold
    )
    n_classes = class_embs.shape[0]
    targets = [
        stage_targets(st, statics, n_classes, weights, plan, flags, affinity_threshold)
        for st in outs
    ]
    total, report = sv.total_loss(
        [st.cls for st in outs], [st.affinity for st in outs], targets,
        w_cls=weights.cls, w_mfl=weights.mask_focal, w_dice=weights.dice,
        use_mfl=flags.use_mfl, use_dice=flags.use_dice,
        alpha=weights.focal_alpha, gamma=weights.focal_gamma,
    )
    return total, report, outs
