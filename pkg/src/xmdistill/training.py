"""Trainers: 2D supervised pretraining, contrastive distillation, and
feature+semantic distillation, plus the hard-pseudo-label baseline.

Each trainer owns its models for the duration of a run, walks the scene
list in a seeded order, and is bitwise reproducible given (seed, config,
dataset). Teacher outputs are constant under a frozen teacher, so they are
cached per scene up front.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import sparse as sp
from .autodiff import Tensor
from .errors import NumericError
from .geometry import CorrespondenceMap, joint_visible_mask, nearest_pixels, project
from .losses import (cross_entropy, kl_rows, loss_infonce, lovasz_softmax)
from .models import (ModelBundle, ModelConfig, ROLE_ADAPTER, ROLE_BACKBONE2D,
                     ROLE_CLASSIFIER, ROLE_EXTRACTOR3D, ROLE_HEAD2D,
                     SharedClassifier)
from .optim import cosine_lr, sgd_step, zero_grad
from .superpixel import group_superpoints, pool_pixels, pool_points, slic

_SHUFFLE_TAGS = {"pretrain2d": 11, "udakd": 12, "fskd": 13, "pseudolabel": 14,
                 "finetune": 15, "pairs": 16, "pixels": 17, "augment": 18}


@dataclass
class DistillConfig:
    temperature: float = 0.07
    loss_weight_feat: float = 1.0
    loss_weight_sem: float = 0.1
    lr_udakd: float = 0.5
    lr_fskd_extractor: float = 0.05
    lr_fskd_adapter: float = 5e-5
    lr_pretrain: float = 0.012
    lr_finetune: float = 0.05
    momentum: float = 0.9
    damping: float = 0.1
    weight_decay: float = 1e-4
    pretrain_epochs: int = 20
    warmup_steps: int = 30
    udakd_epochs: int = 8
    fskd_epochs: int = 36
    finetune_epochs: int = 12
    batch_size: int = 4
    pretrain_batch: int = 4
    pixel_cap: int = 2048        # labeled pixels per image per pretrain step
    superpixel_cap: int = 150
    slic_compactness: float = 10.0
    slic_iters: int = 10
    pair_cap: int = 1024         # point/pixel pairs per batch without superpixels
    seed: int = 0
    kl_direction: str = "student_first"
    augment_rotate: bool = True   # dihedral cloud augmentation on alternating epochs
    use_superpixels: bool = True
    use_da: bool = True
    use_soft_labels: bool = True
    use_feat_kd: bool = True
    use_sem_kd: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.loss_weight_feat < 0 or self.loss_weight_sem < 0:
            raise ValueError("loss weights must be non-negative")
        if not (self.use_feat_kd or self.use_sem_kd):
            raise ValueError("at least one of feature/semantic distillation must stay on")

    def to_dict(self) -> dict:
        return asdict(self)


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _SHUFFLE_TAGS[phase], epoch]))


@dataclass
class ScenePack:
    """Per-scene derived state reused across epochs."""

    sample: object
    st: sp.SparseTensor3D          # voxelized template (float32 features)
    vmap: sp.VoxelMap
    corr: CorrespondenceMap        # valid == jointly visible (depth-gated)
    vis: np.ndarray
    partition: object = None
    groups: object = None
    teacher: dict = field(default_factory=dict)


def build_scene_pack(sample, model_cfg: ModelConfig, with_superpixels: bool = False,
                     slic_k: int = 150, slic_m: float = 10.0,
                     slic_iters: int = 10) -> ScenePack:
    st, vmap = sp.voxelize(sample.cloud.astype(model_cfg.np_dtype()),
                           model_cfg.voxel_size)
    corr = project(sample.cloud[:, :3].astype(np.float64), sample.cam)
    vis = joint_visible_mask(corr, sample.depth_px)
    gated = np.zeros_like(corr.valid)
    gated[vis] = True
    corr = CorrespondenceMap(corr.pixels, corr.depth, gated, corr.width, corr.height)
    pack = ScenePack(sample, st, vmap, corr, vis)
    if with_superpixels:
        pack.partition = slic(sample.image.astype(np.float64), slic_k, slic_m, slic_iters)
        pack.groups = group_superpoints(pack.partition, corr)
    return pack


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError("%s became non-finite" % what)


def _log_line(log_file, record: dict) -> None:
    if log_file is not None:
        log_file.write(json.dumps(record, sort_keys=True) + "\n")


def mse_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(pred, Tensor(target))
    return ad.tmean(ad.mul(diff, diff))


# -- 2D supervised pretraining ----------------------------------------------


def pretrain_2d(samples, extractor2d, classifier: SharedClassifier,
                cfg: DistillConfig, log_path: str = None,
                start_epoch: int = 0, epoch_end=None) -> dict:
    """CE + Lovasz training of the full 2D network on per-pixel labels."""
    params = extractor2d.parameters() + classifier.parameters()
    n = len(samples)
    batches_per_epoch = (n + cfg.pretrain_batch - 1) // cfg.pretrain_batch
    total_steps = cfg.pretrain_epochs * batches_per_epoch
    history = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.pretrain_epochs):
            order = _epoch_rng(cfg.seed, "pretrain2d", epoch).permutation(n)
            pix_rng = _epoch_rng(cfg.seed, "pixels", epoch)
            epoch_loss = 0.0
            for b in range(batches_per_epoch):
                idx = order[b * cfg.pretrain_batch:(b + 1) * cfg.pretrain_batch]
                images = np.stack([samples[i].image for i in idx])
                feats = extractor2d.forward(Tensor(images.astype(np.float32)))
                bsz, c, h, w = feats.shape
                rows = ad.reshape(ad.transpose(feats, (0, 2, 3, 1)), (bsz * h * w, c))
                labels = np.concatenate(
                    [samples[i].labels_px.reshape(-1) for i in idx])
                if cfg.pixel_cap and cfg.pixel_cap < h * w:
                    keep = np.concatenate([
                        pix_rng.choice(h * w, size=cfg.pixel_cap, replace=False) + k * h * w
                        for k in range(bsz)])
                    rows = ad.gather_rows(rows, keep)
                    labels = labels[keep]
                logits = classifier.logits(rows)
                probs = ad.softmax(logits, axis=1)
                loss = ad.add(cross_entropy(logits, labels),
                              lovasz_softmax(probs, labels))
                step = epoch * batches_per_epoch + b
                lr = cosine_lr(step, total_steps, cfg.lr_pretrain) \
                    * min(1.0, (step + 1) / max(1, cfg.warmup_steps))
                zero_grad(params)
                loss.backward()
                sgd_step(params, lr, cfg.momentum, cfg.damping, cfg.weight_decay)
                val = loss.item()
                _check_finite(val, "2D pretraining loss")
                epoch_loss += val
                _log_line(log_file, {"phase": "pretrain2d", "epoch": epoch,
                                     "step": step, "loss": val, "lr": lr})
            history.append(epoch_loss / batches_per_epoch)
            if epoch_end is not None:
                epoch_end(epoch)
    finally:
        if log_file:
            log_file.close()
    return {"epoch_loss": history}


def precompute_teacher(packs, extractor2d, classifier: SharedClassifier) -> None:
    """Cache frozen-teacher features and soft labels at visible points."""
    for pack in packs:
        if "feat_vis" in pack.teacher:
            continue
        feats = extractor2d.forward(Tensor(pack.sample.image.astype(np.float32)))
        probs_map = classifier.forward_map(feats)
        pix = nearest_pixels(pack.corr)[pack.vis]
        flat = pix[:, 1] * pack.corr.width + pix[:, 0]
        c = feats.shape[0]
        f_flat = feats.data.reshape(c, -1)
        s_flat = probs_map.data.reshape(classifier.num_classes, -1)
        pack.teacher["feat_vis"] = np.ascontiguousarray(f_flat[:, flat].T)
        pack.teacher["soft_vis"] = np.ascontiguousarray(s_flat[:, flat].T)
        pack.teacher["hard_vis"] = pack.teacher["soft_vis"].argmax(axis=1)


def precompute_backbone(packs, extractor2d) -> None:
    """Cache the frozen backbone activations used by the trainable head."""
    for pack in packs:
        if "backbone" not in pack.teacher:
            out = extractor2d.backbone(
                Tensor(pack.sample.image[None].astype(np.float32)))
            pack.teacher["backbone"] = out.data


# -- contrastive pretraining of the 3D extractor ------------------------------


def train_udakd(packs, bundle: ModelBundle, cfg: DistillConfig,
                log_path: str = None, start_epoch: int = 0,
                epoch_end=None) -> dict:
    """Superpixel-pooled InfoNCE distillation; the 2D backbone stays frozen."""
    bundle.extractor2d.set_trainable(False, ROLE_BACKBONE2D)
    bundle.extractor2d.set_trainable(True, ROLE_HEAD2D)
    trainable = (bundle.extractor2d.parameters_by_role(ROLE_HEAD2D)
                 + bundle.extractor3d.parameters()
                 + bundle.adapter.parameters())
    precompute_backbone(packs, bundle.extractor2d)
    n = len(packs)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.udakd_epochs * batches_per_epoch
    history, skipped = [], 0
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.udakd_epochs):
            order = _epoch_rng(cfg.seed, "udakd", epoch).permutation(n)
            pair_rng = _epoch_rng(cfg.seed, "pairs", epoch)
            aug = (_epoch_rng(cfg.seed, "augment", epoch)
                   if cfg.augment_rotate and epoch % 2 == 1 else None)
            epoch_loss, epoch_pairs = 0.0, 0
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                f_rows, g_rows = [], []
                for i in idx:
                    pack = packs[i]
                    feats = bundle.extractor2d.head(
                        Tensor(pack.teacher["backbone"]),
                        pack.sample.image.shape[1:])
                    feats = ad.reshape(feats, feats.shape[1:])
                    _, st_out, vmap = _forward_3d(bundle, pack, aug)
                    pseudo = bundle.adapter.forward(st_out, vmap)
                    if cfg.use_superpixels:
                        ids, g_pool = pool_points(pseudo, pack.groups)
                        if ids.size == 0:
                            continue
                        f_pool = pool_pixels(feats, pack.partition)
                        f_rows.append(ad.gather_rows(f_pool, ids))
                        g_rows.append(g_pool)
                    else:
                        vis = pack.vis
                        if vis.size == 0:
                            continue
                        if vis.size > cfg.pair_cap // max(1, len(idx)):
                            vis = np.sort(pair_rng.choice(
                                vis, size=cfg.pair_cap // max(1, len(idx)),
                                replace=False))
                        pix = nearest_pixels(pack.corr)[vis]
                        flat = pix[:, 1] * pack.corr.width + pix[:, 0]
                        c = feats.shape[0]
                        fmap = ad.reshape(feats, (c, feats.shape[1] * feats.shape[2]))
                        f_rows.append(ad.transpose(ad.gather_cols(fmap, flat)))
                        g_rows.append(ad.gather_rows(pseudo, vis))
                if not f_rows or sum(t.shape[0] for t in f_rows) < 2:
                    skipped += 1
                    _log_line(log_file, {"phase": "udakd", "epoch": epoch,
                                         "event": "batch_skipped"})
                    continue
                f_all = ad.l2_normalize(ad.concat(f_rows, axis=0), axis=1)
                g_all = ad.l2_normalize(ad.concat(g_rows, axis=0), axis=1)
                # optimize the per-pair mean so the step size does not scale
                # with the number of pooled pairs in the batch
                pairs = f_all.shape[0]
                loss = loss_infonce(f_all, g_all, cfg.temperature) * (1.0 / pairs)
                step = epoch * batches_per_epoch + b
                ramp = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
                lr = cosine_lr(step, total_steps, cfg.lr_udakd) * ramp
                zero_grad(trainable)
                loss.backward()
                sgd_step(trainable, lr, cfg.momentum, cfg.damping, cfg.weight_decay)
                val = loss.item()
                _check_finite(val, "UDAKD loss")
                epoch_loss += val
                epoch_pairs += 1
                _log_line(log_file, {"phase": "udakd", "epoch": epoch, "step": step,
                                     "loss": val, "pairs": int(f_all.shape[0]),
                                     "lr": lr})
            history.append(epoch_loss / max(1, epoch_pairs))
            if epoch_end is not None:
                epoch_end(epoch)
    finally:
        if log_file:
            log_file.close()
    return {"epoch_loss_per_pair": history, "skipped_batches": skipped}


def _forward_3d(bundle: ModelBundle, pack: ScenePack, aug_rng=None):
    """3D forward on the cached voxel template, or on an augmented recloud.

    Augmentation rotates the cloud around z and may mirror y before
    voxelization. Point order is untouched, so per-point teacher targets,
    visibility indices and labels stay aligned; the height/intensity input
    features are invariant under the transform.
    """
    if aug_rng is None:
        st_in = pack.st.with_features(Tensor(pack.st.features.data))
        out = bundle.extractor3d.forward_sparse(st_in)
        return sp.devoxelize(out, pack.vmap), out, pack.vmap
    # dihedral transforms only: the synthetic world is axis-aligned, and
    # quarter turns are exact grid symmetries, so the network learns grid
    # orientation invariance without having to fit oblique geometry
    quarter = int(aug_rng.integers(4))
    flip = aug_rng.uniform() < 0.5
    cloud = pack.sample.cloud.astype(np.float32).copy()
    x, y = cloud[:, 0].copy(), cloud[:, 1].copy()
    if flip:
        y = -y
    c = np.float32((1, 0, -1, 0)[quarter])
    s = np.float32((0, 1, 0, -1)[quarter])
    cloud[:, 0] = c * x - s * y
    cloud[:, 1] = s * x + c * y
    st, vmap = sp.voxelize(cloud, pack.vmap.voxel_size)
    out = bundle.extractor3d.forward_sparse(st)
    return sp.devoxelize(out, vmap), out, vmap


# -- feature + semantic distillation ------------------------------------------


def train_fskd(packs, bundle: ModelBundle, cfg: DistillConfig,
               log_path: str = None, start_epoch: int = 0,
               epoch_end=None) -> dict:
    """Distill the frozen 2D network into extractor+adapter at visible points.

    Ablation switches: use_soft_labels=False swaps the KL term for CE
    against hard argmax pseudo-labels; use_feat_kd / use_sem_kd drop a
    term; the adapter may be a linear lift when the bundle was built with
    use_da=False.
    """
    bundle.extractor2d.set_trainable(False)
    bundle.classifier.set_trainable(False)
    precompute_teacher(packs, bundle.extractor2d, bundle.classifier)
    h_params = bundle.extractor3d.parameters()
    m_params = bundle.adapter.parameters()
    n = len(packs)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.fskd_epochs * batches_per_epoch
    hist_feat, hist_sem, skipped = [], [], 0
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.fskd_epochs):
            order = _epoch_rng(cfg.seed, "fskd", epoch).permutation(n)
            aug = (_epoch_rng(cfg.seed, "augment", epoch)
                   if cfg.augment_rotate and epoch % 2 == 1 else None)
            ep_feat, ep_sem, ep_batches = 0.0, 0.0, 0
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                feat_terms, sem_terms = [], []
                for i in idx:
                    pack = packs[i]
                    if pack.vis.size == 0:
                        continue
                    _, st_out, vmap = _forward_3d(bundle, pack, aug)
                    pseudo = bundle.adapter.forward(st_out, vmap)
                    pseudo_vis = ad.gather_rows(pseudo, pack.vis)
                    if cfg.use_feat_kd:
                        feat_terms.append(mse_rows(pseudo_vis, pack.teacher["feat_vis"]))
                    if cfg.use_sem_kd:
                        if cfg.use_soft_labels:
                            t_probs = bundle.classifier.forward(pseudo_vis)
                            s_probs = Tensor(pack.teacher["soft_vis"])
                            if cfg.kl_direction == "student_first":
                                sem_terms.append(kl_rows(t_probs, s_probs))
                            else:
                                sem_terms.append(kl_rows(s_probs, t_probs))
                        else:
                            logits = bundle.classifier.logits(pseudo_vis)
                            sem_terms.append(cross_entropy(
                                logits, pack.teacher["hard_vis"]))
                if not feat_terms and not sem_terms:
                    skipped += 1
                    _log_line(log_file, {"phase": "fskd", "epoch": epoch,
                                         "event": "batch_skipped"})
                    continue
                feat_loss = sem_loss = None
                loss = None
                if feat_terms:
                    feat_loss = _mean_terms(feat_terms)
                    loss = feat_loss * cfg.loss_weight_feat
                if sem_terms:
                    sem_loss = _mean_terms(sem_terms)
                    term = sem_loss * cfg.loss_weight_sem
                    loss = term if loss is None else ad.add(loss, term)
                step = epoch * batches_per_epoch + b
                ramp = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
                lr_h = cosine_lr(step, total_steps, cfg.lr_fskd_extractor) * ramp
                lr_m = cosine_lr(step, total_steps, cfg.lr_fskd_adapter) * ramp
                zero_grad(h_params + m_params)
                loss.backward()
                sgd_step(h_params, lr_h, cfg.momentum, cfg.damping, cfg.weight_decay)
                sgd_step(m_params, lr_m, cfg.momentum, cfg.damping, cfg.weight_decay)
                fval = feat_loss.item() if feat_loss is not None else 0.0
                sval = sem_loss.item() if sem_loss is not None else 0.0
                _check_finite(fval + sval, "FSKD loss")
                ep_feat += fval
                ep_sem += sval
                ep_batches += 1
                _log_line(log_file, {"phase": "fskd", "epoch": epoch, "step": step,
                                     "loss_feat": fval, "loss_sem": sval,
                                     "lr_extractor": lr_h, "lr_adapter": lr_m})
            hist_feat.append(ep_feat / max(1, ep_batches))
            hist_sem.append(ep_sem / max(1, ep_batches))
            if epoch_end is not None:
                epoch_end(epoch)
    finally:
        if log_file:
            log_file.close()
    return {"epoch_feat": hist_feat, "epoch_sem": hist_sem,
            "skipped_batches": skipped}


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total * (1.0 / len(terms))


def train_classifier_frozen_backbone(samples, extractor2d,
                                     classifier: SharedClassifier,
                                     cfg: DistillConfig,
                                     label_attr: str = "labels_px_refined",
                                     epochs: int = None) -> dict:
    """Fit a new per-pixel classifier on top of a frozen 2D extractor.

    Used by the classifier-swap experiment: the extractor keeps the feature
    space the 3D network was aligned to, while the classifier learns the
    refined label set from images alone.
    """
    extractor2d.set_trainable(False)
    params = classifier.parameters()
    n = len(samples)
    epochs = epochs if epochs is not None else cfg.pretrain_epochs
    # frozen features are constants; compute them once
    feat_rows, label_rows = [], []
    for s in samples:
        feats = extractor2d.forward(Tensor(s.image.astype(np.float32)))
        c = feats.shape[0]
        feat_rows.append(np.ascontiguousarray(feats.data.reshape(c, -1).T))
        label_rows.append(getattr(s, label_attr).reshape(-1))
    batches_per_epoch = (n + cfg.pretrain_batch - 1) // cfg.pretrain_batch
    total_steps = epochs * batches_per_epoch
    history = []
    for epoch in range(epochs):
        order = _epoch_rng(cfg.seed, "pretrain2d", epoch).permutation(n)
        pix_rng = _epoch_rng(cfg.seed, "pixels", epoch)
        ep_loss = 0.0
        for b in range(batches_per_epoch):
            idx = order[b * cfg.pretrain_batch:(b + 1) * cfg.pretrain_batch]
            rows, labels = [], []
            for i in idx:
                hw = feat_rows[i].shape[0]
                keep = (pix_rng.choice(hw, size=min(cfg.pixel_cap, hw), replace=False)
                        if cfg.pixel_cap else np.arange(hw))
                rows.append(feat_rows[i][keep])
                labels.append(label_rows[i][keep])
            logits = classifier.logits(Tensor(np.concatenate(rows)))
            labels = np.concatenate(labels)
            loss = ad.add(cross_entropy(logits, labels),
                          lovasz_softmax(ad.softmax(logits, axis=1), labels))
            lr = cosine_lr(epoch * batches_per_epoch + b, total_steps, cfg.lr_pretrain)
            zero_grad(params)
            loss.backward()
            sgd_step(params, lr, cfg.momentum, cfg.damping, cfg.weight_decay)
            val = loss.item()
            _check_finite(val, "refined classifier loss")
            ep_loss += val
        history.append(ep_loss / batches_per_epoch)
    return {"epoch_loss": history}


# -- hard pseudo-label baseline ------------------------------------------------


def train_pseudolabel(packs, bundle: ModelBundle, classifier3d: SharedClassifier,
                      cfg: DistillConfig, log_path: str = None) -> dict:
    """Train a fresh classifier on raw 3D features against argmax 2D labels."""
    bundle.extractor2d.set_trainable(False)
    bundle.classifier.set_trainable(False)
    precompute_teacher(packs, bundle.extractor2d, bundle.classifier)
    params = bundle.extractor3d.parameters() + classifier3d.parameters()
    n = len(packs)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.fskd_epochs * batches_per_epoch
    history, skipped = [], 0
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.fskd_epochs):
            order = _epoch_rng(cfg.seed, "pseudolabel", epoch).permutation(n)
            aug = (_epoch_rng(cfg.seed, "augment", epoch)
                   if cfg.augment_rotate and epoch % 2 == 1 else None)
            ep_loss, ep_batches = 0.0, 0
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                terms = []
                for i in idx:
                    pack = packs[i]
                    if pack.vis.size == 0:
                        continue
                    point_feats, _, _ = _forward_3d(bundle, pack, aug)
                    logits = classifier3d.logits(
                        ad.gather_rows(point_feats, pack.vis))
                    terms.append(cross_entropy(logits, pack.teacher["hard_vis"]))
                if not terms:
                    skipped += 1
                    continue
                loss = _mean_terms(terms)
                step = epoch * batches_per_epoch + b
                lr = cosine_lr(step, total_steps, cfg.lr_fskd_extractor)
                zero_grad(params)
                loss.backward()
                sgd_step(params, lr, cfg.momentum, cfg.damping, cfg.weight_decay)
                val = loss.item()
                _check_finite(val, "pseudo-label loss")
                ep_loss += val
                ep_batches += 1
                _log_line(log_file, {"phase": "pseudolabel", "epoch": epoch,
                                     "step": step, "loss": val, "lr": lr})
            history.append(ep_loss / max(1, ep_batches))
    finally:
        if log_file:
            log_file.close()
    return {"epoch_loss": history, "skipped_batches": skipped}
