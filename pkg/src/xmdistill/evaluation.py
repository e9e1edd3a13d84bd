"""Metrics and experiment protocols: mIoU, fine-tuning, annotation sweep,
zero-shot scoring, the classifier-swap evaluation, feature export and the
ablation grids."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from . import sparse as sp
from .autodiff import Tensor
from .errors import DataError
from .losses import cross_entropy
from .models import Extractor3D, ModelBundle, ModelConfig, SharedClassifier
from .optim import cosine_lr, sgd_step, zero_grad
from .training import (DistillConfig, ScenePack, _epoch_rng, _forward_3d,
                       _mean_terms, build_scene_pack, train_fskd, train_udakd)


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DataError("prediction/label shape mismatch")
    if preds.size and (min(preds.min(), labels.min()) < 0
                       or max(preds.max(), labels.max()) >= num_classes):
        raise DataError("class ids out of range [0, %d)" % num_classes)
    idx = labels * num_classes + preds
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(preds: np.ndarray, labels: np.ndarray, num_classes: int):
    """(mean IoU, per-class IoU) with classes absent from both sides excluded
    (NaN in the per-class vector)."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = np.full(num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    return float(np.nanmean(per_class)) if present.any() else 0.0, per_class


def majority_miou(labels_list, num_classes: int):
    """mIoU of the predict-the-most-frequent-class baseline on point labels."""
    all_labels = np.concatenate(labels_list)
    majority = int(np.bincount(all_labels, minlength=num_classes).argmax())
    preds = np.full_like(all_labels, majority)
    return miou(preds, all_labels, num_classes)


# -- composed 3D predictors ----------------------------------------------------


def adapted_predictor(bundle: ModelBundle, classifier: SharedClassifier = None):
    """pack -> per-point class probabilities through extractor, adapter, classifier."""
    clf = classifier if classifier is not None else bundle.classifier

    def predict(pack: ScenePack) -> np.ndarray:
        _, st_out, vmap = _forward_3d(bundle, pack)
        pseudo = bundle.adapter.forward(st_out, vmap)
        return clf.forward(pseudo).data

    return predict


def raw_feature_predictor(extractor3d: Extractor3D, classifier: SharedClassifier):
    """pack -> probabilities of a classifier reading raw extractor features."""

    def predict(pack: ScenePack) -> np.ndarray:
        st_in = pack.st.with_features(Tensor(pack.st.features.data))
        out = extractor3d.forward_sparse(st_in)
        feats = sp.devoxelize(out, pack.vmap)
        return classifier.forward(feats).data

    return predict


def zero_shot_eval(predict, packs, num_classes: int, label_key: str = "labels_pt"):
    """mIoU of argmax predictions over all points of every validation cloud."""
    preds, labels = [], []
    for pack in packs:
        probs = predict(pack)
        preds.append(probs.argmax(axis=1))
        labels.append(getattr(pack.sample, label_key))
    mean, per_class = miou(np.concatenate(preds), np.concatenate(labels), num_classes)
    return {"miou": mean, "per_class": per_class.tolist()}


# -- fine-tuning with 3D labels -------------------------------------------------


def finetune(train_packs, val_packs, model_cfg: ModelConfig, cfg: DistillConfig,
             label_fraction: float, init_params: dict = None):
    """Fine-tune a (possibly pretrained) extractor with a fresh classifier.

    label_fraction selects whole scenes by seed order; the same schedule is
    used for every initialization so rows stay comparable.
    """
    if not 0 < label_fraction <= 1:
        raise ValueError("label fraction must be in (0, 1]")
    n_sel = int(label_fraction * len(train_packs))
    if n_sel == 0:
        raise ValueError("label fraction %g selects zero scenes" % label_fraction)
    selected = train_packs[:n_sel]

    seeds = np.random.SeedSequence([cfg.seed, 21]).spawn(2)
    extractor = Extractor3D(model_cfg, np.random.default_rng(seeds[0]))
    if init_params is not None:
        for name, p in extractor.named_parameters():
            p.data[...] = init_params[name]
    classifier = SharedClassifier(model_cfg.point_channels, model_cfg.num_classes,
                                  model_cfg.classifier_hidden,
                                  np.random.default_rng(seeds[1]),
                                  dtype=model_cfg.np_dtype())
    params = extractor.parameters() + classifier.parameters()
    batches = (len(selected) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.finetune_epochs * batches
    for epoch in range(cfg.finetune_epochs):
        order = _epoch_rng(cfg.seed, "finetune", epoch).permutation(len(selected))
        aug = (_epoch_rng(cfg.seed, "augment", epoch)
               if cfg.augment_rotate and epoch % 2 == 1 else None)
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            terms = []
            for i in idx:
                pack = selected[i]
                shim = _FinetuneShim(extractor)
                feats, _, _ = _forward_3d(shim, pack, aug)
                terms.append(cross_entropy(classifier.logits(feats),
                                           pack.sample.labels_pt))
            if not terms:
                continue
            loss = _mean_terms(terms)
            lr = cosine_lr(epoch * batches + b, total_steps, cfg.lr_finetune)
            zero_grad(params)
            loss.backward()
            sgd_step(params, lr, cfg.momentum, cfg.damping, cfg.weight_decay)
    result = zero_shot_eval(raw_feature_predictor(extractor, classifier),
                            val_packs, model_cfg.num_classes)
    return result, extractor, classifier


def annotation_sweep(train_packs, val_packs, model_cfg: ModelConfig,
                     cfg: DistillConfig, fractions, init_params: dict = None,
                     zero_shot_predict=None):
    """One mIoU row per label fraction; fraction 0 scores the distilled
    network without fine-tuning (requires zero_shot_predict)."""
    if list(fractions) != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    rows = []
    for frac in fractions:
        if frac == 0:
            if zero_shot_predict is None:
                raise ValueError("fraction 0 needs a zero-shot predictor")
            res = zero_shot_eval(zero_shot_predict, val_packs, model_cfg.num_classes)
        else:
            res, _, _ = finetune(train_packs, val_packs, model_cfg, cfg, frac,
                                 init_params)
        rows.append({"fraction": frac, "miou": res["miou"],
                     "per_class": res["per_class"]})
    return rows


# -- zero-shot domain adaptation ------------------------------------------------


def zero_shot_da_eval(bundle: ModelBundle, refined_classifier: SharedClassifier,
                      val_packs, num_refined: int):
    """Score the swapped network on refined labels, next to its 2D teacher.

    The 3D path is extractor -> adapter -> refined classifier with zero 3D
    parameter updates; the 2D network's own per-class IoU on refined pixel
    labels is reported for comparison.
    """
    if refined_classifier.num_classes != num_refined:
        raise DataError("refined classifier emits %d classes, expected %d"
                        % (refined_classifier.num_classes, num_refined))
    res3d = zero_shot_eval(adapted_predictor(bundle, refined_classifier),
                           val_packs, num_refined, label_key="labels_pt_refined")
    preds, labels = [], []
    for pack in val_packs:
        feats = bundle.extractor2d.forward(Tensor(pack.sample.image.astype(np.float32)))
        probs = refined_classifier.forward_map(feats)
        preds.append(probs.data.argmax(axis=0).reshape(-1))
        labels.append(pack.sample.labels_px_refined.reshape(-1))
    mean2d, per2d = miou(np.concatenate(preds), np.concatenate(labels), num_refined)
    return {"miou_3d": res3d["miou"], "per_class_3d": res3d["per_class"],
            "miou_2d": mean2d, "per_class_2d": per2d.tolist()}


# -- feature export ---------------------------------------------------------------


def export_features(extractor3d: Extractor3D, packs, path_prefix: str) -> dict:
    """Per-point features (.f32) and labels (.i32) for external embedding tools."""
    feats, labels = [], []
    for pack in packs:
        st_in = pack.st.with_features(Tensor(pack.st.features.data))
        out = extractor3d.forward_sparse(st_in)
        feats.append(sp.devoxelize(out, pack.vmap).data)
        labels.append(pack.sample.labels_pt)
    feats = np.concatenate(feats).astype("<f4")
    labels = np.concatenate(labels).astype("<i4")
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    with open(path_prefix + ".f32", "wb") as fh:
        fh.write(feats.tobytes())
    with open(path_prefix + ".i32", "wb") as fh:
        fh.write(labels.tobytes())
    return {"rows": int(feats.shape[0]), "dims": int(feats.shape[1])}


# -- ablation grids ---------------------------------------------------------------


class _FinetuneShim:
    """Adapts a bare extractor to the trainer forward helper."""

    def __init__(self, extractor3d):
        self.extractor3d = extractor3d


def snapshot_params(model) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore_params(model, snap: dict) -> None:
    for name, p in model.named_parameters():
        p.data[...] = snap[name]


def ablation_suite(train_packs, val_packs, model_cfg: ModelConfig,
                   cfg: DistillConfig, teacher_params: dict,
                   udakd_packs=None) -> dict:
    """Both ablation grids on a fixed seed and shared data.

    UDAKD rows (superpixels x adapter) report the final per-pair InfoNCE;
    the FSKD rows report zero-shot mIoU with one switch dropped at a time.
    """
    udakd_rows = []
    u_packs = udakd_packs if udakd_packs is not None else train_packs
    for use_sp, use_da in ((True, True), (False, True), (True, False), (False, False)):
        ucfg = DistillConfig(**{**cfg.to_dict(), "use_superpixels": use_sp,
                                "use_da": use_da})
        bundle = ModelBundle.create(model_cfg, cfg.seed, use_da=use_da)
        restore_params(bundle.extractor2d, teacher_params["extractor2d"])
        restore_params(bundle.classifier, teacher_params["classifier"])
        hist = train_udakd(u_packs, bundle, ucfg)
        udakd_rows.append({"superpixels": use_sp, "da": use_da,
                           "final_infonce_per_pair": hist["epoch_loss_per_pair"][-1]})

    fskd_rows = []
    drops = [("full", {}),
             ("no_soft_labels", {"use_soft_labels": False}),
             ("no_feature_kd", {"use_feat_kd": False}),
             ("no_semantic_kd", {"use_sem_kd": False}),
             ("no_da", {"use_da": False})]
    for name, flags in drops:
        fcfg = DistillConfig(**{**cfg.to_dict(), **flags})
        bundle = ModelBundle.create(model_cfg, cfg.seed, use_da=fcfg.use_da)
        restore_params(bundle.extractor2d, teacher_params["extractor2d"])
        restore_params(bundle.classifier, teacher_params["classifier"])
        train_fskd(train_packs, bundle, fcfg)
        res = zero_shot_eval(adapted_predictor(bundle), val_packs,
                             model_cfg.num_classes)
        fskd_rows.append({"variant": name, "miou": res["miou"],
                          "per_class": res["per_class"]})
    return {"udakd": udakd_rows, "fskd": fskd_rows}
