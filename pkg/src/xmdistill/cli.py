"""Command-line entry point: scenegen -> train -> eval, config-driven.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
failure (NaN/Inf loss). Every output file embeds (config hash, seed,
version string). XMD_THREADS caps worker processes where a stage is
parallel (scene generation).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import VERSION_STRING
from .config import ExperimentConfig, apply_overrides
from .errors import ConfigError, MissingArtifactError, NumericError
from .evaluation import (ablation_suite, adapted_predictor, annotation_sweep,
                         export_features, finetune, majority_miou,
                         raw_feature_predictor, snapshot_params, zero_shot_da_eval,
                         zero_shot_eval)
from .models import (ModelBundle, SharedClassifier, load_checkpoint,
                     load_optim_state, save_checkpoint, save_optim_state)
from .scenegen import NUM_REFINED, SceneSpec, generate_scene, load_dataset, save_sample
from .training import (DistillConfig, build_scene_pack, pretrain_2d,
                       train_classifier_frozen_backbone, train_fskd,
                       train_pseudolabel, train_udakd)

TRAIN_MODES = ("pretrain2d", "udakd", "fskd", "pseudolabel")
EVAL_PROTOCOLS = ("zeroshot", "finetune", "sweep", "ablation", "zsda", "export")


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.content_hash(), "seed": cfg.train.seed,
            "version": VERSION_STRING}


def _write_json(path: str, payload: dict, cfg: ExperimentConfig) -> None:
    payload = dict(payload)
    payload["provenance"] = _provenance(cfg)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_csv(path: str, header, rows, cfg: ExperimentConfig) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    prov = _provenance(cfg)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# config_hash=%s seed=%d version=%s"
                         % (prov["config_hash"], prov["seed"], prov["version"])])
        writer.writerow(header)
        writer.writerows(rows)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("XMD_THREADS", "1")))
    except ValueError:
        return 1


# -- scenegen ------------------------------------------------------------------


def _gen_one(args):
    spec_doc, seed, out_dir, name = args
    spec_doc = dict(spec_doc)
    spec_doc["elevation_range_deg"] = tuple(spec_doc["elevation_range_deg"])
    spec_doc["counts"] = {k: tuple(v) for k, v in spec_doc["counts"].items()}
    spec = SceneSpec(**spec_doc)
    save_sample(generate_scene(spec, seed), os.path.join(out_dir, name), spec)
    return name


def cmd_scenegen(cfg: ExperimentConfig, out_dir: str, force: bool) -> int:
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError("output dir %s is not empty (use --force)" % out_dir)
    os.makedirs(out_dir, exist_ok=True)
    spec = cfg.scene
    seed0 = cfg.scene_seed0
    jobs = []
    splits = {}
    for split, count, base in (("train", cfg.num_train_scenes, seed0),
                               ("val", cfg.num_val_scenes, seed0 + cfg.num_train_scenes)):
        names = []
        for i in range(count):
            seed = base + i
            name = "%s_%05d" % (split, seed)
            names.append(name)
            jobs.append((spec.to_dict(), seed, out_dir, name))
        splits[split] = names
    workers = _worker_count()
    if workers > 1:
        import multiprocessing
        with multiprocessing.Pool(workers) as pool:
            pool.map(_gen_one, jobs)
    else:
        for job in jobs:
            _gen_one(job)
    manifest = {"spec": spec.to_dict(), "spec_hash": spec.content_hash(),
                "splits": splits, "seed0": seed0,
                "provenance": _provenance(cfg)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print("wrote %d train + %d val samples to %s"
          % (cfg.num_train_scenes, cfg.num_val_scenes, out_dir))
    return 0


# -- training ------------------------------------------------------------------


def _load_samples(cfg: ExperimentConfig, data_dir: str):
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifactError(
            "dataset manifest %s not found (run scenegen first)" % manifest_path)
    return load_dataset(data_dir)


def _bundle_paths(out_dir: str, mode: str) -> str:
    return os.path.join(out_dir, mode)


def _save_bundle(path: str, models, cfg: ExperimentConfig, extra=None) -> None:
    named, roles = [], {}
    for m in models:
        named.extend(m.named_parameters())
        roles.update(m.roles())
    meta = {"provenance": _provenance(cfg)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, named, roles, meta)


def _require_checkpoint(path: str, what: str) -> None:
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise MissingArtifactError(
            "%s checkpoint missing at %s (train it first)" % (what, path))


def _load_teacher(cfg: ExperimentConfig, out_dir: str, bundle: ModelBundle) -> None:
    path = _bundle_paths(out_dir, "pretrain2d")
    _require_checkpoint(path, "pretrain2d")
    named = (bundle.extractor2d.named_parameters()
             + bundle.classifier.named_parameters())
    load_checkpoint(path, named)


def cmd_train(cfg: ExperimentConfig, mode: str, data_dir: str, out_dir: str,
              resume: bool = False) -> int:
    manifest, samples = _load_samples(cfg, data_dir)
    train_samples = samples["train"]
    ck_dir = _bundle_paths(out_dir, mode)
    os.makedirs(ck_dir, exist_ok=True)
    log_path = os.path.join(ck_dir, "log.jsonl")
    if os.path.exists(log_path) and not resume:
        os.remove(log_path)
    tcfg = cfg.train

    def make_saver(named, roles):
        def saver(epoch):
            save_checkpoint(ck_dir, named, roles, {"provenance": _provenance(cfg)})
            save_optim_state(ck_dir, named, epoch + 1)
        return saver

    def maybe_resume(named):
        if not resume:
            return 0
        load_checkpoint(ck_dir, named)
        return load_optim_state(ck_dir, named)

    if mode == "pretrain2d":
        bundle = ModelBundle.create(cfg.model, tcfg.seed)
        named = (bundle.extractor2d.named_parameters()
                 + bundle.classifier.named_parameters())
        roles = {**bundle.extractor2d.roles(), **bundle.classifier.roles()}
        start = maybe_resume(named)
        hist = pretrain_2d(train_samples, bundle.extractor2d, bundle.classifier,
                           tcfg, log_path, start_epoch=start,
                           epoch_end=make_saver(named, roles))
        _save_bundle(ck_dir, [bundle.extractor2d, bundle.classifier], cfg,
                     {"history": hist})
    elif mode == "udakd":
        bundle = ModelBundle.create(cfg.model, tcfg.seed, use_da=tcfg.use_da)
        subset = train_samples[:cfg.udakd_scenes] if cfg.udakd_scenes else train_samples
        packs = [build_scene_pack(s, cfg.model, with_superpixels=tcfg.use_superpixels,
                                  slic_k=tcfg.superpixel_cap,
                                  slic_m=tcfg.slic_compactness,
                                  slic_iters=tcfg.slic_iters)
                 for s in subset]
        head_named = [(n, p) for n, p in bundle.extractor2d.named_parameters()
                      if bundle.extractor2d.roles()[n] == "head2d"]
        named = head_named + bundle.extractor3d.named_parameters() \
            + bundle.adapter.named_parameters()
        roles = {**bundle.extractor2d.roles(), **bundle.extractor3d.roles(),
                 **bundle.adapter.roles()}
        start = maybe_resume(named)
        hist = train_udakd(packs, bundle, tcfg, log_path, start_epoch=start,
                           epoch_end=make_saver(named, roles))
        save_checkpoint(ck_dir, named, roles,
                        {"provenance": _provenance(cfg), "history": hist})
    elif mode == "fskd":
        bundle = ModelBundle.create(cfg.model, tcfg.seed, use_da=tcfg.use_da)
        _load_teacher(cfg, out_dir, bundle)
        packs = [build_scene_pack(s, cfg.model) for s in train_samples]
        named = (bundle.extractor3d.named_parameters()
                 + bundle.adapter.named_parameters())
        roles = {**bundle.extractor3d.roles(), **bundle.adapter.roles()}
        start = maybe_resume(named)
        hist = train_fskd(packs, bundle, tcfg, log_path, start_epoch=start,
                          epoch_end=make_saver(named, roles))
        _save_bundle(ck_dir, bundle.models(), cfg, {"history": hist})
    elif mode == "pseudolabel":
        bundle = ModelBundle.create(cfg.model, tcfg.seed)
        _load_teacher(cfg, out_dir, bundle)
        classifier3d = SharedClassifier(
            cfg.model.point_channels, cfg.model.num_classes,
            cfg.model.classifier_hidden,
            np.random.default_rng(np.random.SeedSequence([tcfg.seed, 31])),
            dtype=cfg.model.np_dtype())
        packs = [build_scene_pack(s, cfg.model) for s in train_samples]
        hist = train_pseudolabel(packs, bundle, classifier3d, tcfg, log_path)
        _save_bundle(ck_dir, [bundle.extractor3d, classifier3d], cfg,
                     {"history": hist})
    else:
        raise ConfigError("unknown train mode %r" % mode)
    print("checkpoint written to %s" % ck_dir)
    return 0


# -- evaluation ------------------------------------------------------------------


def _load_fskd_bundle(cfg: ExperimentConfig, out_dir: str) -> ModelBundle:
    path = _bundle_paths(out_dir, "fskd")
    _require_checkpoint(path, "fskd")
    bundle = ModelBundle.create(cfg.model, cfg.train.seed, use_da=cfg.train.use_da)
    named = []
    for m in bundle.models():
        named.extend(m.named_parameters())
    load_checkpoint(path, named)
    return bundle


def cmd_eval(cfg: ExperimentConfig, protocol: str, data_dir: str, out_dir: str,
             fractions=None, init_mode: str = "fskd") -> int:
    manifest, samples = _load_samples(cfg, data_dir)
    val_packs = [build_scene_pack(s, cfg.model) for s in samples["val"]]
    tcfg = cfg.train

    if protocol == "zeroshot":
        bundle = _load_fskd_bundle(cfg, out_dir)
        res = zero_shot_eval(adapted_predictor(bundle), val_packs,
                             cfg.model.num_classes)
        maj, _ = majority_miou([p.sample.labels_pt for p in val_packs],
                               cfg.model.num_classes)
        res["majority_miou"] = maj
        _write_json(os.path.join(out_dir, "zeroshot_report.json"), res, cfg)
        _write_csv(os.path.join(out_dir, "zeroshot_report.csv"),
                   ["metric", "value"],
                   [["miou", res["miou"]], ["majority_miou", maj]]
                   + [["iou_class_%d" % i, v] for i, v in enumerate(res["per_class"])],
                   cfg)
        print("zero-shot mIoU %.4f (majority %.4f)" % (res["miou"], maj))
    elif protocol in ("finetune", "sweep"):
        train_packs = [build_scene_pack(s, cfg.model) for s in samples["train"]]
        init_params = None
        if init_mode != "random":
            path = _bundle_paths(out_dir, init_mode)
            _require_checkpoint(path, init_mode)
            bundle = ModelBundle.create(cfg.model, tcfg.seed, use_da=tcfg.use_da)
            load_checkpoint(path, bundle.extractor3d.named_parameters())
            init_params = {n: p.data.copy()
                           for n, p in bundle.extractor3d.named_parameters()}
        if protocol == "finetune":
            frac = fractions[0] if fractions else 1.0
            res, _, _ = finetune(train_packs, val_packs, cfg.model, tcfg, frac,
                                 init_params)
            res["fraction"] = frac
            res["init"] = init_mode
            _write_json(os.path.join(out_dir, "finetune_report.json"), res, cfg)
            print("finetune@%g mIoU %.4f (init=%s)" % (frac, res["miou"], init_mode))
        else:
            fracs = fractions if fractions else [0.1, 0.25, 1.0]
            zs = None
            if 0 in fracs or 0.0 in fracs:
                bundle = _load_fskd_bundle(cfg, out_dir)
                zs = adapted_predictor(bundle)
            rows = annotation_sweep(train_packs, val_packs, cfg.model, tcfg,
                                    fracs, init_params, zs)
            _write_csv(os.path.join(out_dir, "sweep_report.csv"),
                       ["fraction", "miou"],
                       [[r["fraction"], r["miou"]] for r in rows], cfg)
            _write_json(os.path.join(out_dir, "sweep_report.json"),
                        {"rows": rows}, cfg)
            print("sweep rows: %s" % [(r["fraction"], round(r["miou"], 4)) for r in rows])
    elif protocol == "ablation":
        teacher_path = _bundle_paths(out_dir, "pretrain2d")
        _require_checkpoint(teacher_path, "pretrain2d")
        probe = ModelBundle.create(cfg.model, tcfg.seed)
        load_checkpoint(teacher_path, probe.extractor2d.named_parameters()
                        + probe.classifier.named_parameters())
        teacher_params = {"extractor2d": snapshot_params(probe.extractor2d),
                          "classifier": snapshot_params(probe.classifier)}
        train_packs = [build_scene_pack(s, cfg.model) for s in samples["train"]]
        udakd_packs = [build_scene_pack(s, cfg.model, with_superpixels=True,
                                        slic_k=tcfg.superpixel_cap,
                                        slic_m=tcfg.slic_compactness,
                                        slic_iters=tcfg.slic_iters)
                       for s in samples["train"][:cfg.udakd_scenes]]
        report = ablation_suite(train_packs, val_packs, cfg.model, tcfg,
                                teacher_params, udakd_packs)
        _write_csv(os.path.join(out_dir, "ablation_udakd.csv"),
                   ["superpixels", "da", "final_infonce_per_pair"],
                   [[r["superpixels"], r["da"], r["final_infonce_per_pair"]]
                    for r in report["udakd"]], cfg)
        _write_csv(os.path.join(out_dir, "ablation_fskd.csv"),
                   ["variant", "miou"],
                   [[r["variant"], r["miou"]] for r in report["fskd"]], cfg)
        _write_json(os.path.join(out_dir, "ablation_report.json"), report, cfg)
        print("ablation grids written")
    elif protocol == "zsda":
        bundle = _load_fskd_bundle(cfg, out_dir)
        refined = SharedClassifier(
            cfg.model.image_channels, NUM_REFINED, cfg.model.classifier_hidden,
            np.random.default_rng(np.random.SeedSequence([tcfg.seed, 41])),
            dtype=cfg.model.np_dtype())
        train_classifier_frozen_backbone(samples["train"], bundle.extractor2d,
                                         refined, tcfg)
        res = zero_shot_da_eval(bundle, refined, val_packs, NUM_REFINED)
        _write_json(os.path.join(out_dir, "zsda_report.json"), res, cfg)
        _write_csv(os.path.join(out_dir, "zsda_report.csv"),
                   ["class", "iou_3d", "iou_2d"],
                   [[i, a, b] for i, (a, b) in
                    enumerate(zip(res["per_class_3d"], res["per_class_2d"]))], cfg)
        print("zero-shot DA: 3D mIoU %.4f, 2D mIoU %.4f"
              % (res["miou_3d"], res["miou_2d"]))
    elif protocol == "export":
        bundle = _load_fskd_bundle(cfg, out_dir)
        stats = export_features(bundle.extractor3d, val_packs,
                                os.path.join(out_dir, "features"))
        _write_json(os.path.join(out_dir, "export_report.json"), stats, cfg)
        print("exported %d rows x %d dims" % (stats["rows"], stats["dims"]))
    else:
        raise ConfigError("unknown eval protocol %r" % protocol)
    return 0


# -- argument plumbing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmdistill",
        description="crossmodal image-to-LiDAR distillation experiments")
    parser.add_argument("--config", help="TOML-style experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.seed=3")
    parser.add_argument("--seed", type=int, help="shortcut for train.seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("scenegen", help="generate the paired dataset")
    p_gen.add_argument("--out", help="dataset directory (default: config data_dir)")
    p_gen.add_argument("--force", action="store_true")

    p_train = sub.add_parser("train", help="run a trainer")
    p_train.add_argument("--mode", choices=TRAIN_MODES, required=True)
    p_train.add_argument("--data", help="dataset directory")
    p_train.add_argument("--out", help="run directory (default: config out_dir)")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the last per-epoch checkpoint")

    p_eval = sub.add_parser("eval", help="run an evaluation protocol")
    p_eval.add_argument("--protocol", choices=EVAL_PROTOCOLS, required=True)
    p_eval.add_argument("--data", help="dataset directory")
    p_eval.add_argument("--out", help="run directory with checkpoints")
    p_eval.add_argument("--fractions", help="comma list, e.g. 0,0.1,1.0")
    p_eval.add_argument("--init", default="fskd",
                        choices=("random", "udakd", "fskd"),
                        help="extractor initialization for finetune/sweep")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError("--set expects KEY=VALUE, got %r" % item)
            key, _, value = item.partition("=")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["train.seed"] = args.seed
        if overrides:
            cfg = apply_overrides(cfg, overrides)

        if args.command == "scenegen":
            out = args.out or cfg.data_dir
            return cmd_scenegen(cfg, out, args.force)
        if args.command == "train":
            data = args.data or cfg.data_dir
            out = args.out or cfg.out_dir
            return cmd_train(cfg, args.mode, data, out, resume=args.resume)
        if args.command == "eval":
            data = args.data or cfg.data_dir
            out = args.out or cfg.out_dir
            fractions = None
            if args.fractions:
                fractions = [float(tok) for tok in args.fractions.split(",")]
            return cmd_eval(cfg, args.protocol, data, out, fractions, args.init)
        raise ConfigError("unknown command %r" % args.command)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print("missing artifact: %s" % exc, file=sys.stderr)
        return 3
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
