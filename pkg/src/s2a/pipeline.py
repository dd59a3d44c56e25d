"""File-based pipeline commands behind the ``s2a`` CLI.

Layout under the output directory::

    cubes/ labels/            generate
    sa/ se/                   decouple (PPM + provenance sidecar)
    bandselect/ pca/          per-cube reports
    splits/                   train.txt val.txt test.txt
    checkpoints/ train_log.txt
    detections/ overlays/     detect
    eval/                     metrics.txt confusion.csv table.txt
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import detector as D
from . import gradsuite
from .boxes import parse_annotation_lines, read_detections, write_annotations, write_detections
from .config import ConfigError
from .cube_io import CubeFormatError, read_cube, read_ppm, render_image, write_cube, write_ppm, write_provenance
from .evaluation import evaluate, write_metrics
from .experiment import SceneSet, to_array, train_epoch
from .hid import GenerationParams, decouple, fit_pca, select_bands
from .synthetic import SyntheticSceneSpec, generate_corpus
from .tensor import load_checkpoint, save_checkpoint

log = logging.getLogger("s2a")

# blue / yellow / red for classes 0 / 1 / 2
CLASS_COLORS = ((0, 0, 255), (255, 255, 0), (255, 0, 0))
OTHER_COLOR = (0, 255, 0)


class ValidationError(ValueError):
    """Bad inputs; the CLI maps this to exit code 1."""


def _ids(directory, suffix):
    d = Path(directory)
    return sorted(p.stem for p in d.glob(f"*{suffix}")) if d.exists() else []


def _manifest(cfg, name):
    p = cfg.out("splits", f"{name}.txt")
    return p.read_text().split() if p.exists() else None


# ------------------------------------------------------------------- generate


def synthetic_spec(cfg):
    return SyntheticSceneSpec(
        image_size=(cfg.synth_height, cfg.synth_width),
        bands=cfg.synth_bands,
        num_classes=cfg.num_classes,
        objects_per_image=(cfg.synth_objects_min, cfg.synth_objects_max),
        seed=cfg.seed,
    )


def cmd_generate(cfg):
    try:
        spec = synthetic_spec(cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    cubes, labels = cfg.out("cubes"), cfg.out("labels")
    labels.mkdir(parents=True, exist_ok=True)
    ids = []
    for sid, cube, gts in generate_corpus(spec, cfg.synth_count):
        write_cube(cube, cubes / sid)
        write_annotations(gts, labels / f"{sid}.txt")
        ids.append(sid)
    log.info("generated %d scenes in %s", len(ids), cubes)
    return ids


# ------------------------------------------------------------------ decouple


def _read_cubes(cfg):
    """Yield (id, cube) for every readable cube, logging and skipping the rest."""
    root = cfg.cubes()
    ids = _ids(root, ".hdr")
    if not ids:
        log.warning("no cubes found in %s", root)
    for sid in ids:
        try:
            yield sid, read_cube(root / sid)
        except (CubeFormatError, FileNotFoundError, ValueError) as exc:
            log.warning("skipping corrupt cube %s: %s", sid, exc)


def cmd_decouple(cfg):
    if cfg.k_se != 3 or cfg.k_sa != 3:
        raise ValidationError("aggregated images have three channels: k_se and k_sa must be 3")
    try:
        gen = GenerationParams(cfg.percentile_low, cfg.percentile_high)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    done = []
    for sid, cube in _read_cubes(cfg):
        sa, se = decouple(cube, cfg.k_se, cfg.k_sa, gen)
        for role, img in (("sa", sa), ("se", se)):
            path = cfg.out(role, f"{sid}.ppm")
            path.parent.mkdir(parents=True, exist_ok=True)
            render_image(img, path)
            write_provenance(img, path)
        done.append(sid)
    return done


def cmd_bandselect(cfg, k=None):
    k = k or cfg.k_sa
    out = cfg.out("bandselect")
    out.mkdir(parents=True, exist_ok=True)
    done = []
    for sid, cube in _read_cubes(cfg):
        if not 1 <= k <= cube.bands:
            raise ValidationError(f"k={k} outside 1..{cube.bands}")
        sel = select_bands(cube, k)
        wl = [f"{cube.wavelengths_nm[r]:g}" for r in sel.representatives]
        text = (
            f"k = {k}\n"
            f"segment_boundaries = {' '.join(map(str, sel.segment_boundaries))}\n"
            f"representatives = {' '.join(map(str, sel.representatives))}\n"
            f"representative_wavelengths_nm = {' '.join(wl)}\n"
            f"objective = {sel.objective_value:.17g}\n"
        )
        (out / f"{sid}.txt").write_text(text)
        done.append(sid)
    return done


def cmd_pca(cfg, k=None):
    k = k or cfg.k_se
    out = cfg.out("pca")
    out.mkdir(parents=True, exist_ok=True)
    done = []
    for sid, cube in _read_cubes(cfg):
        if not 1 <= k <= cube.bands:
            raise ValidationError(f"k={k} outside 1..{cube.bands}")
        model = fit_pca(cube, k)
        lines = [f"k = {k}", "explained_variance = " + " ".join(f"{v:.17g}" for v in model.explained_variance)]
        for i, comp in enumerate(model.components):
            lines.append(f"component{i} = " + " ".join(f"{v:.17g}" for v in comp))
        (out / f"{sid}.txt").write_text("\n".join(lines) + "\n")
        done.append(sid)
    return done


# --------------------------------------------------------------------- split


def split_sizes(n, ratios):
    """Largest-remainder apportionment of ``n`` items; ties go to earlier splits."""
    quotas = np.asarray(ratios, dtype=np.float64) * n / float(np.sum(ratios))
    sizes = np.floor(quotas).astype(int)
    rest = n - sizes.sum()
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return [int(s) for s in sizes]


def _class_counts(ids, boxes_by_id, num_classes):
    c = np.zeros(num_classes)
    for i in ids:
        for b in boxes_by_id[i]:
            if b.class_id < num_classes:
                c[b.class_id] += 1
    return c


def split_deviation(parts, boxes_by_id, num_classes):
    """Largest relative deviation of any split's class proportions from the global ones."""
    allc = _class_counts([i for p in parts for i in p], boxes_by_id, num_classes)
    if allc.sum() == 0:
        return 0.0
    glob = allc / allc.sum()
    worst = 0.0
    for p in parts:
        c = _class_counts(p, boxes_by_id, num_classes)
        if c.sum() == 0:
            return float("inf")
        prop = c / c.sum()
        for g, q in zip(glob, prop):
            if g > 0:
                worst = max(worst, abs(q - g) / g)
    return worst


def split_ids(ids, boxes_by_id, ratios, seed, num_classes, tolerance=0.10, attempts=100):
    """Seeded shuffle into three parts; reshuffles until class proportions are
    within tolerance. Returns (parts, deviation, attempts used)."""
    if len(ids) < 10:
        raise ValidationError(f"need at least 10 images to split, found {len(ids)}")
    sizes = split_sizes(len(ids), ratios)
    ids = sorted(ids)
    best, best_dev = None, float("inf")
    for a in range(attempts):
        perm = np.random.default_rng([seed, a]).permutation(len(ids))
        cuts = np.cumsum(sizes)[:-1]
        parts = [sorted(ids[i] for i in chunk) for chunk in np.split(perm, cuts)]
        dev = split_deviation(parts, boxes_by_id, num_classes)
        if dev < best_dev:
            best, best_dev = parts, dev
        if dev <= tolerance:
            return parts, dev, a + 1
    log.warning("no split within %.0f%% class tolerance after %d attempts; keeping best (%.3f)",
                tolerance * 100, attempts, best_dev)
    return best, best_dev, attempts


def _load_labels(cfg, ids=None):
    root = cfg.labels()
    ids = _ids(root, ".txt") if ids is None else ids
    boxes, errors = {}, []
    for sid in ids:
        p = root / f"{sid}.txt"
        if not p.exists():
            errors.append(f"{p}: missing annotation file")
            continue
        b, errs = parse_annotation_lines(p.read_text().splitlines(), str(p))
        boxes[sid] = b
        errors.extend(errs)
    if errors:
        raise ValidationError("\n".join(errors))
    return boxes


def cmd_split(cfg):
    boxes = _load_labels(cfg)
    parts, dev, used = split_ids(list(boxes), boxes, cfg.split_ratios, cfg.seed, cfg.num_classes,
                                 cfg.split_tolerance, cfg.split_attempts)
    out = cfg.out("splits")
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in part))
    log.info("split %s after %d attempt(s), max class deviation %.3f", [len(p) for p in parts], used, dev)
    return parts


# --------------------------------------------------------------------- train


def backbone_config(cfg):
    try:
        return D.BackboneConfig(
            stage_channels=cfg.stage_channels,
            ssa_stages=cfg.ssa_stages if cfg.streams == 2 else (),
            streams=cfg.streams,
            ssa_r=cfg.ssa_r,
            ssa_d_k=cfg.ssa_d_k,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def anchors_for(cfg):
    if not cfg.anchors:
        return D.default_anchors()
    try:
        anchors = [D.Anchor(w, h, lv) for w, h, lv in cfg.anchors]
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if any(not any(a.level == lv for a in anchors) for lv in D.LEVELS):
        raise ValidationError("anchors must cover levels 3, 4 and 5")
    return anchors


def second_stream(cfg):
    return None if cfg.streams == 1 else cfg.second_stream


def load_scene_set(cfg, ids):
    missing = [f"{cfg.out(r, i + '.ppm')}" for i in ids for r in ("sa", "se") if not cfg.out(r, i + ".ppm").exists()]
    if missing:
        raise ValidationError("missing decoupled images (run decouple first):\n" + "\n".join(missing[:10]))
    boxes = _load_labels(cfg, ids)
    sa = to_array([read_ppm(cfg.out("sa", f"{i}.ppm")) for i in ids])
    se = to_array([read_ppm(cfg.out("se", f"{i}.ppm")) for i in ids])
    return SceneSet(list(ids), sa, se, [boxes[i] for i in ids])


def build_model(cfg, image_size):
    return D.Detector.create(backbone_config(cfg), anchors_for(cfg), cfg.num_classes, image_size, seed=cfg.seed)


def _checkpoint_state(model, opt):
    state = dict(model.state())
    state["meta.epoch"] = np.array([opt.epoch], dtype=np.float64)
    state["meta.step"] = np.array([opt.step], dtype=np.float64)
    for k, v in opt.velocity.items():
        state[f"opt.velocity.{k}"] = v
    return state


def _restore(model, opt, state):
    model.load_state(state)
    opt.epoch = int(state["meta.epoch"][0]) if "meta.epoch" in state else 0
    opt.step = int(state["meta.step"][0]) if "meta.step" in state else 0
    pre = "opt.velocity."
    opt.velocity = {k[len(pre):]: np.array(v) for k, v in state.items() if k.startswith(pre)}


def _log_fields(line):
    return dict(kv.split(" = ", 1) for kv in line.split(", ") if " = " in kv)


def _mean_loss(history):
    n = max(1, len(history))
    return (sum(h.total for h in history) / n, sum(h.cls for h in history) / n, sum(h.box for h in history) / n)


def validation_loss(model, data, second, batch_size=16):
    tot = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        se = None if second is None else (data.sa if second == "sa" else data.se)[sl]
        _, parts = model.loss(data.sa[sl], se, data.gts[sl])
        tot.append(parts.total * len(data.ids[sl]))
    return sum(tot) / len(data)


def cmd_train(cfg):
    train_ids = _manifest(cfg, "train") or _ids(cfg.out("sa"), ".ppm")
    if not train_ids:
        raise ValidationError(f"no training images under {cfg.out('sa')}")
    data = load_scene_set(cfg, train_ids)
    val_ids = _manifest(cfg, "val")
    val = load_scene_set(cfg, val_ids) if val_ids else None
    model = build_model(cfg, data.sa.shape[2:])
    opt = D.SgdState(cfg.lr, cfg.power, cfg.max_epoch, cfg.momentum, cfg.weight_decay)
    ckpt_dir = cfg.out("checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = cfg.out("train_log.txt")
    second = second_stream(cfg)
    if cfg.resume:
        try:
            _restore(model, opt, load_checkpoint(cfg.resume))
        except (ValueError, FileNotFoundError) as exc:
            raise ValidationError(f"cannot resume from {cfg.resume}: {exc}") from None
        lines = log_path.read_text().splitlines() if log_path.exists() else []
        lines = [ln for ln in lines if int(_log_fields(ln)["epoch"]) < opt.epoch]
    else:
        lines = []
    best_path = ckpt_dir / "best.ckpt"
    best = float("inf")
    for ln in lines:
        fields = _log_fields(ln)
        best = min(best, float(fields.get("val_total", fields["total"])))
    while opt.epoch < cfg.max_epoch:
        good = _checkpoint_state(model, opt)
        lr = opt.lr
        try:
            history = train_epoch(model, data, second, opt, cfg.batch, cfg.seed, cfg.flip)
        except D.NumericalError:
            save_checkpoint(ckpt_dir / "last_good.ckpt", good)
            log_path.write_text("".join(ln + "\n" for ln in lines))
            raise
        total, cls, box = _mean_loss(history)
        entry = f"epoch = {opt.epoch}, lr = {lr:.12g}, total = {total:.9g}, cls = {cls:.9g}, box = {box:.9g}"
        score = total
        if val is not None:
            score = validation_loss(model, val, second)
            entry += f", val_total = {score:.9g}"
        lines.append(entry)
        opt.epoch += 1
        if score < best:
            best = score
            save_checkpoint(best_path, _checkpoint_state(model, opt))
        log_path.write_text("".join(ln + "\n" for ln in lines))
    final = ckpt_dir / "final.ckpt"
    save_checkpoint(final, _checkpoint_state(model, opt))
    if not best_path.exists():
        save_checkpoint(best_path, _checkpoint_state(model, opt))
    return final


# -------------------------------------------------------------------- detect


def draw_boxes(image, dets):
    """Copy of an HxWx3 image with one-pixel class-coloured box outlines."""
    out = np.array(image, dtype=np.uint8, copy=True)
    H, W = out.shape[:2]
    for d in dets:
        color = CLASS_COLORS[d.class_id] if d.class_id < len(CLASS_COLORS) else OTHER_COLOR
        x0, y0 = int(np.clip(np.floor(d.box[0]), 0, W - 1)), int(np.clip(np.floor(d.box[1]), 0, H - 1))
        x1, y1 = int(np.clip(np.ceil(d.box[2]) - 1, 0, W - 1)), int(np.clip(np.ceil(d.box[3]) - 1, 0, H - 1))
        out[y0, x0:x1 + 1] = color
        out[y1, x0:x1 + 1] = color
        out[y0:y1 + 1, x0] = color
        out[y0:y1 + 1, x1] = color
    return out


def cmd_detect(cfg):
    ids = _manifest(cfg, "test") or _ids(cfg.out("sa"), ".ppm")
    if not ids:
        raise ValidationError(f"no images to run detection on under {cfg.out('sa')}")
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else cfg.out("checkpoints", "final.ckpt")
    if not ckpt.exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    missing = [str(cfg.out(r, i + ".ppm")) for i in ids for r in ("sa", "se") if not cfg.out(r, i + ".ppm").exists()]
    if missing:
        raise ValidationError("missing decoupled images:\n" + "\n".join(missing[:10]))
    sa = to_array([read_ppm(cfg.out("sa", f"{i}.ppm")) for i in ids])
    se = to_array([read_ppm(cfg.out("se", f"{i}.ppm")) for i in ids])
    model = build_model(cfg, sa.shape[2:])
    try:
        model.load_state(load_checkpoint(ckpt))
    except ValueError as exc:
        raise ValidationError(f"checkpoint/config mismatch: {exc}") from None
    second = second_stream(cfg)
    det_dir, ov_dir = cfg.out("detections"), cfg.out("overlays")
    det_dir.mkdir(parents=True, exist_ok=True)
    for s in range(0, len(ids), 16):
        sl = slice(s, s + 16)
        two = None if second is None else (sa if second == "sa" else se)[sl]
        batch = model.detect(sa[sl], two, conf_threshold=cfg.eval_conf_threshold, iou_threshold=cfg.nms_iou)
        for sid, dets in zip(ids[sl], batch):
            write_detections(dets, det_dir / f"{sid}.txt")
            shown = [d for d in dets if d.score >= cfg.conf_threshold]
            write_ppm(draw_boxes(read_ppm(cfg.out("sa", f"{sid}.ppm")), shown), ov_dir / f"{sid}.ppm")
    return ids


# ---------------------------------------------------------------------- eval


def cmd_eval(cfg):
    det_dir = cfg.out("detections")
    ids = _manifest(cfg, "test") or _ids(det_dir, ".txt")
    errors = []
    for sid in ids:
        if not (det_dir / f"{sid}.txt").exists():
            errors.append(f"{det_dir / (sid + '.txt')}: no detection file for image {sid}")
        if not (cfg.labels() / f"{sid}.txt").exists():
            errors.append(f"{cfg.labels() / (sid + '.txt')}: no annotation file for image {sid}")
    extra = sorted(set(_ids(det_dir, ".txt")) - set(ids))
    errors += [f"{det_dir / (sid + '.txt')}: detections for image {sid} outside the evaluated set" for sid in extra
               if not (cfg.labels() / f"{sid}.txt").exists()]
    if errors:
        raise ValidationError("\n".join(errors))
    if not ids:
        raise ValidationError(f"no detection files under {det_dir}")
    gts = _load_labels(cfg, ids)
    dets = []
    for sid in ids:
        dets.extend(read_detections(det_dir / f"{sid}.txt", sid))
    size = read_ppm(cfg.out("sa", f"{ids[0]}.ppm")).shape[:2] if cfg.out("sa", f"{ids[0]}.ppm").exists() \
        else (cfg.synth_height, cfg.synth_width)
    result = evaluate(dets, gts, cfg.num_classes, size, conf_threshold=cfg.conf_threshold)
    write_metrics(result, cfg.out("eval"))
    return result


# ----------------------------------------------------------------- gradcheck


def cmd_gradcheck(cfg):
    """Returns the results; the CLI turns any failure into exit code 2."""
    modules = tuple(cfg.gradcheck_modules)
    out = cfg.out("gradcheck.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    if not modules:
        log.warning("empty gradcheck module list: nothing to check")
        out.write_text("")
        return []
    try:
        results = gradsuite.run_suite(modules, range(cfg.seed, cfg.seed + cfg.gradcheck_seeds), tol=cfg.gradcheck_tol)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out.write_text(gradsuite.format_report(results))
    return results


__all__ = [
    "ConfigError", "ValidationError", "cmd_generate", "cmd_decouple", "cmd_bandselect", "cmd_pca", "cmd_split",
    "cmd_train", "cmd_detect", "cmd_eval", "cmd_gradcheck",
]
