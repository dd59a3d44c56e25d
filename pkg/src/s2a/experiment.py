"""In-memory training loop and the three-way stream ablation on synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import detector as D
from .evaluation import evaluate
from .hid import decouple
from .synthetic import SyntheticSceneSpec, generate_corpus


def to_array(images):
    """Stack HxWx3 uint8 images into an (N, 3, H, W) float64 batch in [-0.5, 0.5]."""
    return np.stack([np.asarray(im.data if hasattr(im, "data") else im) for im in images]).transpose(0, 3, 1, 2) / 255.0 - 0.5


@dataclass
class SceneSet:
    ids: list
    sa: np.ndarray
    se: np.ndarray
    gts: list

    def __len__(self):
        return len(self.ids)


def build_scene_set(corpus):
    ids, sas, ses, gts = [], [], [], []
    for sid, cube, g in corpus:
        sa, se = decouple(cube)
        ids.append(sid)
        sas.append(sa)
        ses.append(se)
        gts.append(g)
    return SceneSet(ids, to_array(sas), to_array(ses), gts)


def synthetic_split(spec=SyntheticSceneSpec(), n_train=64, n_test=16):
    corpus = generate_corpus(spec, n_train + n_test)
    return build_scene_set(corpus[:n_train]), build_scene_set(corpus[n_train:])


# Stream variants: (backbone config, which image feeds the second stream)
VARIANTS = {
    "sa_only": (D.BackboneConfig(streams=1, ssa_stages=()), None),
    "sa_sa": (D.BackboneConfig(streams=2, ssa_stages=()), "sa"),
    "sa_se_ssa": (D.BackboneConfig(streams=2, ssa_stages=(3, 4, 5)), "se"),
}


@dataclass(frozen=True)
class TrainParams:
    steps: int = 500
    batch_size: int = 8
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    flip: bool = True


def streams_for(data, second):
    if second is None:
        return data.sa, None
    return data.sa, (data.sa if second == "sa" else data.se)


def flip_batch(sa, se, gts, rng):
    """Random horizontal and vertical flips, one draw per image."""
    sa, se = sa.copy(), None if se is None else se.copy()
    out = []
    for i, g in enumerate(gts):
        h, v = rng.random(2) < 0.5
        if h:
            sa[i] = sa[i, :, :, ::-1]
            if se is not None:
                se[i] = se[i, :, :, ::-1]
            g = [replace(b, cx=1.0 - b.cx) for b in g]
        if v:
            sa[i] = sa[i, :, ::-1, :]
            if se is not None:
                se[i] = se[i, :, ::-1, :]
            g = [replace(b, cy=1.0 - b.cy) for b in g]
        out.append(g)
    return sa, se, out


def batches_per_epoch(n, batch_size):
    return max(1, n // batch_size)


def train_epoch(model, data, second, opt, batch_size, seed, flip=True, max_steps=None, log=None):
    """One pass over ``data`` (last partial batch dropped). Shuffling and flips
    draw from a generator keyed on (seed, epoch) so a resumed run replays the
    same batches."""
    n = len(data)
    rng = np.random.default_rng([seed, opt.epoch])
    order = rng.permutation(n)
    sa_all, se_all = streams_for(data, second)
    history = []
    for k in range(batches_per_epoch(n, batch_size)):
        if max_steps is not None and opt.step >= max_steps:
            break
        idx = np.sort(order[k * batch_size:(k + 1) * batch_size])
        batch = (sa_all[idx], None if se_all is None else se_all[idx], [data.gts[i] for i in idx])
        if flip:
            batch = flip_batch(*batch, rng)
        parts = D.train_step(model, batch, opt)
        history.append(parts)
        if log is not None:
            log(opt, parts)
    return history


def fit(model, data, second, tp=TrainParams(), seed=0, log=None):
    """Train for ``tp.steps`` minibatch steps; the poly schedule advances once
    per pass over the data. Returns the per-step loss breakdowns."""
    per_epoch = batches_per_epoch(len(data), tp.batch_size)
    max_epoch = -(-tp.steps // per_epoch)
    opt = D.SgdState(tp.base_lr, tp.power, max_epoch, tp.momentum, tp.weight_decay)
    history = []
    while opt.step < tp.steps:
        history += train_epoch(model, data, second, opt, tp.batch_size, seed, tp.flip, tp.steps, log)
        opt.epoch += 1
    return history


def predict(model, data, second, conf_threshold=0.001, batch_size=16):
    sa_all, se_all = streams_for(data, second)
    out = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        dets = model.detect(sa_all[sl], None if se_all is None else se_all[sl], conf_threshold=conf_threshold)
        for img_id, ds in zip(data.ids[sl], dets):
            out.extend(replace(d, image_id=img_id) for d in ds)
    return out


def run_variant(name, train, test, num_classes=2, tp=TrainParams(), seed=0, anchors=None):
    cfg, second = VARIANTS[name]
    size = train.sa.shape[2:]
    model = D.Detector.create(cfg, anchors or D.default_anchors(), num_classes, size, seed=seed)
    fit(model, train, second, tp, seed=seed)
    dets = predict(model, test, second)
    return evaluate(dets, dict(zip(test.ids, test.gts)), num_classes, size)


def run_ablation(seeds=(0, 1, 2), tp=TrainParams(), spec=SyntheticSceneSpec(), n_train=64, n_test=16):
    """mAP50 per variant per seed. The corpus is fixed; seeds vary model init
    and batch order."""
    train, test = synthetic_split(spec, n_train, n_test)
    return {name: [run_variant(name, train, test, spec.num_classes, tp, s).map50 for s in seeds] for name in VARIANTS}
