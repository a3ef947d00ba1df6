"""Acceptance gate: nine checks, one printed verdict line each.

Tolerances are pinned here and must not be loosened. Run with plain
``pytest tests/test_acceptance.py``; the verdict lines bypass capture.
"""

import hashlib
import time

import numpy as np
import pytest
from helpers import (
    auroc_pair_count,
    bilinear_oracle,
    tiny_backbone_config,
    tiny_proto_config,
)

from protopyramid import autodiff as ad
from protopyramid import data as D
from protopyramid import losses as L
from protopyramid import metrics
from protopyramid.config import RunConfig
from protopyramid.explain import explain
from protopyramid.model import Model
from protopyramid.prototypes import PrototypeLayer, focal_similarity, patch_cosine_similarity
from protopyramid.trainer import Trainer


def verdict(capsys, name, ok):
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    assert ok, name


def micro_model(seed):
    ad.set_default_dtype(np.float64)
    return Model(tiny_backbone_config(), tiny_proto_config(), seed=seed)


def composite_loss(model, x, labels, masks):
    out = model.forward(x)
    terms = L.total_loss(out.logits, out.g, out.sim_maps, model.layer, labels,
                         masks, L.LossWeights(), L.FineAnnotationCoeffs(),
                         model.backbone_cfg.input_size)
    return terms["total"]


def test_criterion_1_gradient_checks(capsys):
    """End-to-end gradients of the composite objective, 64-bit, 5 seeds."""
    t0 = time.time()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = micro_model(seed)
        x = rng.uniform(size=(3, 1, 8, 8))
        labels = np.array([0, 1, 2])
        masks = (rng.uniform(size=(3, 8, 8)) > 0.2).astype(np.uint8)
        probes = ["backbone.block0.conv0.w", "fpn.lateral5.w", "fpn.smooth4.w",
                  "prototypes.0", "head.w"]
        for name in probes:
            owner = model.net.params if name in model.net.params else model.layer.params
            original = owner[name]

            def f(t):
                owner[name] = t
                return composite_loss(model, x, labels, masks)

            err = ad.gradient_check(f, ad.Tensor(original.data.copy(), requires_grad=True))
            owner[name] = original
            worst = max(worst, err)
        xt = ad.Tensor(x, requires_grad=True)
        err = ad.gradient_check(lambda t: composite_loss(model, t, labels, masks), xt)
        worst = max(worst, err)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 120
    verdict(capsys, f"criterion 1: gradient checks (max rel err {worst:.2e}, "
                    f"{elapsed:.1f}s)", ok)


def test_criterion_2_oracle_equivalence(capsys):
    """Frozen-oracle equivalence, >=100 random trials per quantity."""
    ad.set_default_dtype(np.float64)
    worst = {"cosine": 0.0, "focal": 0.0, "clustsep": 0.0, "ortho": 0.0,
             "fine": 0.0, "auroc": 0.0, "confusion": 0}
    for trial in range(100):
        rng = np.random.default_rng(10000 + trial)

        # cosine similarity map
        z = rng.normal(size=(2, 4, 3, 3))
        p = rng.normal(size=4)
        got = patch_cosine_similarity(ad.Tensor(z), ad.Tensor(p)).data
        pn = p / np.linalg.norm(p)
        norms = np.maximum(np.linalg.norm(z, axis=1), 1e-12)
        expect = np.einsum("bdhw,d->bhw", z, pn) / norms
        worst["cosine"] = max(worst["cosine"], np.abs(got - expect).max())

        # focal similarity
        sim = rng.normal(size=(3, 3, 3))
        k = int(rng.integers(1, 10))
        got = focal_similarity(ad.Tensor(sim), k).data
        flat = sim.reshape(3, -1)
        expect = np.sort(flat, axis=1)[:, -k:].mean(axis=1) - flat.mean(axis=1)
        worst["focal"] = max(worst["focal"], np.abs(got - expect).max())

        # cluster / separation
        layer = PrototypeLayer(tiny_proto_config(), 4, rng)
        g = rng.normal(size=(5, layer.m))
        labels = rng.integers(0, 4, size=5)
        clust, sep = L.cluster_and_separation(ad.Tensor(g), labels, layer.entries)
        own = {e.index: e.cls for e in layer.entries}
        ec = -np.mean([max(g[i, j] for j, c in own.items() if c == y)
                       for i, y in enumerate(labels)])
        es = np.mean([max(g[i, j] for j, c in own.items() if c != y)
                      for i, y in enumerate(labels)])
        worst["clustsep"] = max(worst["clustsep"],
                                abs(clust.item() - ec), abs(sep.item() - es))

        # orthogonality
        expect = 0.0
        for cls in range(4):
            rows = np.stack([layer.vector(e.index).data
                             for e in layer.entries if e.cls == cls])
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            expect += ((rows @ rows.T - np.eye(len(rows))) ** 2).sum()
        worst["ortho"] = max(worst["ortho"],
                             abs(L.orthogonality_loss(layer).item() - expect))

        # fine-annotation
        size = 8
        labels_f = np.array([0, 1, 2, 3])
        masks = (rng.uniform(size=(4, size, size)) > 0.3).astype(np.uint8)
        masks[3] = 1
        maps = {e.index: ad.Tensor(rng.uniform(-1, 1, size=(4, 2, 2)))
                for e in layer.entries}
        coeffs = L.FineAnnotationCoeffs()
        got = L.fine_annotation_loss(maps, masks, labels_f, coeffs,
                                     layer.entries, size).item()
        lam_in, lam_full = coeffs.masked_array(), coeffs.full_array()
        expect = 0.0
        for e in layer.entries:
            pam = bilinear_oracle(maps[e.index].data[:, None], size // 2)[:, 0]
            for i in range(4):
                li = lam_in[labels_f[i], e.cls]
                lf = lam_full[labels_f[i], e.cls]
                if li == 0 and lf == 0:
                    continue
                wmap = li * masks[i] * pam[i] + lf * pam[i]
                expect += np.sqrt((wmap ** 2).sum())
        worst["fine"] = max(worst["fine"], abs(got - expect))

        # AUROC with ties
        n = int(rng.integers(12, 40))
        scores = np.round(rng.normal(size=n), 1)  # force ties
        lab = rng.integers(0, 2, size=n)
        lab[:2] = [0, 1]
        got = metrics.auroc_ovr(scores, lab, 1)
        worst["auroc"] = max(worst["auroc"],
                             abs(got - auroc_pair_count(scores, lab, 1)))

        # confusion matrix
        labc = rng.integers(0, 4, size=30)
        predc = rng.integers(0, 4, size=30)
        cm = metrics.confusion_matrix(predc, labc)
        expect_cm = np.zeros((4, 4), dtype=np.int64)
        for t, q in zip(labc, predc):
            expect_cm[t, q] += 1
        worst["confusion"] = max(worst["confusion"],
                                 int(np.abs(cm - expect_cm).max()))

    ok = (all(worst[k] < 1e-12 for k in ("cosine", "focal", "clustsep", "ortho", "fine"))
          and worst["auroc"] < 1e-6 and worst["confusion"] == 0)
    detail = ", ".join(f"{k}={v:.1e}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in worst.items())
    verdict(capsys, f"criterion 2: oracle equivalence over 100 trials ({detail})", ok)


def test_criterion_3_pyramid_structure(capsys):
    """Top-down recursion structure at both documented scales."""
    ad.set_default_dtype(np.float64)
    desk = RunConfig().backbone
    desk_ok = [desk.level_extent(l) for l in (2, 3, 4, 5)] == [16, 8, 4, 4]
    full = RunConfig.from_dict({
        "backbone": {"input_size": 224},
        "data": {"image_size": 224, "train_per_class": 1, "eval_per_class": 1},
    }).backbone
    full_ok = [full.level_extent(l) for l in (2, 3, 4, 5)] == [56, 28, 14, 14]

    # structural identity: z_top = lateral(c_top); z_l = smooth(up(z_{l+1}) + lateral(c_l))
    rng = np.random.default_rng(0)
    net = Model(desk, tiny_proto_config(levels=(2, 5)), seed=0).net
    x = ad.Tensor(rng.uniform(size=(1, 1, 64, 64)))
    c = net.bottom_up(x)
    z = net.top_down(c)

    def conv(t, name, pad):
        return ad.conv2d(t, net.params[f"{name}.w"], net.params[f"{name}.b"],
                         stride=1, padding=pad)

    worst = 0.0
    manual = {5: conv(c[5], "fpn.lateral5", 0)}
    for level in (4, 3, 2):
        lat = conv(c[level], f"fpn.lateral{level}", 0)
        factor = lat.shape[-1] // manual[level + 1].shape[-1]
        up = np.repeat(np.repeat(manual[level + 1].data, factor, axis=-2), factor, axis=-1)
        manual[level] = conv(ad.Tensor(up) + lat, f"fpn.smooth{level}", 1)
        worst = max(worst, np.abs(z[level].data - manual[level].data).max())
    worst = max(worst, np.abs(z[5].data - manual[5].data).max())

    shapes_ok = all(z[l].shape == (1, desk.feature_dim, desk.level_extent(l),
                                   desk.level_extent(l)) for l in (2, 3, 4, 5))
    ok = desk_ok and full_ok and shapes_ok and worst < 1e-12
    verdict(capsys, f"criterion 3: pyramid structure (desk 16/8/4/4={desk_ok}, "
                    f"full 56/28/14/14={full_ok}, recursion err {worst:.1e})", ok)


def test_criterion_4_projection(capsys):
    ad.set_default_dtype(np.float64)
    model = micro_model(7)
    rng = np.random.default_rng(7)
    images = rng.uniform(size=(16, 1, 8, 8))
    labels = np.tile(np.arange(4), 4)
    prov = model.project_prototypes(images, labels)
    with ad.no_grad():
        feats = {l: z.data for l, z in model.net.forward(ad.Tensor(images)).items()}
    bitwise = True
    cos_ok = True
    for e in model.layer.entries:
        src = prov[e.index]
        patch = feats[e.level][src["image_id"], :, src["row"], src["col"]]
        vec = model.layer.vector(e.index).data
        bitwise &= bool(np.array_equal(patch, vec))
        cos = patch @ vec / (np.linalg.norm(patch) * np.linalg.norm(vec))
        cos_ok &= abs(cos - 1.0) < 1e-6
    before = {j: model.layer.vector(j).data.copy() for j in range(model.layer.m)}
    model.project_prototypes(images, labels)
    idem = all(np.array_equal(model.layer.vector(j).data, before[j])
               for j in range(model.layer.m))
    ok = bitwise and cos_ok and idem
    verdict(capsys, f"criterion 4: projection (bitwise={bitwise}, cos1={cos_ok}, "
                    f"idempotent={idem})", ok)


def test_criterion_5_level_restriction(capsys):
    ad.set_default_dtype(np.float64)
    model = micro_model(9)
    rng = np.random.default_rng(9)
    pyramid = {l: ad.Tensor(rng.normal(size=(2, 6, 2, 2))) for l in (4, 5)}
    before = {j: m.data.copy()
              for j, m in model.layer.similarity_maps(pyramid).items()}
    pyramid[5] = ad.Tensor(pyramid[5].data + rng.normal(size=(2, 6, 2, 2)))
    after = model.layer.similarity_maps(pyramid)
    ok = True
    for e in model.layer.entries:
        if e.level == 4:
            ok &= bool(np.array_equal(after[e.index].data, before[e.index]))
        else:
            ok &= not np.array_equal(after[e.index].data, before[e.index])
    verdict(capsys, "criterion 5: level restriction bit-identical under "
                    "other-level perturbation", ok)


@pytest.fixture(scope="module")
def default_dataset():
    return D.generate_dataset(RunConfig().data)


@pytest.fixture(scope="module")
def trained_runs(default_dataset, tmp_path_factory):
    """Five full default-config training runs, one per seed (shared by
    criteria 6 and 7)."""
    out = []
    root = tmp_path_factory.mktemp("runs")
    for seed in range(5):
        cfg = RunConfig()
        cfg.train.seed = seed
        ad.set_default_dtype(cfg.train.dtype)
        model = Model(cfg.backbone, cfg.prototypes, seed=seed)
        trainer = Trainer(model, default_dataset, cfg.train, cfg.loss_weights,
                          cfg.fine_annotation, config_hash=cfg.hash())
        t0 = time.time()
        trainer.train(out_path=root / f"seed{seed}.ckpt")
        elapsed = time.time() - t0
        images, labels, _, _ = default_dataset.arrays("eval")
        report = metrics.evaluate(model, images, labels)
        out.append({"seed": seed, "model": model, "elapsed": elapsed,
                    "auroc": report.macro_auroc_lesion})
    return out


def test_criterion_6_training_auroc(capsys, trained_runs):
    aurocs = [r["auroc"] for r in trained_runs]
    times = [r["elapsed"] for r in trained_runs]
    n_good = sum(a >= 0.85 for a in aurocs)
    ok = n_good >= 4 and max(times) < 30 * 60
    detail = ", ".join(f"s{r['seed']}={r['auroc']:.3f}" for r in trained_runs)
    verdict(capsys, f"criterion 6: held-out macro AUROC >=0.85 in {n_good}/5 seeds "
                    f"({detail}; max {max(times):.0f}s)", ok)


def test_criterion_7_scale_ordering(capsys, trained_runs, default_dataset):
    """Low-pyramid prototypes must localize to smaller image regions than
    top-level prototypes."""
    model = trained_runs[0]["model"]
    images, labels, _, _ = default_dataset.arrays("eval")
    size = model.backbone_cfg.input_size
    fracs = {2: [], 5: []}
    for image in images[labels != 3][:30]:
        expl = explain(model, image, top_n=model.layer.m)
        for ev in expl.evidence:
            if ev.level in fracs:
                _, _, s = ev.top_patch_box
                fracs[ev.level].append((s * s) / (size * size))
    mean2 = float(np.mean(fracs[2]))
    mean5 = float(np.mean(fracs[5]))
    ok = len(fracs[2]) > 0 and len(fracs[5]) > 0 and mean2 < mean5
    verdict(capsys, f"criterion 7: top-patch area fraction level2 {mean2:.4f} "
                    f"< level5 {mean5:.4f}", ok)


def test_criterion_8_explanation_faithfulness(capsys):
    ad.set_default_dtype(np.float64)
    model = micro_model(11)
    rng = np.random.default_rng(11)
    model.project_prototypes(rng.uniform(size=(8, 1, 8, 8)), np.tile(np.arange(4), 2))
    worst_sum = 0.0
    worst_zero = 0.0
    for _ in range(10):
        image = rng.uniform(size=(1, 8, 8))
        expl = explain(model, image)
        worst_sum = max(worst_sum,
                        np.abs(expl.contribution_matrix.sum(axis=1) - expl.logits).max())
        pred = expl.predicted_class
        j = expl.evidence[0].index
        contribution = expl.contribution_matrix[pred, j]
        saved = model.layer.params["head.w"].data[pred, j]
        model.layer.params["head.w"].data[pred, j] = 0.0
        after = explain(model, image)
        model.layer.params["head.w"].data[pred, j] = saved
        worst_zero = max(worst_zero,
                         abs((expl.logits[pred] - after.logits[pred]) - contribution))
    ok = worst_sum < 1e-6 and worst_zero < 1e-9
    verdict(capsys, f"criterion 8: contributions sum to logits (err {worst_sum:.1e}), "
                    f"zeroing matches contribution (err {worst_zero:.1e})", ok)


def test_criterion_9_reproducibility(capsys, tmp_path):
    """Identical seed+config twice: bit-identical history and checkpoint."""
    cfg = RunConfig.from_dict({
        "backbone": {"input_size": 16, "blocks": [[1, 4], [1, 6]], "top_convs": 1,
                     "feature_dim": 8, "levels": [4, 5]},
        "prototypes": {"per_class_per_level": 1, "levels": [4, 5], "top_k": 2},
        "data": {"image_size": 16, "train_per_class": 6, "eval_per_class": 3,
                 "negatives_train": 4, "negatives_eval": 2, "seed": 21},
        "train": {"stage_a_epochs": 1, "stage_c_epochs": 2, "batch_size": 8},
    })
    digests, histories = [], []
    for run in ("a", "b"):
        ad.set_default_dtype(cfg.train.dtype)
        ds = D.generate_dataset(cfg.data)
        model = Model(cfg.backbone, cfg.prototypes, seed=cfg.train.seed)
        trainer = Trainer(model, ds, cfg.train, cfg.loss_weights,
                          cfg.fine_annotation, config_hash=cfg.hash())
        path = tmp_path / f"{run}.ckpt"
        trainer.train(out_path=path)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        histories.append(trainer.history)
    ok = digests[0] == digests[1] and histories[0] == histories[1]
    verdict(capsys, f"criterion 9: reproducibility (checkpoint sha256 match={digests[0] == digests[1]}, "
                    f"history match={histories[0] == histories[1]})", ok)
