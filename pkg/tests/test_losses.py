"""Loss terms against exhaustive numpy oracles."""

import numpy as np
import pytest
from helpers import bilinear_oracle, tiny_proto_config

from protopyramid import autodiff as ad
from protopyramid import losses as L
from protopyramid.prototypes import PrototypeConfig, PrototypeLayer


def make_layer(rng, cfg=None, dim=6):
    return PrototypeLayer(cfg or tiny_proto_config(), feature_dim=dim, rng=rng)


def clust_sep_oracle(g, labels, entries):
    own = {e.index: e.cls for e in entries}
    clust, sep = [], []
    for i, y in enumerate(labels):
        own_vals = [g[i, j] for j, c in own.items() if c == y]
        other_vals = [g[i, j] for j, c in own.items() if c != y]
        clust.append(max(own_vals))
        sep.append(max(other_vals))
    return -np.mean(clust), np.mean(sep)


def fine_oracle(sim_maps, masks, labels, lam_in, lam_full, entries, size):
    total = 0.0
    for e in entries:
        smap = sim_maps[e.index]
        b, eta = smap.shape[0], smap.shape[1]
        pam = bilinear_oracle(smap[:, None], size // eta)[:, 0]
        for i in range(b):
            li = lam_in[labels[i], e.cls]
            lf = lam_full[labels[i], e.cls]
            if li == 0 and lf == 0:
                continue
            weighted = li * masks[i] * pam[i] + lf * pam[i]
            total += np.sqrt((weighted ** 2).sum())
    return total


class TestClusterSeparation:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        layer = make_layer(rng)
        m = layer.m
        g = rng.normal(size=(7, m))
        labels = rng.integers(0, 4, size=7)
        clust, sep = L.cluster_and_separation(ad.Tensor(g), labels, layer.entries)
        ec, es = clust_sep_oracle(g, labels, layer.entries)
        assert abs(clust.item() - ec) < 1e-12
        assert abs(sep.item() - es) < 1e-12

    def test_gradient(self, rng):
        layer = make_layer(rng)
        labels = np.array([0, 1, 2, 3])
        g0 = rng.normal(size=(4, layer.m))

        def f(t):
            c, s = L.cluster_and_separation(t, labels, layer.entries)
            return c + 0.5 * s

        assert ad.gradient_check(f, ad.Tensor(g0, requires_grad=True)) < 1e-6

    def test_class_without_prototypes_rejected(self, rng):
        layer = make_layer(rng, tiny_proto_config(negative_prototypes=False))
        g = ad.Tensor(rng.normal(size=(2, layer.m)))
        with pytest.raises(ValueError, match="owns no prototypes"):
            L.cluster_and_separation(g, np.array([0, 3]), layer.entries)


class TestOrthogonality:
    def test_identical_pair_costs_two(self, rng):
        layer = make_layer(rng, PrototypeConfig(per_class_per_level=2, levels=(5,), top_k=1))
        v = rng.normal(size=6)
        for e in layer.entries:
            layer.vector(e.index).data = v.copy()
        # per class: gram of two identical unit rows is all-ones, ||G - I||^2 = 2
        out = L.orthogonality_loss(layer)
        assert abs(out.item() - 2.0 * 4) < 1e-9

    def test_orthogonal_rows_cost_zero(self, rng):
        layer = make_layer(rng, PrototypeConfig(per_class_per_level=2, levels=(5,), top_k=1))
        for i, e in enumerate(layer.entries):
            vec = np.zeros(6)
            vec[i % 6] = 3.0  # scale must not matter after row normalization
            layer.vector(e.index).data = vec
        assert abs(L.orthogonality_loss(layer).item()) < 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_gram_oracle(self, seed):
        rng = np.random.default_rng(seed)
        layer = make_layer(rng)
        expect = 0.0
        for cls in range(4):
            rows = np.stack([layer.vector(e.index).data for e in layer.entries
                             if e.cls == cls])
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            gram = rows @ rows.T
            expect += ((gram - np.eye(len(rows))) ** 2).sum()
        assert abs(L.orthogonality_loss(layer).item() - expect) < 1e-12

    def test_gradient(self, rng):
        layer = make_layer(rng)
        target = layer.vector(0)
        target.requires_grad = True

        def f(t):
            layer.params["prototypes.0"] = t
            return L.orthogonality_loss(layer)

        assert ad.gradient_check(f, ad.Tensor(target.data.copy(), requires_grad=True)) < 1e-6


class TestFineAnnotation:
    def _setup(self, rng, size=8):
        layer = make_layer(rng)
        labels = np.array([0, 1, 2, 3])
        masks = (rng.uniform(size=(4, size, size)) > 0.3).astype(np.uint8)
        masks[3] = 1
        sim_maps = {
            e.index: ad.Tensor(rng.uniform(-1, 1, size=(4, 2, 2)), requires_grad=True)
            for e in layer.entries
        }
        return layer, labels, masks, sim_maps

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_elementwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        layer, labels, masks, sim_maps = self._setup(rng)
        coeffs = L.FineAnnotationCoeffs()
        out = L.fine_annotation_loss(sim_maps, masks, labels, coeffs, layer.entries, 8)
        expect = fine_oracle({j: m.data for j, m in sim_maps.items()}, masks, labels,
                             coeffs.masked_array(), coeffs.full_array(), layer.entries, 8)
        assert abs(out.item() - expect) < 1e-12

    def test_negative_sample_mask_is_irrelevant(self, rng):
        """With the default tables a negative sample has zero coefficients
        against every prototype, so its annotation mask cannot matter."""
        layer, labels, masks, sim_maps = self._setup(rng)
        coeffs = L.FineAnnotationCoeffs()
        a = L.fine_annotation_loss(sim_maps, masks, labels, coeffs, layer.entries, 8)
        flipped = masks.copy()
        flipped[labels == 3] = 0
        b = L.fine_annotation_loss(sim_maps, flipped, labels, coeffs, layer.entries, 8)
        assert a.item() == b.item()

    def test_gradient(self, rng):
        layer, labels, masks, sim_maps = self._setup(rng)
        coeffs = L.FineAnnotationCoeffs()
        probe = sim_maps[0]

        def f(t):
            sim_maps[0] = t
            return L.fine_annotation_loss(sim_maps, masks, labels, coeffs,
                                          layer.entries, 8)

        assert ad.gradient_check(f, ad.Tensor(probe.data.copy(), requires_grad=True)) < 1e-6

    def test_non_binary_mask_rejected(self, rng):
        layer, labels, masks, sim_maps = self._setup(rng)
        masks = masks.astype(float)
        masks[0, 0, 0] = 0.5
        with pytest.raises(ValueError, match="binary"):
            L.fine_annotation_loss(sim_maps, masks, labels, L.FineAnnotationCoeffs(),
                                   layer.entries, 8)

    def test_wrong_resolution_rejected(self, rng):
        layer, labels, masks, sim_maps = self._setup(rng)
        with pytest.raises(ValueError, match="resolution"):
            L.fine_annotation_loss(sim_maps, masks[:, :4, :4], labels,
                                   L.FineAnnotationCoeffs(), layer.entries, 8)


class TestCoeffTables:
    def test_defaults_validate(self):
        L.FineAnnotationCoeffs().validate()

    def test_negative_row_must_be_zero(self):
        masked = np.ones((4, 4)).tolist()
        with pytest.raises(ValueError, match="negative-sample row"):
            L.FineAnnotationCoeffs(masked=masked).validate()

    def test_shape_checked(self):
        with pytest.raises(ValueError, match="4x4"):
            L.FineAnnotationCoeffs(masked=np.zeros((3, 4)).tolist()).validate()

    def test_negative_entries_rejected(self):
        full = np.zeros((4, 4))
        full[0, 0] = -1.0
        with pytest.raises(ValueError, match="finite and >= 0"):
            L.FineAnnotationCoeffs(full=full.tolist()).validate()


class TestTotalLoss:
    def _forward(self, rng):
        layer = make_layer(rng)
        labels = np.array([0, 1, 2, 3])
        masks = np.ones((4, 8, 8), dtype=np.uint8)
        g = ad.Tensor(rng.normal(size=(4, layer.m)))
        logits = layer.logits(g)
        sim_maps = {e.index: ad.Tensor(rng.uniform(-1, 1, size=(4, 2, 2)))
                    for e in layer.entries}
        return layer, labels, masks, g, logits, sim_maps

    def test_zero_weights_reduce_to_cross_entropy(self, rng):
        layer, labels, masks, g, logits, sim_maps = self._forward(rng)
        weights = L.LossWeights(cluster=0, separation=0, orthogonality=0, fine_annotation=0)
        terms = L.total_loss(logits, g, sim_maps, layer, labels, masks, weights,
                             L.FineAnnotationCoeffs(), 8)
        assert terms["total"].item() == terms["cross_entropy"].item()

    def test_total_is_weighted_sum(self, rng):
        layer, labels, masks, g, logits, sim_maps = self._forward(rng)
        w = L.LossWeights(cluster=0.3, separation=0.2, orthogonality=0.05, fine_annotation=0.01)
        terms = L.total_loss(logits, g, sim_maps, layer, labels, masks, w,
                             L.FineAnnotationCoeffs(), 8)
        expect = (terms["cross_entropy"].item()
                  + 0.3 * terms["cluster"].item()
                  + 0.2 * terms["separation"].item()
                  + 0.05 * terms["orthogonality"].item()
                  + 0.01 * terms["fine_annotation"].item())
        assert abs(terms["total"].item() - expect) < 1e-12

    def test_cluster_is_negative_of_best_own(self, rng):
        """Sanity on signs: raising the best own-class similarity lowers the
        cluster term; raising an other-class similarity raises separation."""
        layer = make_layer(rng)
        labels = np.array([0])
        g = np.zeros((1, layer.m))
        own = [e.index for e in layer.entries if e.cls == 0][0]
        other = [e.index for e in layer.entries if e.cls == 1][0]
        g[0, own], g[0, other] = 0.9, 0.4
        clust, sep = L.cluster_and_separation(ad.Tensor(g), labels, layer.entries)
        assert clust.item() == -0.9
        assert sep.item() == 0.4

    def test_weights_validation(self):
        with pytest.raises(ValueError, match="loss_weights.cluster"):
            L.LossWeights(cluster=-1.0).validate()
