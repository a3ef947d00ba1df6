"""Independent reference implementations shared across test modules."""

import numpy as np


def conv_oracle(x, k, stride, pad):
    """Direct nested-loop convolution (cross-correlation)."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    s = 0.0
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                s += xp[bi, c, y * stride + dy, xx * stride + dx] * k[o, c, dy, dx]
                    out[bi, o, y, xx] = s
    return out


def bilinear_oracle(x, factor):
    """Pointwise sampling-formula upsampling, align-corners=false."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, h * factor, w * factor))
    for y in range(h * factor):
        for xx in range(w * factor):
            sy = min(max((y + 0.5) / factor - 0.5, 0.0), h - 1.0)
            sx = min(max((xx + 0.5) / factor - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            wy, wx = sy - y0, sx - x0
            out[:, :, y, xx] = (
                x[:, :, y0, x0] * (1 - wy) * (1 - wx)
                + x[:, :, y0, x1] * (1 - wy) * wx
                + x[:, :, y1, x0] * wy * (1 - wx)
                + x[:, :, y1, x1] * wy * wx
            )
    return out


def nearest_oracle(x, factor):
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def auroc_pair_count(scores, labels, cls):
    """O(n^2) pairwise AUROC: wins + half-credit for ties."""
    scores = np.asarray(scores, dtype=float)
    pos = scores[np.asarray(labels) == cls]
    neg = scores[np.asarray(labels) != cls]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def tiny_backbone_config():
    from protopyramid.backbone import BackboneConfig
    return BackboneConfig(
        input_size=8,
        blocks=[[1, 4], [1, 4]],
        top_convs=1,
        feature_dim=6,
        levels=(4, 5),
    )


def tiny_proto_config(**kw):
    from protopyramid.prototypes import PrototypeConfig
    base = dict(per_class_per_level=1, levels=(4, 5), top_k=2)
    base.update(kw)
    return PrototypeConfig(**base)
