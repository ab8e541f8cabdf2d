"""Seeded synthetic datasets. All inputs lie in [0, 1]."""

import numpy as np

from .spikeio import synth_detection_scene


def separable(n=400, seed=0, margin=0.15):
    """Two classes in the unit square split by a random line, with an empty margin band."""
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=2)
    normal /= np.linalg.norm(normal)
    X, y = [], []
    while len(X) < n:
        p = rng.random(2)
        d = (p - 0.5) @ normal
        if abs(d) < margin / 2:
            continue
        X.append(p)
        y.append(int(d > 0))
    return np.array(X, dtype=np.float32), np.array(y)


def pattern_prototypes(seed=0, classes=10, size=8):
    rng = np.random.default_rng(seed)
    protos = np.zeros((classes, size, size))
    for c in range(classes):
        # a few bright strokes per class
        img = np.zeros((size, size))
        for _ in range(3):
            if rng.random() < 0.5:
                r = rng.integers(0, size)
                c0, c1 = sorted(rng.integers(0, size, 2))
                img[r, c0:c1 + 2] = 1.0
            else:
                col = rng.integers(0, size)
                r0, r1 = sorted(rng.integers(0, size, 2))
                img[r0:r1 + 2, col] = 1.0
        protos[c] = img
    return protos


def patterns(n_per_class=100, seed=0, noise=0.15, classes=10, size=8, proto_seed=0):
    """10-class 8x8 stroke patterns with additive noise.

    Prototypes depend only on ``proto_seed`` so train and test splits drawn
    with different ``seed`` values share classes. Returns
    ``(X, y)`` with X shaped (N, 1, size, size).
    """
    protos = pattern_prototypes(proto_seed, classes, size)
    rng = np.random.default_rng(seed + 7919)
    y = np.repeat(np.arange(classes), n_per_class)
    rng.shuffle(y)
    contrast = rng.uniform(0.6, 1.0, size=(len(y), 1, 1))
    X = 0.1 + protos[y] * contrast * 0.8 + rng.normal(0, noise, (len(y), size, size))
    return np.clip(X, 0, 1)[:, None].astype(np.float32), y


def scenes(n=1000, seed=0, size=32):
    """Detection scenes with targets (cx, cy, w, h) scaled to [0, 1].

    Returns ``(X, targets, classes)`` with X shaped (N, 1, size, size).
    """
    frames, labels = synth_detection_scene(seed, n, size)
    targets = (labels[:, :4] / size).astype(np.float32)
    return frames[:, None].astype(np.float32), targets, labels[:, 4].astype(int)


GENERATORS = {"separable", "patterns", "scenes"}


def make(kind, n, seed):
    """Dataset by name for the CLI: returns ``(X, y)`` (regression targets for scenes)."""
    if kind == "separable":
        return separable(n, seed)
    if kind == "patterns":
        return patterns(max(1, n // 10), seed)
    if kind == "scenes":
        X, t, _ = scenes(n, seed)
        return X, t
    raise ValueError(f"unknown dataset {kind!r}; expected one of {sorted(GENERATORS)}")
