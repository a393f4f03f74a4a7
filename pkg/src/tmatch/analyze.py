"""Analysis of a trained template network: patch score export, k-means
over score vectors, nearest-patch lookup and feature-to-input crop
mapping.

The patch CSV is the interchange format: one row per (image, feature
pixel) with the softmaxed class scores s_*, the mixed weights m_* that
fed the value table, and the embedded feature e_*. Floats are written
with repr so parsing them back is lossless and re-export is
byte-identical.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PatchRecord:
    image_index: int
    y: int
    x: int
    true_label: int
    predicted_label: int
    entropy: float
    scores: np.ndarray     # softmaxed patch scores, length c
    mixing: np.ndarray     # mixed (non-negative) weights, length c
    embedding: np.ndarray  # value-table output, length d_value


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def score_entropy(scores):
    """Shannon entropy in nats of an already-normalized score vector."""
    s = np.asarray(scores, dtype=np.float64)
    nz = s[s > 0]
    return float(-(nz * np.log(nz)).sum())


def export_patches(network, dataset, per_class, seed=0, batch_size=64):
    """Patch records for ``per_class`` images of each class, eval mode.

    Images are sampled per class from their own shuffle of a stream keyed
    by ``seed``; records come back sorted by (image_index, y, x), where
    image_index points into ``dataset``.
    """
    if network.template is None:
        raise ValueError("patch export needs a network with a template block")
    per_class = int(per_class)
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    gen = np.random.Generator(np.random.Philox(key=seed))
    chosen = []
    for c in range(dataset.num_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        if idx.size < per_class:
            raise ValueError(
                f"class {c} has {idx.size} images, cannot sample {per_class}")
        gen.shuffle(idx)
        chosen.append(idx[:per_class])
    chosen = np.sort(np.concatenate(chosen))

    records = []
    for start in range(0, chosen.size, batch_size):
        idx = chosen[start:start + batch_size]
        batch = dataset.images[idx].astype(np.float64) / 255.0
        result = network.forward(batch, train=False)
        predicted = np.argmax(result.main_logits.data, axis=1)
        scores = result.block.patch_scores.data
        mixing = result.block.mixing.data
        embedding = result.block.f_prime.data
        n, c, h, w = scores.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    s = _softmax(scores[b, :, y, x])
                    records.append(PatchRecord(
                        image_index=int(idx[b]), y=y, x=x,
                        true_label=int(dataset.labels[idx[b]]),
                        predicted_label=int(predicted[b]),
                        entropy=score_entropy(s),
                        scores=s,
                        mixing=mixing[b, :, y, x].copy(),
                        embedding=embedding[b, :, y, x].copy()))
    return records


def patches_to_csv(records):
    if not records:
        raise ValueError("no patch records to export")
    c = records[0].scores.size
    d = records[0].embedding.size
    header = (["image_index", "y", "x", "true_label", "predicted_label", "entropy"]
              + [f"s_{i}" for i in range(c)]
              + [f"m_{i}" for i in range(c)]
              + [f"e_{i}" for i in range(d)])
    lines = [",".join(header)]
    for r in records:
        cells = [str(r.image_index), str(r.y), str(r.x), str(r.true_label),
                 str(r.predicted_label), repr(r.entropy)]
        cells += [repr(float(v)) for v in r.scores]
        cells += [repr(float(v)) for v in r.mixing]
        cells += [repr(float(v)) for v in r.embedding]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_patches_csv(records, path):
    with open(path, "wb") as fh:
        fh.write(patches_to_csv(records).encode("utf-8"))


def read_patches_csv(path):
    with open(path, "rb") as fh:
        lines = fh.read().decode("utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty patch file")
    header = lines[0].split(",")
    c = sum(1 for name in header if name.startswith("s_"))
    d = sum(1 for name in header if name.startswith("e_"))
    records = []
    for line in lines[1:]:
        cells = line.split(",")
        records.append(PatchRecord(
            image_index=int(cells[0]), y=int(cells[1]), x=int(cells[2]),
            true_label=int(cells[3]), predicted_label=int(cells[4]),
            entropy=float(cells[5]),
            scores=np.array([float(v) for v in cells[6:6 + c]]),
            mixing=np.array([float(v) for v in cells[6 + c:6 + 2 * c]]),
            embedding=np.array([float(v) for v in cells[6 + 2 * c:6 + 2 * c + d]])))
    return records


# ---------------------------------------------------------------------
# k-means over score vectors
# ---------------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list


def kmeans(points, k, seed=0, max_iter=100):
    """Lloyd's algorithm with k-means++ seeding.

    Stops on an assignment fixpoint or after ``max_iter`` rounds. An
    empty cluster is reseeded to the point farthest from its center.
    The recorded inertia never increases from one iteration to the next.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError(f"points must be a non-empty [N, D] array, got {points.shape}")
    k = int(k)
    n = points.shape[0]
    distinct = np.unique(points, axis=0).shape[0]
    if not 1 <= k <= distinct:
        raise ValueError(f"k must lie in [1, {distinct}] (distinct points), got {k}")

    gen = np.random.Generator(np.random.Philox(key=seed))
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[gen.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum()
        centers[j] = points[gen.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))

    assignments = np.full(n, -1)
    history = []
    for iteration in range(1, max_iter + 1):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for j in np.nonzero(counts == 0)[0]:
            farthest = int(dists[np.arange(n), new_assign].argmax())
            centers[j] = points[farthest]
            dists[:, j] = ((points - centers[j]) ** 2).sum(axis=1)
            new_assign = dists.argmin(axis=1)
            counts = np.bincount(new_assign, minlength=k)
        inertia = float(dists[np.arange(n), new_assign].sum())
        if history and inertia > history[-1] + 1e-9:
            raise RuntimeError(
                f"inertia rose from {history[-1]} to {inertia} at iteration {iteration}")
        history.append(inertia)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            centers[j] = points[assignments == j].mean(axis=0)
    return KMeansResult(centers=centers, assignments=assignments,
                        inertia=history[-1], iterations=len(history),
                        inertia_history=history)


def nearest_patches(records, centers, top_n=16):
    """Per center, the ``top_n`` records with the closest score vectors.

    Distance ties keep the earlier record, so the result is deterministic
    for a fixed record order.
    """
    scores = np.stack([r.scores for r in records])
    out = []
    for center in np.asarray(centers, dtype=np.float64):
        d2 = ((scores - center) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")[:top_n]
        out.append([records[i] for i in order])
    return out


def crop_patch(image, y, x, window, stride):
    """Input crop a feature pixel's patch window covers.

    Feature pixel (y, x) with window (wh, ww) under a total stage stride
    ``stride`` maps to input rows [y*stride, (y+wh)*stride) and likewise
    for columns, clipped to the image. Returns (crop, (r0, r1, c0, c1)).
    """
    _, h, w = image.shape
    wh, ww = window
    if y < 0 or x < 0:
        raise ValueError(f"negative feature coordinates ({y}, {x})")
    r0, r1 = y * stride, (y + wh) * stride
    c0, c1 = x * stride, (x + ww) * stride
    if r0 >= h or c0 >= w:
        raise ValueError(
            f"feature pixel ({y}, {x}) maps to rows [{r0}, {r1}) cols [{c0}, {c1}), "
            f"outside a {h}x{w} image")
    r1, c1 = min(r1, h), min(c1, w)
    return image[:, r0:r1, c0:c1], (r0, r1, c0, c1)
