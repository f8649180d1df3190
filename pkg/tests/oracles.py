"""Brute-force reference implementations used to check the library."""

import math


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def identification_counts(trials, thresholds):
    """Plain double loop over queries x records; returns the integer decision counts."""
    records = [(r.id, r.name, {m: None if t is None else t.vector.tolist() for m, t in
                               (("rgb", r.rgb), ("ir", r.ir))}) for r in trials.db]
    records.sort()

    def best(q):
        qv = q.values.tolist()
        top_name, top_sim = None, None
        for _, name, vecs in records:
            v = vecs[q.modality]
            if v is None:
                continue
            s = cosine(v, qv)
            if top_sim is None or s > top_sim:
                top_name, top_sim = name, s
        if top_sim is not None and top_sim >= thresholds[q.modality]:
            return top_name
        return None

    counts = {"fa": 0, "fr": 0, "mis": 0, "correct": 0}
    for label, queries in trials.registered:
        for q in queries:
            name = best(q)
            if name is None:
                counts["fr"] += 1
            elif name == label:
                counts["correct"] += 1
            else:
                counts["mis"] += 1
    for _, queries in trials.unregistered:
        for q in queries:
            if best(q) is None:
                counts["correct"] += 1
            else:
                counts["fa"] += 1
    return counts
