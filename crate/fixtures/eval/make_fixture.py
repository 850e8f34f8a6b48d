"""Builds the golden evaluation fixture with a brute-force reference evaluator.

Writes gts/<video>.json annotation files, preds.json and expected_<protocol>.json.
The evaluator below is written from the definition: greedy highest-score-first
matching to the best-overlapping unmatched ground truth, all-point interpolated
AP, classes without ground truth excluded.
"""
import json
import os
import random

HERE = os.path.dirname(os.path.abspath(__file__))
PROTOCOLS = {
    "activitynet": [(50 + 5 * i) / 100 for i in range(10)],
    "thumos": [i / 10 for i in range(3, 8)],
}


def tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(hits, n_gt):
    ap = 0.0
    for k, hit in enumerate(hits):
        if not hit:
            continue
        best = 0.0
        for j in range(k, len(hits)):
            best = max(best, sum(hits[: j + 1]) / (j + 1))
        ap += best / n_gt
    return ap


def evaluate(preds, gts, thresholds):
    classes = sorted({g["class_id"] for v in gts.values() for g in v})
    per = {}
    for thr in thresholds:
        aps = []
        for c in classes:
            gt = {v: [g for g in lst if g["class_id"] == c] for v, lst in gts.items()}
            n_gt = sum(len(x) for x in gt.values())
            dets = [(v, d) for v in sorted(preds) for d in preds[v] if d["class_id"] == c]
            dets.sort(key=lambda p: -p[1]["score"])
            taken = {v: [False] * len(x) for v, x in gt.items()}
            hits = []
            for v, d in dets:
                best_j, best_o = None, -1.0
                for j, g in enumerate(gt.get(v, [])):
                    if taken[v][j]:
                        continue
                    o = tiou((d["t_start"], d["t_end"]), (g["t_start"], g["t_end"]))
                    if o > best_o:
                        best_j, best_o = j, o
                hit = best_j is not None and best_o >= thr
                if hit:
                    taken[v][best_j] = True
                hits.append(hit)
            aps.append(average_precision(hits, n_gt))
        per[thr] = sum(aps) / len(aps)
    return per, sum(per.values()) / len(per)


def main():
    rng = random.Random(20240601)
    gts, preds = {}, {}
    n_gt = n_pred = 0
    for i in range(8):
        vid = f"video_{i:02d}"
        duration = 60.0
        cursor, inst = 0.0, []
        while len(inst) < 6:
            start = cursor + rng.uniform(0.5, 6.0)
            end = start + rng.uniform(1.0, 8.0)
            if end > duration:
                break
            inst.append({"t_start": round(start, 3), "t_end": round(end, 3), "class_id": rng.randrange(3)})
            cursor = end
        gts[vid] = inst
        n_gt += len(inst)
        det = []
        for g in inst:
            for _ in range(rng.randint(1, 3)):
                jitter = lambda: rng.gauss(0.0, 0.6)
                s, e = g["t_start"] + jitter(), g["t_end"] + jitter()
                s = max(0.0, s)
                if e <= s + 0.05:
                    e = s + 0.5
                c = g["class_id"] if rng.random() < 0.85 else rng.randrange(3)
                det.append({"t_start": round(s, 4), "t_end": round(e, 4), "class_id": c})
        for _ in range(rng.randint(2, 6)):
            s = rng.uniform(0.0, duration - 5.0)
            det.append({"t_start": round(s, 4), "t_end": round(s + rng.uniform(0.5, 5.0), 4), "class_id": rng.randrange(3)})
        for d in det:
            d["score"] = round(rng.uniform(0.01, 0.99), 6)
        preds[vid] = det
        n_pred += len(det)
    os.makedirs(os.path.join(HERE, "gts"), exist_ok=True)
    for vid, inst in gts.items():
        with open(os.path.join(HERE, "gts", f"{vid}.json"), "w") as f:
            json.dump({"duration_s": 60.0, "instances": inst}, f, indent=2)
            f.write("\n")
    with open(os.path.join(HERE, "preds.json"), "w") as f:
        json.dump(preds, f, indent=1)
        f.write("\n")
    for name, thresholds in PROTOCOLS.items():
        per, avg = evaluate(preds, gts, thresholds)
        out = {"per_threshold": {f"{t:.2f}": m for t, m in per.items()}, "average_mAP": avg}
        with open(os.path.join(HERE, f"expected_{name}.json"), "w") as f:
            json.dump(out, f, indent=2)
            f.write("\n")
    print(f"{n_gt} ground-truth and {n_pred} predicted instances")


if __name__ == "__main__":
    main()
