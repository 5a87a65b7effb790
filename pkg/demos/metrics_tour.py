"""Frame accuracy, segmental edit score and F1@tau on small label sequences.

    python demos/metrics_tour.py
"""

from g2lsearch import edit_score, f1_at_iou, framewise_accuracy, report
from g2lsearch.metrics import to_segments

gt = list("aaaabbbbbbccccaaaa")
over = list("aaaabbbcbbccccaaaa")   # one spurious frame splits a segment
shift = list("aaaaaabbbbbbccccaa")  # every boundary two frames late

ids = {c: i for i, c in enumerate("abc")}
gt_i, over_i, shift_i = ([ids[c] for c in s] for s in (gt, over, shift))

print("segments of the ground truth:", [(s.label, s.start, s.end) for s in to_segments(gt_i)])
for name, pred in (("over-segmented", over_i), ("shifted", shift_i)):
    print(f"\n{name}")
    print(f"  Acc  {framewise_accuracy(pred, gt_i):6.2f}")
    print(f"  Edit {edit_score(pred, gt_i):6.2f}")
    for tau in (0.1, 0.25, 0.5):
        print(f"  F1@{tau:<4} {f1_at_iou(pred, gt_i, tau):6.2f}")

rep = report([over_i, shift_i], [gt_i, gt_i])
print("\npooled over both videos:", rep.to_json())
