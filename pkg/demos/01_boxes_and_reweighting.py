"""Oriented boxes, rotated IoU and the hard-negative reweighting curve."""

import math

import numpy as np

from saod.geometry import OrientedBox, corners, rotated_iou, rotated_nms
from saod.loss import AhrConfig, ahr_loss

# A box is (cx, cy, w, h, theta) with the long edge as width.
# Swapping the edges is the same rectangle turned by 90 degrees.
a = OrientedBox(0.0, 0.0, 4.0, 2.0, 0.0)
print(OrientedBox(0.0, 0.0, 2.0, 4.0, 0.0))
print(np.round(corners(a), 3))

# IoU falls smoothly as the second box turns about the common center.
for deg in (0, 15, 30, 45, 60, 90):
    b = OrientedBox(0.0, 0.0, 4.0, 2.0, math.radians(deg))
    print(f"turned {deg:>2} deg  IoU {rotated_iou(a, b):.4f}")

# Two unit squares, one turned 45 degrees: the overlap is a regular octagon.
inter = 2 * (math.sqrt(2) - 1)
print("octagon IoU", rotated_iou(OrientedBox(0, 0, 1, 1), OrientedBox(0, 0, 1, 1, math.pi / 4)),
      "closed form", inter / (2 - inter))

# NMS keeps the best of each overlapping cluster.
boxes = [a, OrientedBox(0.2, 0.1, 4.0, 2.0, 0.1), OrientedBox(6, 6, 3, 1, 0.5)]
print("kept", rotated_nms(boxes, [0.9, 0.8, 0.7], iou_thr=0.3))

# Negative-sample loss against the predicted probability. Above thr the
# weight w shrinks the loss, so confident "negatives" (often unlabeled
# objects) pull the detector down less.
p = np.array([0.1, 0.5, 0.85, 0.9, 0.95, 0.99])
print("p        ", p)
for w in (1.0, 0.5, 0.15):
    for mode in ("standard-focal", "as-written"):
        loss, _ = ahr_loss(p, False, AhrConfig(thr=0.9, w=w, mode=mode))
        print(f"w={w:<4} {mode:<15}", np.round(loss, 4))
