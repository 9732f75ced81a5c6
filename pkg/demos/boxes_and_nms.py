"""Box regression targets, greedy NMS and the dense candidate grid."""
import numpy as np

from hypernet import Box, decode, encode, generate_candidates, iou, nms

prop = np.array([[10.0, 10.0, 50.0, 30.0]])
gt = np.array([[14.0, 8.0, 60.0, 34.0]])
delta = encode(prop, gt)
print("deltas (tx, ty, tw, th):", np.round(delta[0], 4))
print("decoded back:", decode(prop, delta)[0])

boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30], [0, 0, 9, 10]], float)
scores = np.array([0.9, 0.8, 0.7, 0.95])
print("IoU(0, 1) =", round(iou(boxes[0], boxes[1]), 4))
print("kept after NMS@0.5:", nms(boxes, scores, 0.5))

# 9 candidates per stride-4 cell on a 128x128 image
cand = generate_candidates(32, 32, 4, (12, 24, 48), (0.5, 1, 2), image_bounds=(0, 0, 128, 128))
print("candidates:", cand.shape, "first:", Box(*(float(v) for v in cand[0].round(2))))
