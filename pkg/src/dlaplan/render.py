"""Side-by-side result panels: input | ground truth | prediction.

Both label panels use one combined palette. A boundary class (wall,
door/window) wins over the room class underneath it, so combined index ``k``
is::

    0                         background
    1 .. n_boundary-1         boundary class k
    n_boundary .. (+n_room-2) room class k - n_boundary + 1

Panels are separated by one column of ``SEPARATOR_RGB``, which is not in the
palette, so an image of width W yields a panel of width ``3 * W + 2``.
"""
from __future__ import annotations

import numpy as np

PALETTE = np.array([
    (255, 255, 255),  # background
    (0, 0, 0),        # wall
    (230, 25, 75),    # door / window
    (245, 130, 48),   # closet
    (0, 130, 200),    # bathroom
    (255, 225, 25),   # living room
    (145, 30, 180),   # bedroom
    (60, 180, 75),    # hall
    (70, 240, 240),   # balcony
    (128, 128, 0),
    (0, 0, 128),
    (170, 110, 40),
], dtype=np.uint8)
SEPARATOR_RGB = (255, 0, 255)


def combine_labels(boundary, room, n_boundary=3):
    """Merge the two label maps into one combined index map."""
    boundary = np.asarray(boundary, np.int64)
    room = np.asarray(room, np.int64)
    out = np.where(room > 0, room + n_boundary - 1, 0)
    return np.where(boundary > 0, boundary, out)


def colorize(combined):
    """(H, W) combined labels -> (3, H, W) uint8 using :data:`PALETTE`."""
    combined = np.asarray(combined)
    if combined.max(initial=0) >= len(PALETTE):
        raise ValueError(f"palette has {len(PALETTE)} colours; label {int(combined.max())} needs more")
    return PALETTE[combined].transpose(2, 0, 1).copy()


def panel(image_rgb, gt_boundary, gt_room, pred_boundary, pred_room, n_boundary=3):
    """Stack input, ground truth and prediction horizontally with 1-px separators."""
    image_rgb = np.asarray(image_rgb, np.uint8)
    _, h, _ = image_rgb.shape
    sep = np.empty((3, h, 1), np.uint8)
    sep[:, :, 0] = np.array(SEPARATOR_RGB, np.uint8)[:, None]
    gt = colorize(combine_labels(gt_boundary, gt_room, n_boundary))
    pred = colorize(combine_labels(pred_boundary, pred_room, n_boundary))
    return np.concatenate([image_rgb, sep, gt, sep, pred], axis=2)
