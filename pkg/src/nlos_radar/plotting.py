"""Static bird's-eye-view figures."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _box_patch(ax, box, **kw):
    c = box.corners()
    ax.fill(c[:, 0], c[:, 1], fill=False, **kw)


def _velocity_segment(ax, box, scale=0.5):
    # red when the box moves toward the sensor origin, green when receding
    vx, vy = box.velocity_vector
    toward = vx * box.x + vy * box.y < 0
    ax.plot([box.x, box.x + scale * vx], [box.y, box.y + scale * vy], color="red" if toward else "green", lw=1.5)


def plot_bev_frame(path, *, walls=(), cloud=None, detections=(), tracks=(), ground_truth=(), sensor=(0.0, 0.0),
                   title="", extent=None):
    """One frame: radar points (virtual ones hollow), walls, boxes and velocity segments."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 5))
        for w in walls:
            ax.plot([w.p1[0], w.p2[0]], [w.p1[1], w.p2[1]], color="0.2", lw=2)
        if cloud is not None and len(cloud):
            virt = np.asarray(cloud.is_virtual, dtype=bool)
            pos, vpos = cloud.position, cloud.virtual_position
            ax.scatter(pos[~virt, 0], pos[~virt, 1], s=4, c="tab:blue", label="direct")
            ax.scatter(pos[virt, 0], pos[virt, 1], s=4, c="tab:orange", label="reconstructed")
            if vpos is not None:
                ax.scatter(vpos[virt, 0], vpos[virt, 1], s=4, facecolors="none", edgecolors="0.6", label="virtual")
        for g in ground_truth:
            _box_patch(ax, g, color="k", ls="--", lw=1)
        for d in detections:
            _box_patch(ax, d, color="tab:purple", lw=1)
        for t in tracks:
            _box_patch(ax, t, color="tab:red", lw=1.5)
            _velocity_segment(ax, t)
            ax.annotate(str(t.id), (t.x, t.y), fontsize=7, xytext=(3, 3), textcoords="offset points")
        ax.plot(*sensor, marker="^", color="k", ms=7)
        ax.set_aspect("equal")
        if extent is not None:
            ax.set_xlim(extent[0], extent[1])
            ax.set_ylim(extent[2], extent[3])
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title)
        handles, labels = ax.get_legend_handles_labels()
        if handles:
            ax.legend(loc="upper left")
        fig.savefig(path)
        plt.close(fig)


def plot_tracks_overview(path, *, walls=(), tracks_per_frame=(), ground_truth=(), sensor=(0.0, 0.0), title=""):
    """Trajectories of all reported tracks against ground-truth paths."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 5))
        for w in walls:
            ax.plot([w.p1[0], w.p2[0]], [w.p1[1], w.p2[1]], color="0.2", lw=2)
        gt_paths, trk_paths = {}, {}
        for frame in ground_truth:
            for b in frame.boxes:
                gt_paths.setdefault(b.id, []).append((b.x, b.y, frame.visibility[b.id] == "NLOS"))
        for boxes in tracks_per_frame:
            for b in boxes:
                trk_paths.setdefault(b.id, []).append((b.x, b.y))
        for oid, pts in gt_paths.items():
            p = np.array(pts)
            ax.plot(p[:, 0], p[:, 1], "k--", lw=1)
            nl = p[:, 2] > 0
            ax.scatter(p[nl, 0], p[nl, 1], s=6, c="k", marker="x")
        for tid, pts in trk_paths.items():
            p = np.array(pts)
            ax.plot(p[:, 0], p[:, 1], lw=1.2, label=f"track {tid}")
        ax.plot(*sensor, marker="^", color="k", ms=7)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title)
        if trk_paths:
            ax.legend(loc="upper left")
        fig.savefig(path)
        plt.close(fig)
