"""Scratch: end-to-end drift experiments on corridor variants."""
import sys
import time

import numpy as np

from stereo_vo.config import PipelineConfig
from stereo_vo.evaluation import kitti_relative_errors
from stereo_vo.geometry import rotation_angle
from stereo_vo.pipeline import Pipeline
from stereo_vo.synthetic import SyntheticManifest, corridor_scene


def experiment(label, scene, n_active=600, budget=600, max_frames=None):
    manifest = SyntheticManifest(scene)
    cfg = PipelineConfig(active_points=n_active, candidate_budget=budget,
                         output_dir="/tmp/e2e")
    p = Pipeline(manifest, cfg)
    t0 = time.time()
    try:
        res = p.run(max_frames=max_frames)
    except Exception as exc:
        print(f"{label}: EXCEPTION {exc}")
        return
    gt = manifest.ground_truth_poses()[: len(res.trajectory)]
    errs = [np.linalg.norm(res.trajectory[i].translation - gt[i].translation)
            for i in range(len(res.trajectory))]
    rot = [rotation_angle(res.trajectory[i].rotation.T @ gt[i].rotation)
           for i in range(len(res.trajectory))]
    msg = (f"{label}: done={res.completed} n={len(errs)} "
           f"err(max {max(errs):.3f}, final {errs[-1]:.3f} m) "
           f"rot(max {np.degrees(max(rot)):.4f} deg) {time.time()-t0:.0f}s")
    try:
        rep = kitti_relative_errors(gt, res.trajectory,
                                    manifest.timestamps[: len(errs)])
        if not rep.empty:
            msg += f" | t_rel {rep.t_rel:.3f}%% r_rel {rep.r_rel:.4f} deg/100m ({rep.num_segments} seg)"
    except Exception as exc:
        msg += f" | eval err: {exc}"
    print(msg)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "A"
    n = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    if which == "A":
        scene = corridor_scene(num_frames=n, step=1.5, half_width=7.0)
    elif which == "B":
        scene = corridor_scene(num_frames=n, step=1.5, half_width=5.0)
    elif which == "C":
        scene = corridor_scene(num_frames=n, step=1.2, half_width=5.0)
    elif which == "D":
        scene = corridor_scene(num_frames=n, step=1.5, half_width=5.0,
                               tex_scale=0.4, octaves=4, gain=0.8)
    experiment(which + f"-{n}", scene)
