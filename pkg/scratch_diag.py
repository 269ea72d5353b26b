"""Scratch: 60-frame run with per-frame diagnostics."""
import numpy as np

from stereo_vo.config import PipelineConfig
from stereo_vo.pipeline import Pipeline
from stereo_vo.synthetic import SyntheticManifest, corridor_scene
from stereo_vo.geometry import rotation_angle

scene = corridor_scene(num_frames=60, step=1.5, half_width=7.0)
manifest = SyntheticManifest(scene)
gt = manifest.ground_truth_poses()
cfg = PipelineConfig(active_points=600, candidate_budget=600, output_dir="/tmp/diag")
p = Pipeline(manifest, cfg)
orig = p._handle_keyframe


def spy(frame_index, pyr_left, t_wc, affine):
    orig(frame_index, pyr_left, t_wc, affine)
    pts = p.window.points
    d = np.array([q.inv_depth for q in pts])
    kf = p.window.keyframes[-1]
    err = np.linalg.norm(kf.t_wc.translation - gt[frame_index].translation)
    rot = rotation_angle(kf.t_wc.rotation.T @ gt[frame_index].rotation)
    n_st = sum(1 for q in pts if q.stereo_outlier)
    print("f%02d err %.3f rot %.5f | pts %d idep med %.4f st_out %d aL %.2f bL %.1f"
          % (frame_index, err, rot, len(pts), np.median(d), n_st,
             kf.affine_left.a, kf.affine_left.b), flush=True)


p._handle_keyframe = spy
res = p.run()
errs = [np.linalg.norm(res.trajectory[i].translation - gt[i].translation)
        for i in range(len(res.trajectory))]
print("final errors:", " ".join("%.2f" % e for e in errs), flush=True)
