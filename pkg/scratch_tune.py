"""Scratch: tune corridor texture for selection density vs warp consistency."""
import numpy as np
from stereo_vo.geometry import project_batch, PATTERN_MARGIN
from stereo_vo.image import build_pyramid, sample_bilinear_batch
from stereo_vo.point_selector import select_candidates
from stereo_vo.synthetic import corridor_scene, render


def warp_rms(scene, i=0, j=1, max_depth=None):
    li, di = render(scene, i, "left")
    lj, _ = render(scene, j, "left")
    intr = scene.intrinsics
    t_ji = scene.pose(j).inverse() @ scene.pose(i)
    h, w = li.intensities.shape
    ys, xs = np.mgrid[3:h-3, 3:w-3]
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    idep = di[3:h-3, 3:w-3].ravel()
    ok0 = idep > 0
    if max_depth:
        ok0 &= idep > 1.0 / max_depth
    uv, idep = uv[ok0], idep[ok0]
    uvj, _, ok = project_batch(uv, idep, t_ji, intr)
    it, _, _, v = sample_bilinear_batch(lj, uvj[ok], with_gradient=False)
    src = li.intensities[uv[ok][v][:, 1].astype(int), uv[ok][v][:, 0].astype(int)]
    r = it[v] - src
    return np.sqrt(np.mean(r ** 2)), np.percentile(np.abs(r), 99)


for ts, octv in [(0.25, 3), (0.5, 3), (0.5, 4), (1.0, 3), (0.7, 4)]:
    scene = corridor_scene(num_frames=5, tex_scale=ts, octaves=octv, half_width=6.0)
    img, _ = render(scene, 0, "left")
    gm = img.gradient_magnitude()
    pyr = build_pyramid(img, 5)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel = select_candidates(pyr, 800)
    rms, p99 = warp_rms(scene)
    rms25, _ = warp_rms(scene, max_depth=25)
    print(f"ts={ts} oct={octv}: grad p50={np.median(gm):.2f} p90={np.percentile(gm,90):.2f} "
          f"max={gm.max():.1f} | sel={len(sel)} | warpRMS={rms:.3f} p99={p99:.2f} rms(z<25)={rms25:.3f}")
