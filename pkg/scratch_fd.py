"""Scratch: finite-difference verification of the analytic Jacobians."""
import numpy as np

from stereo_vo.geometry import PinholeIntrinsics, Se3, StereoRig, se3_exp
from stereo_vo.image import build_pyramid, make_image
from stereo_vo.tracker import AffineBrightness
from stereo_vo.window_optimizer import (ActivePoint, Keyframe, jacobian_static,
                                        jacobian_temporal, residual_static,
                                        residual_temporal)

rng = np.random.default_rng(42)
W, H = 96, 72


def bilinear_image(rng):
    """Image whose bilinear interpolant's derivative equals the interpolated
    central-difference gradient field exactly."""
    a, b, g = rng.uniform(-3, 3, 3)
    d = rng.uniform(50, 150)
    x, y = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    return make_image(a * x + b * y + 0.05 * g * x * y + d)


def make_kf(kf_id, img, t_wc, a=0.0, b=0.0, ar=0.0, br=0.0):
    pyr = build_pyramid(img, 1)
    return Keyframe(kf_id, kf_id, 0.0, pyr, pyr, t_wc,
                    AffineBrightness(a, b), AffineBrightness(ar, br))


def random_config(rng):
    intr = PinholeIntrinsics(80.0 + rng.uniform(-5, 5), 80.0 + rng.uniform(-5, 5),
                             W / 2 + rng.uniform(-2, 2), H / 2 + rng.uniform(-2, 2), W, H)
    host_img = bilinear_image(rng)
    target_img = bilinear_image(rng)
    t_host = se3_exp(np.concatenate([rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.1, 0.1, 3)]))
    t_target = se3_exp(np.concatenate([rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.1, 0.1, 3)]))
    host = make_kf(0, host_img, t_host, *rng.uniform(-0.2, 0.2, 4))
    target = make_kf(1, target_img, t_target, *rng.uniform(-0.2, 0.2, 4))
    uv = np.array([rng.uniform(20, W - 20), rng.uniform(15, H - 15)])
    d = rng.uniform(0.1, 1.0)
    pt = ActivePoint(0, 0, uv, d, host_int=rng.uniform(50, 150, 8), weights=np.ones(8))
    return intr, host, target, pt


def fd_temporal(pt, host, target, intr):
    """(8, 21) central finite differences of the temporal residual."""
    cols = []
    def res(h, t, p, k):
        r, v = residual_temporal(p, h, t, k)
        return r, v

    eps_pose, eps_affine = 1e-6, 1e-4
    base_valid = res(host, target, pt, intr)[1]
    import dataclasses
    # host pose, target pose
    for which in ("host", "target"):
        for k in range(6):
            e = np.zeros(6); e[k] = eps_pose
            if which == "host":
                hp = dataclasses.replace(host, t_wc=se3_exp(e) @ host.t_wc)
                hm = dataclasses.replace(host, t_wc=se3_exp(-e) @ host.t_wc)
                rp, _ = res(hp, target, pt, intr); rm, _ = res(hm, target, pt, intr)
            else:
                tp = dataclasses.replace(target, t_wc=se3_exp(e) @ target.t_wc)
                tm = dataclasses.replace(target, t_wc=se3_exp(-e) @ target.t_wc)
                rp, _ = res(host, tp, pt, intr); rm, _ = res(host, tm, pt, intr)
            cols.append((rp - rm) / (2 * eps_pose))
    # depth
    pp = dataclasses.replace(pt, inv_depth=pt.inv_depth + eps_pose)
    pm = dataclasses.replace(pt, inv_depth=pt.inv_depth - eps_pose)
    cols.append((res(host, target, pp, intr)[0] - res(host, target, pm, intr)[0]) / (2 * eps_pose))
    # intrinsics
    for k in range(4):
        v = intr.as_vector()
        vp = v.copy(); vp[k] += eps_pose
        vm = v.copy(); vm[k] -= eps_pose
        kp = PinholeIntrinsics(vp[0], vp[1], vp[2], vp[3], intr.width, intr.height)
        km = PinholeIntrinsics(vm[0], vm[1], vm[2], vm[3], intr.width, intr.height)
        cols.append((res(host, target, pt, kp)[0] - res(host, target, pt, km)[0]) / (2 * eps_pose))
    # affine a_i, b_i, a_j, b_j
    for which, attr in (("host", "a"), ("host", "b"), ("target", "a"), ("target", "b")):
        kfobj = host if which == "host" else target
        aff = kfobj.affine_left
        ap = AffineBrightness(aff.a + (eps_affine if attr == "a" else 0),
                              aff.b + (eps_affine if attr == "b" else 0))
        am = AffineBrightness(aff.a - (eps_affine if attr == "a" else 0),
                              aff.b - (eps_affine if attr == "b" else 0))
        if which == "host":
            rp, _ = res(dataclasses.replace(host, affine_left=ap), target, pt, intr)
            rm, _ = res(dataclasses.replace(host, affine_left=am), target, pt, intr)
        else:
            rp, _ = res(host, dataclasses.replace(target, affine_left=ap), pt, intr)
            rm, _ = res(host, dataclasses.replace(target, affine_left=am), pt, intr)
        cols.append((rp - rm) / (2 * eps_affine))
    return np.stack(cols, axis=1), base_valid


n_checked = 0
worst = 0.0
for trial in range(200):
    intr, host, target, pt = random_config(rng)
    jac, r, valid = jacobian_temporal(pt, host, target, intr)
    if not np.all(valid):
        continue
    fd, _ = fd_temporal(pt, host, target, intr)
    err = np.abs(jac - fd)
    rel = err / np.maximum(np.abs(fd), 1e-5 / 1e-3)
    bad = rel.max()
    worst = max(worst, bad)
    n_checked += 1
    if bad > 1e-3:
        print("FAIL", trial, bad, np.unravel_index(rel.argmax(), rel.shape))
        print("analytic", jac[np.unravel_index(rel.argmax(), rel.shape)])
        print("fd      ", fd[np.unravel_index(rel.argmax(), rel.shape)])
        break
print(f"temporal: checked {n_checked}, worst scaled error {worst:.2e}")
