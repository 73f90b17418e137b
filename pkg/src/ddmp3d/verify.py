"""Gradient verification suites behind the ``gradcheck`` CLI command.

Each scope builds deterministic fixtures (seeded, margins kept away from
ReLU kinks, bilinear lattice points and pooling ties) and runs the
central-difference checker over them.
"""

import numpy as np

from .autograd import Tensor, gradcheck, ops
from . import ddmp as ddmp_mod
from .head import (CdeParams, HeadParams, cde_head_forward, head_forward,
                   init_cde_params, init_head_params)
from .losses import (LossConfig, auxiliary_depth_loss, classification_loss,
                     detection_loss, total_loss)


def _rng(seed, salt):
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def _away_from(x, points, margin):
    """Push values a margin away from the listed non-smooth points."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin, x)
    return x


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def check_primitives(seed=0, eps=1e-5, tol=1e-4):
    checks = []
    r = lambda salt: _rng(seed, salt)

    a = _t(r(1).normal(size=8))
    b = _t(r(2).normal(size=8))
    checks.append(("add_mul_chain", gradcheck(
        lambda a, b: ops.sum(ops.add(ops.mul(a, b), a)), [a, b],
        eps=eps, tol=tol, names=["a", "b"])))

    x = _t(r(3).normal(size=(2, 5)))
    checks.append(("exp", gradcheck(lambda x: ops.sum(ops.exp(x)), [x],
                                    eps=eps, tol=tol)))
    xp = _t(r(4).uniform(0.5, 2.0, size=7))
    checks.append(("log", gradcheck(lambda x: ops.sum(ops.log(x)), [xp],
                                    eps=eps, tol=tol)))
    xq = _t(r(5).uniform(0.2, 0.9, size=6))
    checks.append(("power_half", gradcheck(
        lambda x: ops.sum(ops.power(x, 0.5)), [xq], eps=eps, tol=tol)))

    xr = _t(_away_from(r(6).normal(size=12), [0.0], 10 * eps))
    checks.append(("relu", gradcheck(lambda x: ops.sum(ops.relu(x)), [xr],
                                     eps=eps, tol=tol)))

    xs = _t(r(7).normal(size=9))
    w9 = r(8).normal(size=9)
    checks.append(("softmax", gradcheck(
        lambda x: ops.sum(ops.mul(ops.softmax(x, 0), Tensor(w9))), [xs],
        eps=eps, tol=tol)))
    xl = _t(r(9).normal(size=(3, 4)))
    wl = r(10).normal(size=(3, 4))
    checks.append(("log_softmax", gradcheck(
        lambda x: ops.sum(ops.mul(ops.log_softmax(x, 1), Tensor(wl))), [xl],
        eps=eps, tol=tol)))

    ma = _t(r(11).normal(size=(3, 4)))
    mb = _t(r(12).normal(size=(4, 2)))
    checks.append(("matmul", gradcheck(
        lambda a, b: ops.sum(ops.matmul(a, b)), [ma, mb], eps=eps, tol=tol)))

    xm = _t(r(13).normal(size=(2, 3, 4)))
    wm = r(14).normal(size=(2, 4))
    checks.append(("mean_axis", gradcheck(
        lambda x: ops.sum(ops.mul(ops.mean(x, axis=1), Tensor(wm))), [xm],
        eps=eps, tol=tol)))

    c1 = _t(r(15).normal(size=(2, 3)))
    c2 = _t(r(16).normal(size=(2, 2)))
    wc = r(17).normal(size=(2, 3))
    checks.append(("concat_narrow", gradcheck(
        lambda a, b: ops.sum(ops.mul(
            ops.narrow(ops.concat([a, b], axis=1), 1, 1, 3), Tensor(wc))),
        [c1, c2], eps=eps, tol=tol)))

    g1 = _t(r(18).normal(size=(5, 3)))
    idx = np.array([4, 0, 2])
    checks.append(("gather_scatter", gradcheck(
        lambda x: ops.sum(ops.scatter_rows(ops.gather_rows(x, idx),
                                           np.array([1, 3, 5]), 7)),
        [g1], eps=eps, tol=tol)))

    hd = _t(_away_from(r(19).normal(size=10) * 1.5, [-1.0, 1.0], 10 * eps))
    checks.append(("huber", gradcheck(lambda x: ops.sum(ops.huber(x)), [hd],
                                      eps=eps, tol=tol)))

    for label, stride, dil, groups in (
            ("conv_s1", 1, 1, 1), ("conv_s2d2", 2, 2, 1), ("conv_g2", 1, 1, 2)):
        xi = _t(r(20).normal(size=(1, 4, 6, 6)))
        wi = _t(r(21).normal(size=(4, 4 // groups, 3, 3)) * 0.4)
        bi = _t(r(22).normal(size=4) * 0.1)
        wmix = r(23).normal(size=(1, 4, 1, 1))

        def fn(x, w, b, stride=stride, dil=dil, groups=groups):
            y = ops.conv2d(x, w, b, stride=stride, dilation=dil, groups=groups)
            return ops.sum(ops.mul(y, Tensor(np.broadcast_to(
                wmix, y.shape).copy())))

        checks.append((label, gradcheck(fn, [xi, wi, bi], eps=eps, tol=tol,
                                        names=["x", "w", "b"])))

    feat = _t(r(24).normal(size=(1, 3, 4, 4)))
    base = r(25).uniform(0.25, 0.7, size=(1, 2, 3, 3))
    coords = _t(base + np.array([1.0, 1.0]).reshape(1, 2, 1, 1))
    wb = r(26).normal(size=(1, 3, 3, 3))
    checks.append(("bilinear_sample", gradcheck(
        lambda f, c: ops.sum(ops.mul(ops.bilinear_sample(f, c), Tensor(wb))),
        [feat, coords], eps=eps, tol=tol, names=["feature", "coords"])))

    xpool = _t(r(27).normal(size=(1, 2, 6, 6)))
    checks.append(("maxpool", gradcheck(
        lambda x: ops.sum(ops.maxpool2d(x, 2, 2)), [xpool], eps=eps, tol=tol)))

    xrs = _t(r(28).normal(size=(1, 2, 5, 7)))
    wr = r(29).normal(size=(1, 2, 8, 10))
    checks.append(("resize_bilinear", gradcheck(
        lambda x: ops.sum(ops.mul(ops.resize(x, (8, 10)), Tensor(wr))), [xrs],
        eps=eps, tol=tol)))
    checks.append(("resize_nearest", gradcheck(
        lambda x: ops.sum(ops.mul(ops.resize(x, (8, 10), mode="nearest"),
                                  Tensor(wr))), [xrs], eps=eps, tol=tol)))

    smp = _t(r(30).normal(size=(1, 4, 9, 3, 4)))
    aff = _t(r(31).normal(size=(1, 9, 3, 4)))
    flt = _t(r(32).normal(size=(1, 9, 2, 3, 4)))
    wagg = r(33).normal(size=(1, 4, 3, 4))
    checks.append(("aggregate_nodes", gradcheck(
        lambda s, a, f: ops.sum(ops.mul(ops.aggregate_nodes(s, a, f),
                                        Tensor(wagg))),
        [smp, aff, flt], eps=eps, tol=tol,
        names=["sampled", "affinity", "filters"])))
    return checks


def ddmp_probe_fixture(seed=0, channels=4, hw=(6, 8), fusion_mode="concat_conv"):
    """Randomized block + inputs for the flagship full-block check: image
    1xCx6x8 and three depth stages at same / half / double resolution."""
    config = ddmp_mod.GraphConfig(channels=channels, depth_stages=(2, 3, 4),
                                  fusion_mode=fusion_mode)
    rng = _rng(seed, 100)
    params = ddmp_mod.randomized_params(config, rng)
    h, w = hw
    image = _t(rng.uniform(0.2, 1.0, size=(1, channels, h, w)))
    depths = {
        2: _t(rng.uniform(0.2, 1.0, size=(1, channels, h, w))),
        3: _t(rng.uniform(0.2, 1.0, size=(1, channels, h // 2, w // 2))),
        4: _t(rng.uniform(0.2, 1.0, size=(1, channels, 2 * h, 2 * w))),
    }
    return config, params, image, depths


def check_ddmp(seed=0, eps=1e-5, tol=1e-4):
    checks = []
    rng = _rng(seed, 200)

    # walks through the sampler to a scalar loss
    feat = _t(rng.uniform(0.2, 1.0, size=(1, 3, 5, 6)))
    wconv = ddmp_mod.ConvParams(
        _t(rng.normal(size=(18, 3, 3, 3)) * 0.02),
        _t(rng.uniform(0.25, 0.45, size=18)))
    wmix = rng.normal(size=(1, 3, 9, 5, 6))

    def walk_fn(f, w, b):
        walks = ddmp_mod.predict_walks(f, ddmp_mod.ConvParams(w, b))
        s = ddmp_mod.sample_nodes(f, walks)
        return ops.sum(ops.mul(s, Tensor(wmix)))

    checks.append(("walks_sampling", gradcheck(
        walk_fn, [feat, wconv.weight, wconv.bias], eps=eps, tol=tol,
        names=["feature", "walk_w", "walk_b"])))

    # full block, every parameter tensor included
    config, params, image, depths = ddmp_probe_fixture(seed)
    names = ["image", "depth2", "depth3", "depth4"]
    tensors = [image, depths[2], depths[3], depths[4]]
    for n, t in params.named("block"):
        names.append(n)
        tensors.append(t)
    out_shape = (1, 2 * config.channels, image.shape[2], image.shape[3])
    wout = _rng(seed, 201).normal(size=out_shape)

    def block_fn(img, d2, d3, d4, *param_tensors):
        y = ddmp_mod.ddmp_forward(img, {2: d2, 3: d3, 4: d4}, params, config)
        return ops.sum(ops.mul(y, Tensor(wout)))

    checks.append(("ddmp_block", gradcheck(
        block_fn, tensors, eps=eps, tol=tol, names=names)))

    fa = _t(rng.uniform(0.2, 1.0, size=(1, 3, 4, 5)))
    fb = _t(rng.uniform(0.2, 1.0, size=(1, 3, 4, 5)))
    checks.append(("baseline_fuse", gradcheck(
        lambda a, b: ops.sum(ddmp_mod.baseline_fuse(a, b)), [fa, fb],
        eps=eps, tol=tol, names=["image", "depth"])))
    return checks


def check_head(seed=0, eps=1e-5, tol=1e-4):
    checks = []
    rng = _rng(seed, 300)
    params = init_head_params(rng, in_channels=5, tower_channels=6,
                              num_anchors=2, num_classes=1)
    params.reg.weight = _t(rng.normal(size=params.reg.weight.shape) * 0.1)
    feat = _t(rng.uniform(0.2, 1.0, size=(1, 5, 3, 4)))
    wc = _rng(seed, 301).normal(size=(24, 2))
    wr = _rng(seed, 302).normal(size=(24, 11))

    def head_fn(f, tw, tb, cw, cb, rw, rb):
        p = HeadParams(tower=ddmp_mod.ConvParams(tw, tb),
                       cls=ddmp_mod.ConvParams(cw, cb),
                       reg=ddmp_mod.ConvParams(rw, rb))
        out = head_forward(f, p, num_anchors=2, num_classes=1)
        return ops.add(ops.sum(ops.mul(out.cls_rows, Tensor(wc))),
                       ops.sum(ops.mul(out.reg_rows, Tensor(wr))))

    checks.append(("head_forward", gradcheck(
        head_fn,
        [feat, params.tower.weight, params.tower.bias,
         params.cls.weight, params.cls.bias,
         params.reg.weight, params.reg.bias],
        eps=eps, tol=tol,
        names=["feature", "tower_w", "tower_b", "cls_w", "cls_b",
               "reg_w", "reg_b"])))

    cde = init_cde_params(rng, in_channels=4, tower_channels=5)
    cde.out.weight = _t(rng.normal(size=cde.out.weight.shape) * 0.2)
    dfeat = _t(rng.uniform(0.2, 1.0, size=(1, 4, 3, 4)))
    wmap = _rng(seed, 303).normal(size=(1, 3, 3, 4))

    def cde_fn(f, tw, tb, ow, ob):
        p = CdeParams(tower=ddmp_mod.ConvParams(tw, tb),
                      out=ddmp_mod.ConvParams(ow, ob))
        return ops.sum(ops.mul(cde_head_forward(f, p), Tensor(wmap)))

    checks.append(("cde_head", gradcheck(
        cde_fn, [dfeat, cde.tower.weight, cde.tower.bias,
                 cde.out.weight, cde.out.bias],
        eps=eps, tol=tol,
        names=["feature", "tower_w", "tower_b", "out_w", "out_b"])))
    return checks


def check_losses(seed=0, eps=1e-5, tol=1e-4):
    checks = []
    rng = _rng(seed, 400)

    logits = _t(rng.normal(size=(7, 3)))
    assigned = rng.integers(0, 3, size=7)
    checks.append(("classification", gradcheck(
        lambda x: classification_loss(x, assigned), [logits],
        eps=eps, tol=tol)))

    pred = _t(_away_from(rng.normal(size=(5, 11)) * 1.4, [-1.0, 1.0],
                         20 * eps))
    target = np.zeros((5, 11))
    m = 9
    cls2 = _t(rng.normal(size=(m, 2)))
    asg2 = rng.integers(0, 2, size=m)
    pos = np.array([1, 3, 5, 6, 8])

    def det_fn(c, p):
        d = detection_loss(c, asg2, p, target, pos)
        return d.total

    checks.append(("detection_loss", gradcheck(
        det_fn, [cls2, pred], eps=eps, tol=tol, names=["logits", "reg"])))

    cde_pred = _t(_away_from(rng.normal(size=(4, 3)), [-1.0, 1.0], 20 * eps))
    tgt3 = np.zeros((4, 3))
    checks.append(("aux_depth_xyz", gradcheck(
        lambda p: auxiliary_depth_loss(p, tgt3, "xyz"), [cde_pred],
        eps=eps, tol=tol)))

    cfg = LossConfig()

    def total_fn(c, p):
        d = detection_loss(c, asg2, p, target, pos)
        dep = auxiliary_depth_loss(cde_pred, tgt3, "xyz")
        return total_loss(d.per_sample, dep, d.scores, cfg)

    checks.append(("total_loss", gradcheck(
        total_fn, [cls2, pred], eps=eps, tol=tol, names=["logits", "reg"])))
    return checks


SCOPES = {
    "primitives": check_primitives,
    "ddmp": check_ddmp,
    "head": check_head,
    "losses": check_losses,
}


def run_scope(scope, seed=0, eps=1e-5, tol=1e-4):
    if scope == "all":
        names = list(SCOPES)
    elif scope in SCOPES:
        names = [scope]
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    for name in names:
        for label, report in SCOPES[name](seed=seed, eps=eps, tol=tol):
            results.append((f"{name}.{label}", report))
    return results
