"""Central-difference gradient checks of the training losses on one-stage nets."""
import numpy as np
import torch

from usmsma.ensemble_core import LabelSpace, ensemble_logits, ensemble_predict
from usmsma.losses import loss_B, loss_C, loss_cm1, loss_cm2, loss_kd, loss_maxsquares, loss_pl
from usmsma.models import BackboneSpec, build_bundle, cross_logits

STEP = 1e-3
TOL = 1e-3
N_PARAMS = 100
# absolute floor so that exact zeros on both sides count as agreement
FLOOR = 1e-7


def _setup(seed=0):
    gen = torch.Generator().manual_seed(seed)
    spec = BackboneSpec(input_channels=3, feature_channels=4, depth=1, downsample=1)
    target = LabelSpace.full(3)
    spaces = [LabelSpace((0, 1)), LabelSpace((0, 2))]
    bundles = [build_bundle(spec, s, seed + i, torch.float64) for i, s in enumerate(spaces)]
    x = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    y_src = [torch.randint(0, 1 + len(s), (2, 4, 4), generator=gen) for s in spaces]
    y_tgt = torch.randint(0, 3, (2, 4, 4), generator=gen)
    teachers = [build_bundle(spec, s, seed + 10 + i, torch.float64) for i, s in enumerate(spaces)]
    return bundles, teachers, spaces, target, x, y_src, y_tgt


def losses(seed=0):
    bundles, teachers, spaces, target, x, y_src, y_tgt = _setup(seed)
    bbs = [b.backbone for b in bundles]
    cls = [b.classifier for b in bundles]
    ma = [1, 0]
    with torch.no_grad():
        t_logits = [t(x) for t in teachers]

    def cross():
        return cross_logits(bbs, cls, x)

    def pl():
        return loss_pl(cross(), spaces, target, y_src, y_tgt).value

    def cm1():
        c = cross()
        a = ensemble_predict([c[0][0], c[1][1]], spaces, target)
        b = ensemble_predict([c[0][ma[0]], c[1][ma[1]]], [spaces[m] for m in ma], target)
        return loss_cm1(a, b).value

    def cm2():
        c = cross()
        return loss_cm2([c[i][ma[i]] for i in range(2)], spaces, ma, target).value

    def adv_c():
        return loss_C(cross(), y_src).value

    def adv_b():
        return loss_B(cross(), spaces, target, y_src).value

    def kd():
        return loss_kd([c(bbs[0](x)) for c in cls], t_logits).value

    def msl():
        c = cross()
        return sum(loss_maxsquares(torch.softmax(ensemble_logits(c[i], spaces, target), 1)).value
                   for i in range(2))

    params = [p for m in bbs + cls for p in m.parameters()]
    return params, {"L_pl": pl, "L_cm1": cm1, "L_cm2": cm2, "L_C": adv_c,
                    "L_B": adv_b, "L_kd": kd, "L_msl": msl}


def check(fn, params, rng, n=N_PARAMS):
    """Fraction of sampled scalar parameters whose analytic and numeric gradients agree."""
    for p in params:
        p.grad = None
    fn().backward()
    sizes = [p.numel() for p in params]
    flat = rng.choice(sum(sizes), size=min(n, sum(sizes)), replace=False)
    ok = 0
    offsets = np.cumsum([0] + sizes)
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            p, j = params[pi], int(f - offsets[pi])
            g = 0.0 if p.grad is None else float(p.grad.view(-1)[j])
            orig = float(p.view(-1)[j])
            p.view(-1)[j] = orig + STEP
            up = float(fn())
            p.view(-1)[j] = orig - STEP
            down = float(fn())
            p.view(-1)[j] = orig
            num = (up - down) / (2 * STEP)
            rel = abs(g - num) / max(abs(g), abs(num), FLOOR)
            ok += rel < TOL or abs(g - num) < FLOOR
    return ok / len(flat)


def run(seed=0):
    params, fns = losses(seed)
    rng = np.random.default_rng(seed)
    return {name: check(fn, params, rng) for name, fn in fns.items()}
