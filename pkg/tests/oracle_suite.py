"""Random-instance comparison of the library operators against the loop oracles."""
import numpy as np
import torch

import oracles as O
from helpers import from_t, random_cross, random_fields, spaces_of, to_lab, to_t
from usmsma import ensemble_core as E
from usmsma import losses as L


def _instance(rng):
    target, spaces = O.random_problem(rng)
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return target, spaces, h, w


def _perm(rng, k):
    return [int(v) for v in rng.permutation(k)]


def check_ensemble(rng):
    target, spaces, h, w = _instance(rng)
    f = random_fields(rng, spaces, h, w)
    S, T = spaces_of(spaces), E.LabelSpace(tuple(target))
    a = from_t(E.ensemble_logits([to_t(x) for x in f], S, T))
    b = O.ens_logits(f, spaces, target)
    p = from_t(E.ensemble_predict([to_t(x) for x in f], S, T))
    q = O.ens_predict(f, spaces, target)
    return max(np.abs(a - b).max(), np.abs(p - q).max())


def check_cast(rng):
    target, spaces, h, w = _instance(rng)
    T = E.LabelSpace(tuple(target))
    probs = [O.random_prob(rng, h, w, 1 + len(s)) for s in spaces]
    casts = [from_t(E.cast_probability(to_t(p), E.LabelSpace(tuple(s)), T)) for p, s in zip(probs, spaces)]
    ref = [O.cast(p, s, target) for p, s in zip(probs, spaces)]
    avg = from_t(E.average_cast([to_t(c) for c in casts]))
    return max(max(np.abs(a - b).max() for a, b in zip(casts, ref)),
               np.abs(avg - O.average(ref)).max())


def check_deltas(rng):
    target, spaces, h, w = _instance(rng)
    k = len(spaces)
    S, T = spaces_of(spaces), E.LabelSpace(tuple(target))
    ma = _perm(rng, k)
    rec = [rng.normal(size=(h, w, 1 + len(spaces[m]))) for m in ma]
    d = from_t(E.average_logits_delta([to_t(r) for r in rec], [S[m] for m in ma], T))
    ref = O.ens_logits(rec, [spaces[m] for m in ma], target)
    per = random_fields(rng, spaces, h, w)
    di = from_t(E.average_logits_delta_i([to_t(x) for x in per], S, T))
    return max(np.abs(d - ref).max(), np.abs(di - O.ens_logits(per, spaces, target)).max())


def check_ce(rng):
    target, spaces, h, w = _instance(rng)
    c = len(target) + 1
    lg = rng.normal(scale=2.0, size=(h, w, c))
    lab = O.random_labels(rng, h, w, c, p_ignore=float(rng.choice([0.0, 0.3, 1.0])))
    return abs(L.ce_loss(to_t(lg), to_lab(lab)).item() - O.ce(lg, lab))


def check_pl(rng):
    target, spaces, h, w = _instance(rng)
    S, T = spaces_of(spaces), E.LabelSpace(tuple(target))
    cross = random_cross(rng, spaces, h, w)
    y_src = [O.random_labels(rng, h, w, 1 + len(s)) for s in spaces]
    y_tgt = O.random_labels(rng, h, w, len(target))
    got = L.loss_pl([[to_t(x) for x in row] for row in cross], S, T,
                    [to_lab(y) for y in y_src], to_lab(y_tgt)).item()
    return abs(got - O.loss_pl(cross, spaces, target, y_src, y_tgt))


def check_cm(rng):
    target, spaces, h, w = _instance(rng)
    k = len(spaces)
    S, T = spaces_of(spaces), E.LabelSpace(tuple(target))
    ma = _perm(rng, k)
    cross = random_cross(rng, spaces, h, w)
    orig = [cross[i][i] for i in range(k)]
    rec = [cross[i][ma[i]] for i in range(k)]
    p = O.ens_predict(orig, spaces, target)
    q = O.ens_predict(rec, [spaces[m] for m in ma], target)
    e1 = abs(L.loss_cm1(to_t(p), to_t(q)).item() - O.loss_cm1(p, q))
    got = L.loss_cm2([to_t(r) for r in rec], S, ma, T).item()
    return max(e1, abs(got - O.loss_cm2(rec, spaces, ma, target)))


def check_adv(rng):
    target, spaces, h, w = _instance(rng)
    S, T = spaces_of(spaces), E.LabelSpace(tuple(target))
    cross = random_cross(rng, spaces, h, w)
    y_src = [O.random_labels(rng, h, w, 1 + len(s)) for s in spaces]
    tc = [[to_t(x) for x in row] for row in cross]
    ty = [to_lab(y) for y in y_src]
    e1 = abs(L.loss_C(tc, ty).item() - O.loss_C(cross, y_src))
    e2 = abs(L.loss_B(tc, S, T, ty).item() - O.loss_B(cross, spaces, target, y_src))
    return max(e1, e2)


def check_kd(rng):
    target, spaces, h, w = _instance(rng)
    st = random_fields(rng, spaces, h, w)
    te = random_fields(rng, spaces, h, w)
    got = L.loss_kd([to_t(x) for x in st], [to_t(x) for x in te]).item()
    return abs(got - O.loss_kd(st, te))


def check_msl(rng):
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = O.random_prob(rng, h, w, int(rng.integers(1, 6)))
    return abs(L.loss_maxsquares(to_t(p)).item() - O.maxsquares(p))


CHECKS = {
    "ensemble_logits/ensemble_predict": check_ensemble,
    "cast_probability/average_cast": check_cast,
    "average_logits_delta/_i": check_deltas,
    "ce": check_ce,
    "loss_pl": check_pl,
    "loss_cm1/loss_cm2": check_cm,
    "loss_C/loss_B": check_adv,
    "loss_kd": check_kd,
    "loss_maxsquares": check_msl,
}


def run(n_instances=200, seed=0):
    """Largest absolute deviation per operator over ``n_instances`` draws."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        return {name: max(fn(rng) for _ in range(n_instances)) for name, fn in CHECKS.items()}
