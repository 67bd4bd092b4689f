"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line and asserts the criterion at its stated tolerance.  Training runs are
cached so criteria sharing a configuration reuse the same seeds.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import dataclasses
import json
import time

import numpy as np

import oracle
from flatmatch import autodiff as ad
from flatmatch.cli import main as cli_main
from flatmatch.diagnostics import landscape_1d, landscape_2d
from flatmatch.losses import consistency_loss, cross_entropy, pseudo_targets
from flatmatch.model import MlpSpec, ParamVector, forward, init_params
from flatmatch.optim import (
    FlatMatchConfig,
    GradBuffer,
    SgdState,
    cross_sharpness,
    ema_update,
    flatmatch_step,
    labeled_loss_and_grad,
    sam_perturbation,
)
from flatmatch.trainers import TRAINERS, Run, TrainConfig

R = dataclasses.replace
SEEDS = range(10)
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs

_RUNS: dict[tuple, tuple] = {}


def acceptance_config(seed: int, labels_per_class: int = 4, rho: float | None = None, fixlabel: bool = False):
    cfg = TrainConfig(epochs=40, steps_per_epoch=50, eval_every=10, seed=seed)
    cfg = R(cfg, data=R(cfg.data, labels_per_class=labels_per_class))
    if rho is not None:
        cfg = R(cfg, flatmatch=R(cfg.flatmatch, rho=rho))
    if fixlabel:
        cfg = R(cfg, fixed_label=R(cfg.fixed_label, enabled=True))
    return cfg


def trained(method: str, seed: int, labels_per_class: int = 4, rho: float | None = None):
    """(record, seconds) for one cached run."""
    if rho is None or rho == FlatMatchConfig().rho:
        rho = None
    key = (method, seed, labels_per_class, rho)
    if key not in _RUNS:
        cfg = acceptance_config(seed, labels_per_class, rho, method == "flatmatch_fixlabel")
        t0 = time.perf_counter()
        res = TRAINERS[method](cfg)
        _RUNS[key] = (res.record, time.perf_counter() - t0)
    return _RUNS[key]


def final_errors(method, labels_per_class=4, rho=None):
    errs, secs = [], 0.0
    for s in SEEDS:
        rec, t = trained(method, s, labels_per_class, rho)
        errs.append(rec.final("test_err"))
        secs += t
    return np.array(errs), secs


# ---------------------------------------------------------------------------
# 1-6: exact properties


def _min_preactivation(spec, theta, x):
    params, h, smallest = theta.unflatten(), x, np.inf
    for k in range(len(spec.hidden_dims)):
        z = h @ params[f"fc{k}.weight"] + params[f"fc{k}.bias"]
        smallest = min(smallest, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0)
    return smallest


def test_criterion_01_gradient_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, redraws, done = 0.0, 0, 0
    while done < 50:
        depth = int(rng.integers(0, 3))
        hidden = tuple(int(h) for h in rng.integers(2, 7, size=depth))
        classes = int(rng.integers(2, 5))
        spec = MlpSpec(2, hidden, classes)
        theta = init_params(spec, int(rng.integers(2**31)))
        theta = theta.like(theta.values + 0.1 * rng.normal(size=len(theta)))
        x = rng.normal(size=(8, 2))
        y = rng.integers(0, classes, size=8)
        # central differences are meaningless across a ReLU kink
        if _min_preactivation(spec, theta, x) < 1e-3:
            redraws += 1
            continue
        kind = done % 3
        if kind == 0:
            f = lambda t: cross_entropy(forward(spec, t, x), y)  # noqa: E731
        else:
            targets = pseudo_targets(rng.normal(size=(8, classes)) * 2, 0.3)
            dist = "ce" if kind == 1 else "kl"
            f = lambda t, tg=targets, d=dist: consistency_loss(forward(spec, t, x), tg, d)  # noqa: E731
        worst = max(worst, ad.finite_diff_check(f, theta))
        done += 1
    elapsed = time.perf_counter() - t0
    report(
        1, worst < 1e-4 and elapsed < 30,
        f"max relative error {worst:.2e} over 50 instances ({redraws} redrawn near a kink) in {elapsed:.1f}s",
    )


def test_criterion_02_sam_perturbation_law():
    rng = np.random.default_rng(7)
    norm_err, min_cos = 0.0, 1.0
    for _ in range(100):
        g = rng.normal(size=int(rng.integers(1, 200))) * 10 ** rng.uniform(-3, 3)
        rho = float(rng.uniform(1e-3, 2.0))
        pv = ParamVector(g, (("g", (g.size,), 0),))
        eps = sam_perturbation(pv, rho).epsilon.values
        norm_err = max(norm_err, abs(np.linalg.norm(eps) - rho))
        min_cos = min(min_cos, eps @ g / (np.linalg.norm(eps) * np.linalg.norm(g)))
    zero = sam_perturbation(ParamVector(np.ones(5), (("g", (5,), 0),)), 0.0).epsilon.values
    ok = norm_err < 1e-10 and min_cos > 1 - 1e-10 and np.all(zero == 0.0)
    report(2, ok, f"max | ||eps|| - rho | = {norm_err:.1e}, min cosine 1-{1 - min_cos:.1e}, rho=0 exact zero")


def test_criterion_03_degenerate_config():
    cfg = TrainConfig(epochs=4, steps_per_epoch=50, eval_every=10, seed=11)
    cfg = R(cfg, flatmatch=R(cfg.flatmatch, rho=0.0, lambda_xsharp=0.0))
    fm = TRAINERS["flatmatch"](cfg)
    sup = TRAINERS["supervised"](cfg)
    same = fm.theta.values.tobytes() == sup.theta.values.tobytes()
    same_acc = fm.record.column("test_acc").tobytes() == sup.record.column("test_acc").tobytes()
    report(3, same and same_acc, f"{cfg.total_steps} steps, parameters bit-identical={same}, accuracy trace identical={same_acc}")


def _problem(seed):
    rng = np.random.default_rng(seed)
    classes = 2 + seed % 3
    spec = MlpSpec(2, (6, 5), classes)
    theta = init_params(spec, rng)
    x_l = rng.normal(size=(6, 2))
    y_l = rng.integers(0, classes, size=6)
    x_u = rng.normal(size=(20, 2))
    x_s = x_u + 0.1 * rng.normal(size=x_u.shape)
    return spec, theta, x_l, y_l, x_u, x_s


def test_criterion_04_oracle_equivalence():
    worst = 0.0
    for seed in range(20):
        spec, theta, x_l, y_l, x_u, x_s = _problem(seed)
        cfg = FlatMatchConfig(rho=0.1, tau=0.6, lambda_xsharp=1.0)
        buf = GradBuffer.zeros_like(theta, cfg.alpha)
        new, _ = flatmatch_step(spec, theta, x_l, y_l, x_u, cfg, SgdState(0.03, 0.9, 5e-4), buf, x_student=x_s)
        ref, _, _ = oracle.two_pass_step(
            theta.unflatten(), x_l, y_l, x_u, x_s, rho=0.1, tau=0.6, lam=1.0, lr=0.03, momentum=0.9, wd=5e-4, alpha=0.999
        )
        got = new.unflatten()
        worst = max(worst, max(np.max(np.abs(got[k] - ref[k])) for k in ref))
    report(4, worst < 1e-9, f"max parameter difference vs two-pass oracle over 20 seeds {worst:.1e}")


def test_criterion_05_efficient_equivalence_and_buffer():
    worst = 0.0
    for seed in range(5):
        spec, theta, x_l, y_l, x_u, x_s = _problem(seed)
        _, g = labeled_loss_and_grad(spec, theta, x_l, y_l)
        outs = []
        for efficient in (False, True):
            cfg = FlatMatchConfig(efficient=efficient, tau=0.5)
            buf = GradBuffer(g.copy(), cfg.alpha)
            new, _ = flatmatch_step(spec, theta, x_l, y_l, x_u, cfg, SgdState(0.03, 0.9, 5e-4), buf, x_student=x_s)
            outs.append(new.values)
        worst = max(worst, np.max(np.abs(outs[0] - outs[1])))
    g = ParamVector(np.array([1.5, -0.25, 4.0]), (("g", (3,), 0),))
    buf = GradBuffer.zeros_like(g, 0.999)
    for _ in range(100):
        ema_update(buf, g, "conventional")
    series = np.max(np.abs(buf.M.values - g.values * (1 - 0.999**100)))
    report(5, worst < 1e-10 and series < 1e-9, f"efficient vs two-propagation {worst:.1e}; buffer vs g(1-a^100) {series:.1e}")


def test_criterion_06_cross_sharpness_gradient():
    worst = 0.0
    for seed in range(5):
        spec, theta, x_l, y_l, x_u, x_s = _problem(seed)
        _, g = labeled_loss_and_grad(spec, theta, x_l, y_l)
        eps = ad.Tensor(sam_perturbation(g, 0.1).epsilon.values)

        def r(t):
            return cross_sharpness(spec, theta.like(t.data), ad.add(t, eps), x_u, 0.5, x_student=x_s)

        worst = max(worst, ad.finite_diff_check(r, theta))
    report(6, worst < 1e-4, f"max relative error through the perturbed branch {worst:.1e}")


# ---------------------------------------------------------------------------
# 7-12: desk-scale trends


def test_criterion_07_ssl_lift():
    sup, t1 = final_errors("supervised")
    ssl, t2 = final_errors("ssl_baseline")
    fm, t3 = final_errors("flatmatch")
    med = np.median(sup), np.median(ssl), np.median(fm)
    wins = int(np.sum(fm < sup))
    secs = t1 + t2 + t3
    ok = med[2] <= med[1] <= med[0] and wins >= 8 and secs < 600
    report(
        7, ok,
        f"median test error flatmatch {med[2]:.4f} / ssl {med[1]:.4f} / supervised {med[0]:.4f}; "
        f"flatmatch beats supervised in {wins}/10 seeds; {secs:.0f}s",
    )


def test_criterion_08_fixed_label_stabilization():
    fix, t1 = final_errors("flatmatch_fixlabel", labels_per_class=1)
    fm, t2 = final_errors("flatmatch", labels_per_class=1)
    ok = np.median(fix) <= np.median(fm) and t1 + t2 < 600
    report(8, ok, f"1 label/class median test error fixed-label {np.median(fix):.4f} vs flatmatch {np.median(fm):.4f}; {t1 + t2:.0f}s")


def test_criterion_09_flatness():
    fm = np.array([trained("flatmatch", s)[0].final("sharpness") for s in SEEDS])
    base = np.array([trained("ssl_baseline", s)[0].final("sharpness") for s in SEEDS])
    flatter = int(np.sum(fm < base))
    report(
        9, flatter >= 7,
        f"sharpness at rho=0.05 lower for flatmatch in {flatter}/10 seeds "
        f"(median {np.median(fm):.4f} vs {np.median(base):.4f})",
    )


def test_criterion_10_gradient_angle_instability():
    stds = {lpc: np.array([np.std(trained("flatmatch", s, lpc)[0].column("grad_angle_deg")) for s in SEEDS])
            for lpc in (1, 25)}
    means = {lpc: np.median([np.mean(trained("flatmatch", s, lpc)[0].column("grad_angle_deg")) for s in SEEDS])
             for lpc in (1, 25)}
    a, b = np.median(stds[1]), np.median(stds[25])
    report(
        10, a > b,
        f"median angle std {a:.2f} deg (1 label/class) vs {b:.2f} deg (25 labels/class); "
        f"median mean angle {means[1]:.1f} vs {means[25]:.1f}",
    )


RHOS = (0.01, 0.05, 0.1, 0.25, 0.5)


def test_criterion_11_rho_sensitivity():
    medians = {rho: float(np.median(final_errors("flatmatch", rho=rho)[0])) for rho in RHOS}
    margin = medians[0.5] - min(medians.values())
    table = ", ".join(f"{rho}:{m:.4f}" for rho, m in medians.items())
    report(11, margin >= 0.02, f"median error by rho {table}; rho=0.5 margin {100 * margin:.1f} pp")


def test_criterion_12_efficiency():
    steps = 500
    per_step = {}
    for efficient in (False, True):
        cfg = TrainConfig(epochs=10, steps_per_epoch=50, eval_every=10**9, seed=0)
        cfg = R(cfg, flatmatch=R(cfg.flatmatch, efficient=efficient))
        run = Run(cfg)
        run.loop(run.flatmatch_step, 20)  # warm-up
        t0 = time.perf_counter()
        run.loop(run.flatmatch_step, steps)
        per_step[efficient] = (time.perf_counter() - t0) / steps
    ratio = per_step[True] / per_step[False]
    report(
        12, ratio < 0.65,
        f"per-step time efficient {1e3 * per_step[True]:.2f}ms vs two-propagation {1e3 * per_step[False]:.2f}ms, "
        f"ratio {ratio:.3f} over {steps} steps",
    )


# ---------------------------------------------------------------------------
# 13: determinism


def test_criterion_13_determinism(tmp_path):
    failures = []
    cfg = TrainConfig(epochs=2, steps_per_epoch=25, eval_every=5, seed=3)
    cfg = R(cfg, fixed_label=R(cfg.fixed_label, pretrain_epochs=1, num_fix=20))
    for name, fn in TRAINERS.items():
        c = cfg
        if name == "flatmatch_e":
            c = R(c, flatmatch=R(c.flatmatch, efficient=True))
        if name == "flatmatch_fixlabel":
            c = R(c, fixed_label=R(c.fixed_label, enabled=True))
        a = fn(c, record_path=tmp_path / f"{name}_a.csv")
        b = fn(c, record_path=tmp_path / f"{name}_b.csv")
        if (tmp_path / f"{name}_a.csv").read_bytes() != (tmp_path / f"{name}_b.csv").read_bytes():
            failures.append(f"{name} record")
        if a.theta.values.tobytes() != b.theta.values.tobytes():
            failures.append(f"{name} parameters")

    res = TRAINERS["flatmatch"](cfg)
    x, y = res.dataset.test_x, res.dataset.test_y
    one = landscape_2d(res.spec, res.eval_theta, x, y, seeds=(1, 2), n=11, workers=1)
    four = landscape_2d(res.spec, res.eval_theta, x, y, seeds=(1, 2), n=11, workers=4)
    again = landscape_2d(res.spec, res.eval_theta, x, y, seeds=(1, 2), n=11, workers=4)
    if not one.loss.tobytes() == four.loss.tobytes() == again.loss.tobytes():
        failures.append("2-D landscape")
    l1 = landscape_1d(res.spec, res.eval_theta, x, y, seed=5, num_points=21, workers=1)
    l4 = landscape_1d(res.spec, res.eval_theta, x, y, seed=5, num_points=21, workers=3)
    if l1.loss.tobytes() != l4.loss.tobytes():
        failures.append("1-D landscape")

    small = ["--set", "epochs=1", "--set", "steps_per_epoch=10", "--set", "eval_every=5"]
    outs = []
    for tag, workers in (("a", "1"), ("b", "4")):
        out = tmp_path / f"cli_{tag}"
        cli_main(["run", "--exp", "landscape", *small, "--grid", "7", "--workers", workers, "--out", str(out)])
        files = json.loads((out / "landscape/manifest.json").read_text())["files"]
        outs.append({f: (out / "landscape" / f).read_bytes() for f in files if f.endswith(".csv")})
    if outs[0] != outs[1]:
        failures.append("CLI landscape artifacts")
    report(13, not failures, "all trainers, landscape scans and CLI artifacts byte-identical"
           if not failures else f"mismatch in {', '.join(failures)}")

