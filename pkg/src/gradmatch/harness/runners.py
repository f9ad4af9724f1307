"""Experiment runners. Each takes a validated config dict and returns a
:class:`RunOutput`; nothing here touches the filesystem except the IDX
loader in the dropout runner.

Every run derives its RNG streams from ``(master_seed, experiment, cell,
seed)`` so results do not depend on scheduling.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import spearmanr

from .. import estimator as est
from .. import flowref, models, numkernel, oracles, regfam, synthdata, training
from ..synthdata import derive_seed
from .output import RunOutput, Table, fan_out

SCALAR_RIDGE = regfam.RegularizerSpec("scalar-ridge")
DIAG = regfam.RegularizerSpec("diag-quadratic")
SYM = regfam.RegularizerSpec("sym-quadratic")

#: relative error that counts as recovered in the elastic-net grid
RECOVERY_TOL = 0.05


def _diag_cols(result: est.EstimateResult) -> dict:
    d = result.diagnostics
    return {"residual_mse": result.residual_mse, "cond": d["cond"], "rank": d["rank"],
            "low_identifiability": d["low_identifiability"]}


def _failed(outcomes) -> int:
    return sum(not o.ok for o in outcomes)


def _timings(outcomes) -> list:
    return [(o.label, o.seconds) for o in outcomes]


# --------------------------------------------------------------- gradcheck

def _rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_diff(f, theta, h: float = 1e-6) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    out = None
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        col = (np.asarray(f(theta + e)) - np.asarray(f(theta - e))) / (2 * h)
        if out is None:
            out = np.zeros((theta.size,) + np.shape(col))
        out[i] = col
    return out


def gradcheck_grid(cfg: dict) -> list:
    """``(label, spec, dropout)`` cases covering every loss, activation and depth."""
    d, h, k = cfg["d"], cfg["hidden"], cfg["classes"]
    cases = []
    for loss in models.LOSS_KINDS:
        cases.append((f"linear/{loss}", models.ModelSpec("linear", (d, k), loss_kind=loss), False))
    for act in models.ACTIVATIONS:
        for widths in ((d, h, k), (d, h, h, k)):
            for loss in ("half-mse-normalized", "cross-entropy"):
                for rate in (0.0, 0.3):
                    spec = models.ModelSpec("mlp", widths, act, rate, loss)
                    cases.append((spec.tag(), spec, rate > 0))
    return cases


def run_gradcheck(cfg: dict, grad_fn=None) -> RunOutput:
    """Central finite differences against every analytic derivative.

    ``grad_fn(spec, theta, data, mask)`` replaces :func:`models.loss_grad`;
    it exists so tests can inject a faulty gradient.
    """
    grad_fn = grad_fn or models.loss_grad
    seed = cfg["master_seed"]
    n, d, k = cfg["n"], cfg["d"], cfg["classes"]
    data = synthdata.gen_blobs(n, d, k, 2.0, derive_seed(seed, "gradcheck", "data"))
    table = Table("main", ("check", "case", "status", "rel_error", "threshold", "reason"))
    failures = total = 0

    def record(check, case, err, thr, reason=""):
        nonlocal failures, total
        total += 1
        status = "pass" if err < thr else "fail"
        failures += status == "fail"
        table.add(check=check, case=case, status=status, rel_error=err, threshold=thr,
                  reason=reason or ("" if status == "pass" else "relative error above threshold"))

    for i, (label, spec, dropout) in enumerate(gradcheck_grid(cfg)):
        theta = 0.5 * synthdata.normal(synthdata.stream(seed, "gradcheck", "theta", i), spec.n_params)
        mask = models.sample_dropout_mask(spec, derive_seed(seed, "gradcheck", "mask", i),
                                          rows=n) if dropout else None
        fd = central_diff(lambda th: models.loss_value(spec, th, data, mask), theta)
        record("loss_grad", label, _rel_err(grad_fn(spec, theta, data, mask), fd), cfg["tolerance"])
        if dropout:
            continue
        if spec.activation == "relu" and spec.kind == "mlp":
            total += 1
            table.add(check="loss_hvp", case=label, status="skipped", rel_error=None,
                      threshold=cfg["hvp_tolerance"], reason="relu loss is not twice differentiable")
            continue
        v = synthdata.normal(synthdata.stream(seed, "gradcheck", "v", i), spec.n_params)
        fd_hv = central_diff(lambda th: grad_fn(spec, th, data, None), theta).T @ v
        record("loss_hvp", label, _rel_err(models.loss_hvp(spec, theta, data, v), fd_hv),
               cfg["hvp_tolerance"])

    p = 6
    ctx_spec = models.ModelSpec("linear", (d, k), loss_kind="cross-entropy")
    context = regfam.LossContext(ctx_spec, data)
    for j, family in enumerate(regfam.FAMILIES):
        rs = regfam.RegularizerSpec(family)
        pp = ctx_spec.n_params if rs.needs_context else p
        rng = synthdata.stream(seed, "gradcheck", "reg", j)
        theta = synthdata.normal(rng, pp)
        # keep clear of the Huber knots so the difference quotient sees one branch
        theta = np.where(np.abs(theta) < 0.05, 0.05 * np.sign(theta) + 0.05 * (theta == 0), theta)
        lam = np.abs(synthdata.normal(rng, rs.n_params(pp))) + 0.1
        ctx = context if rs.needs_context else None
        fd = central_diff(lambda th: regfam.reg_value(rs, lam, th, ctx), theta)
        record("reg_grad", family, _rel_err(regfam.reg_grad(rs, lam, theta, ctx), fd), cfg["tolerance"])
    summary = [f"gradcheck: {total - failures}/{total} checks passed or skipped"]
    summary += [f"  FAIL {row[0]} {row[1]} rel_error={row[3]!r}" for row in table.rows if row[2] == "fail"]
    return RunOutput([table], total, failures, summary)


# ------------------------------------------------------------------- ridge

def run_ridge(cfg: dict) -> RunOutput:
    """Scalar-ridge round trip at the closed-form ridge optimum."""
    spec = models.ModelSpec("linear", (cfg["p"], 1), loss_kind="squared-error-half")
    tasks = [(c, lam, s) for c, lam in enumerate(cfg["lambdas"]) for s in range(cfg["seeds"])]

    def one(task):
        c, lam, s = task
        data, _ = synthdata.gen_linear(synthdata.LinearGenConfig(
            cfg["n"], cfg["p"], cfg["coef_std"], cfg["noise_std"],
            derive_seed(cfg["master_seed"], "ridge", c, s), "ridge"))
        theta = oracles.ridge_closed_form(data.X, data.y, lam)
        return est.fit_linear(est.endpoint_system(spec, data, theta, SCALAR_RIDGE))

    outcomes = fan_out(one, tasks, cfg["parallelism"], label=lambda t: f"lambda={t[1]!r} seed={t[2]}")
    table = Table("main", ("lambda_true", "seed", "lambda_hat", "rel_error", "residual_mse", "cond",
                           "rank", "low_identifiability", "status"))
    summary = []
    for (c, lam, s), o in zip(tasks, outcomes):
        if o.ok:
            r = o.value
            table.add(lambda_true=lam, seed=s, lambda_hat=r.lam[0], rel_error=_pair_error(r.lam, (lam,)),
                      status="ok", **_diag_cols(r))
        else:
            table.add(lambda_true=lam, seed=s, lambda_hat=None, rel_error=None, residual_mse=None,
                      cond=None, rank=None, low_identifiability=None, status=o.error)
    for lam in cfg["lambdas"]:
        errs = [row[3] for row in table.rows if row[0] == lam and row[3] is not None]
        summary.append(f"ridge lambda={lam!r}: max rel error {max(errs) if errs else float('nan'):.3g}")
    return RunOutput([table], len(tasks), _failed(outcomes), summary, _timings(outcomes))


# -------------------------------------------------------------- elasticnet

def run_elasticnet(cfg: dict) -> RunOutput:
    """Train with an explicit smoothed elastic net, then recover (l1, l2)."""
    p = cfg["d"]
    spec = models.ModelSpec("linear", (p, 1), loss_kind="half-mse-normalized")
    rs = regfam.RegularizerSpec("elastic-net-smoothed", cfg["beta"])
    cells = [(l1, l2) for l1 in cfg["lambda1_grid"] for l2 in cfg["lambda2_grid"]]
    tasks = [(c, l1, l2, s) for c, (l1, l2) in enumerate(cells) for s in range(cfg["seeds"])]
    tcfg = training.TrainConfig(eta=cfg["eta"], max_epochs=cfg["max_epochs"], patience=cfg["patience"])
    adam = est.AdamConfig(cfg["fit_step"], cfg["fit_max_epochs"], cfg["fit_patience"])

    def one(task):
        c, l1, l2, s = task
        data, _ = synthdata.gen_linear(synthdata.LinearGenConfig(
            cfg["n"], p, cfg["coef_std"], cfg["noise_std"],
            derive_seed(cfg["master_seed"], "elasticnet", c, s), "elasticnet"))
        train, _ = synthdata.train_test_split(data, cfg["test_frac"], derive_seed(cfg["master_seed"], "split", c, s))
        rec, _ = training.train(spec, train, tcfg, explicit_reg=(rs, [l1, l2]))
        system = est.endpoint_system(spec, train, rec.theta, rs)
        if cfg["fit"] == "linear":
            r = est.fit_linear(system, normalize=cfg["normalize"])
        else:
            r = est.fit_iterative(system, adam)
        return rec, r

    outcomes = fan_out(one, tasks, cfg["parallelism"],
                       label=lambda t: f"l1={t[1]!r} l2={t[2]!r} seed={t[3]}")
    runs = Table("main", ("lambda1", "lambda2", "seed", "lambda1_hat", "lambda2_hat", "rel_error",
                          "residual_mse", "cond", "cond_normalized", "rank", "low_identifiability", "flags",
                          "near_kink_fraction", "stop_step", "status"))
    for (c, l1, l2, s), o in zip(tasks, outcomes):
        if not o.ok:
            runs.add(lambda1=l1, lambda2=l2, seed=s, lambda1_hat=None, lambda2_hat=None, rel_error=None,
                     residual_mse=None, cond=None, cond_normalized=None, rank=None,
                     low_identifiability=None, flags="", near_kink_fraction=None, stop_step=None,
                     status=o.error)
            continue
        rec, r = o.value
        runs.add(lambda1=l1, lambda2=l2, seed=s, lambda1_hat=r.lam[0], lambda2_hat=r.lam[1],
                 rel_error=_pair_error(r.lam, (l1, l2)),
                 cond_normalized=r.diagnostics["cond_normalized"],
                 flags=";".join(r.diagnostics["flags"]),
                 near_kink_fraction=float(np.mean(np.abs(rec.theta) < cfg["beta"])),
                 stop_step=rec.stop_step, status="ok", **_diag_cols(r))

    big1, big2 = max(cfg["lambda1_grid"]), max(cfg["lambda2_grid"])
    cells_t = Table("cells", ("lambda1", "lambda2", "role", "n_ok", "mean_lambda1_hat", "se_lambda1_hat",
                              "mean_lambda2_hat", "se_lambda2_hat", "rel_error_of_mean", "flagged_fraction",
                              "silent_misrecoveries", "mean_residual_mse", "max_cond", "verdict"))
    summary = []
    for l1, l2 in cells:
        rows = [row for row in runs.rows if row[0] == l1 and row[1] == l2 and row[-1] == "ok"]
        role = "large" if (l1 == big1 and len(cfg["lambda1_grid"]) > 1) or (
            l2 == big2 and len(cfg["lambda2_grid"]) > 1) else "intermediate"
        if not rows:
            cells_t.add(lambda1=l1, lambda2=l2, role=role, n_ok=0, mean_lambda1_hat=None, se_lambda1_hat=None,
                        mean_lambda2_hat=None, se_lambda2_hat=None, rel_error_of_mean=None,
                        flagged_fraction=None, silent_misrecoveries=None, mean_residual_mse=None,
                        max_cond=None, verdict="no-runs")
            continue
        h1 = np.array([row[3] for row in rows])
        h2 = np.array([row[4] for row in rows])
        se = (lambda a: float(a.std(ddof=1) / np.sqrt(a.size)) if a.size > 1 else 0.0)
        mean_err = _pair_error((h1.mean(), h2.mean()), (l1, l2))
        flagged = [row[10] for row in rows]
        silent = sum(row[5] > RECOVERY_TOL and not row[10] for row in rows)
        if mean_err <= RECOVERY_TOL and silent == 0:
            verdict = "recovered"
        elif silent == 0:
            verdict = "flagged"
        else:
            verdict = "silent-misrecovery"
        cells_t.add(lambda1=l1, lambda2=l2, role=role, n_ok=len(rows), mean_lambda1_hat=float(h1.mean()),
                    se_lambda1_hat=se(h1), mean_lambda2_hat=float(h2.mean()), se_lambda2_hat=se(h2),
                    rel_error_of_mean=mean_err, flagged_fraction=float(np.mean(flagged)),
                    silent_misrecoveries=silent, mean_residual_mse=float(np.mean([row[6] for row in rows])),
                    max_cond=float(max(row[7] for row in rows)), verdict=verdict)
        summary.append(f"elasticnet l1={l1!r} l2={l2!r} [{role}]: mean=({h1.mean():.5g}, {h2.mean():.5g}) "
                       f"rel_err={mean_err:.3g} flagged={np.mean(flagged):.2f} -> {verdict}")
    return RunOutput([runs, cells_t], len(tasks), _failed(outcomes), summary, _timings(outcomes))


def _pair_error(est_pair, true_pair) -> float:
    errs = []
    for e, t in zip(est_pair, true_pair):
        errs.append(abs(e - t) / t if t != 0 else abs(e))
    return float(max(errs))


# ---------------------------------------------------------- early stopping

def shared_draw(cfg: dict, noise_std: float | None = None):
    """The shared ``(X, theta, eps)`` draw, keyed by ``data_seed`` alone so
    every experiment and master seed sees the same training set."""
    noise = cfg["noise_std"] if noise_std is None else noise_std
    data, _ = synthdata.gen_linear(synthdata.LinearGenConfig(
        cfg["n"], cfg["p"], cfg["coef_std"], noise, cfg["data_seed"], "ols"))
    return data


def _es_design(cfg: dict):
    """Fixed design matrix shared by every early-stopping endpoint."""
    X = shared_draw(cfg).X
    if cfg["design"] == "isotropic":
        Q, _ = np.linalg.qr(X)
        X = np.sqrt(cfg["n"]) * Q
    return X


def _es_data(cfg: dict, X, *labels, with_theta: bool = False):
    data, theta = synthdata.gen_linear(synthdata.LinearGenConfig(
        cfg["n"], cfg["p"], cfg["coef_std"], cfg["noise_std"],
        derive_seed(cfg["master_seed"], "early-stopping", *labels), "es"), X=X)
    return (data, theta) if with_theta else data


def _es_specs(p: int):
    train_spec = models.ModelSpec("linear", (p, 1), loss_kind="half-mse-normalized")
    return train_spec, train_spec.replace(loss_kind="mse-normalized")


def run_early_stopping(cfg: dict) -> RunOutput:
    panel = cfg["panel"]
    return {"a": _panel_a, "b": _panel_b, "c": _panel_c, "d": _panel_d, "e": _panel_e}[panel](cfg)


def _panel_a(cfg):
    X = _es_design(cfg)
    theory = oracles.ali_lambda(X, cfg["eta"], cfg["t"]).matrix
    table = Table("main", ("t", "i", "j", "lambda_theory"))
    p = cfg["p"]
    for i in range(p):
        for j in range(p):
            table.add(t=cfg["t"], i=i, j=j, lambda_theory=float(theory[i, j]))
    s = numkernel.sym_eig(theory).eigenvalues
    return RunOutput([table], 1, 0, [f"panel a: t={cfg['t']} ||Lambda||_F={np.linalg.norm(theory):.6g} "
                                     f"eig range [{s[0]:.4g}, {s[-1]:.4g}]"])


def _panel_b(cfg):
    X = _es_design(cfg)
    p, t = cfg["p"], cfg["t"]
    theory = oracles.ali_lambda(X, cfg["eta"], t).matrix
    train_spec, fit_spec = _es_specs(p)
    tcfg = training.TrainConfig(eta=cfg["eta"], max_epochs=t)

    def one(pool):
        systems = []
        for k in range(cfg["m"]):
            data = _es_data(cfg, X, "b", pool, k)
            rec, _ = training.train(train_spec, data, tcfg)
            systems.append(est.endpoint_system(fit_spec, data, rec.theta, SYM, f"endpoint{k}"))
        return est.fit_linear(est.stack(systems), reg_spec=SYM, p=p)

    pools = list(range(cfg["pools"]))
    outcomes = fan_out(one, pools, cfg["parallelism"], label=lambda q: f"pool={q}")
    table = Table("main", ("pool", "m", "t", "frobenius_error", "rel_frobenius_error", "theory_norm",
                           "residual_mse", "cond", "rank", "min_eig", "low_identifiability", "status"))
    summary = []
    tn = float(np.linalg.norm(theory))
    for q, o in zip(pools, outcomes):
        if not o.ok:
            table.add(pool=q, m=cfg["m"], t=t, frobenius_error=None, rel_frobenius_error=None, theory_norm=tn,
                      residual_mse=None, cond=None, rank=None, min_eig=None, low_identifiability=None,
                      status=o.error)
            continue
        r = o.value
        err = float(np.linalg.norm(regfam.sym_from_upper(r.lam, p) - theory))
        table.add(pool=q, m=cfg["m"], t=t, frobenius_error=err, rel_frobenius_error=err / tn, theory_norm=tn,
                  min_eig=r.diagnostics["min_eig"], status="ok", **_diag_cols(r))
        summary.append(f"panel b pool={q}: rel Frobenius error {err / tn:.3g} (rank {r.diagnostics['rank']})")
    return RunOutput([table], len(pools), _failed(outcomes), summary, _timings(outcomes))


def _panel_c(cfg):
    p = cfg["p"]
    train_spec, fit_spec = _es_specs(p)
    tcfg = training.TrainConfig(eta=cfg["eta"], max_epochs=min(cfg["t"], cfg["max_epochs"]),
                                patience=cfg["patience"])
    rcfg = training.TrainConfig(eta=cfg["retrain_eta"], max_epochs=cfg["retrain_max_epochs"],
                                patience=cfg["patience"])

    def one(seed):
        data, _ = synthdata.gen_linear(synthdata.LinearGenConfig(
            cfg["n"], p, cfg["coef_std"], cfg["noise_std"],
            derive_seed(cfg["master_seed"], "early-stopping", "c", seed), "es"))
        rec, _ = training.train(train_spec, data, tcfg)
        r = est.fit_linear(est.endpoint_system(fit_spec, data, rec.theta, DIAG), reg_spec=DIAG, p=p)
        check = est.retrain_validate(fit_spec, data, DIAG, r.lam, rcfg, rec.theta)
        theory = oracles.ali_lambda(data.X, cfg["eta"], max(rec.stop_step, 1)).matrix
        return rec, r, check, theory

    seeds = list(range(cfg["seeds"]))
    outcomes = fan_out(one, seeds, cfg["parallelism"], label=lambda s: f"seed={s}")
    cols = ("seed", "stop_step", "rel_distance", "loss_gap", "retrain_steps", "residual_mse", "cond", "rank",
            "min_eig", "low_identifiability", "theory_trace", "lambda_hat_trace", "lambda_hat_diag", "status")
    table = Table("main", cols)
    summary = []
    for s, o in zip(seeds, outcomes):
        if not o.ok:
            table.add(**{c: None for c in cols[:-1]} | {"seed": s, "status": o.error})
            continue
        rec, r, check, theory = o.value
        table.add(seed=s, stop_step=rec.stop_step, rel_distance=check["rel_distance"], loss_gap=check["loss_gap"],
                  retrain_steps=check["steps"], min_eig=r.diagnostics["min_eig"],
                  theory_trace=float(np.trace(theory)), lambda_hat_trace=float(r.lam.sum()),
                  lambda_hat_diag=[float(x) for x in r.lam], status="ok", **_diag_cols(r))
        summary.append(f"panel c seed={s}: stop_step={rec.stop_step} retrain rel_distance={check['rel_distance']:.3g}")
    return RunOutput([table], len(seeds), _failed(outcomes), summary, _timings(outcomes))


def _panel_d(cfg):
    X = _es_design(cfg)
    p, eta = cfg["p"], cfg["eta"]
    train_spec, fit_spec = _es_specs(p)
    tcfg = training.TrainConfig(eta=eta, max_epochs=cfg["d_max_epochs"], patience=cfg["patience"])
    eig = numkernel.sym_eig(oracles.gram(X))

    def theory_at(t):
        w = oracles.ali_eigen_weights(eig.eigenvalues, eta, t)
        return (eig.eigenvectors * w) @ eig.eigenvectors.T

    def one(pool):
        systems, mats, steps = [], [], []
        for k in range(cfg["m_max"]):
            data = _es_data(cfg, X, "d", pool, k)
            # each endpoint stops when its own training loss plateaus
            rec, _ = training.train(train_spec, data, tcfg)
            t_k, theta = rec.stop_step, rec.theta
            if t_k == 0:
                # validation never improved; use the first step so the endpoint is not the origin
                t_k = 1
                theta = training.gd_step(train_spec, theta, data, eta)
            systems.append(est.endpoint_system(fit_spec, data, theta, SYM, f"endpoint{k}"))
            mats.append(theory_at(t_k))
            steps.append(t_k)
        target = np.median(np.stack(mats), axis=0)
        fits = [est.fit_linear(est.stack(systems[:m]), reg_spec=SYM, p=p) for m in range(1, cfg["m_max"] + 1)]
        spread = max(np.linalg.norm(M - target) for M in mats) / np.linalg.norm(target)
        return fits, target, steps, float(spread)

    pools = list(range(cfg["pools"]))
    outcomes = fan_out(one, pools, cfg["parallelism"], label=lambda q: f"pool={q}")
    table = Table("main", ("pool", "m", "distance", "rel_distance", "target_norm", "t_median", "t_min", "t_max",
                           "theory_spread", "residual_mse", "cond", "rank", "min_eig", "low_identifiability",
                           "status"))
    per_m = {m: [] for m in range(1, cfg["m_max"] + 1)}
    summary = []
    for q, o in zip(pools, outcomes):
        if not o.ok:
            table.add(pool=q, m=None, distance=None, rel_distance=None, target_norm=None, t_median=None,
                      t_min=None, t_max=None, theory_spread=None, residual_mse=None, cond=None, rank=None,
                      min_eig=None, low_identifiability=None, status=o.error)
            continue
        fits, target, steps, spread = o.value
        tn = float(np.linalg.norm(target))
        for m, r in enumerate(fits, 1):
            dist = float(np.linalg.norm(regfam.sym_from_upper(r.lam, p) - target))
            per_m[m].append(dist)
            table.add(pool=q, m=m, distance=dist, rel_distance=dist / tn, target_norm=tn,
                      t_median=float(np.median(steps[:m])), t_min=min(steps[:m]), t_max=max(steps[:m]),
                      theory_spread=spread, min_eig=r.diagnostics["min_eig"], status="ok", **_diag_cols(r))
        summary.append(f"panel d pool={q}: t in [{min(steps)}, {max(steps)}], spread={spread:.3g}, "
                       f"rel distance m=1 {per_m[1][-1] / tn:.3g} -> m={cfg['m_max']} {per_m[cfg['m_max']][-1] / tn:.3g}")
    ci = Table("ci", ("m", "pools", "mean_distance", "ci_low", "ci_high"))
    for m, dists in per_m.items():
        if not dists:
            continue
        a = np.array(dists)
        half = 1.96 * a.std(ddof=1) / np.sqrt(a.size) if a.size > 1 else 0.0
        ci.add(m=m, pools=a.size, mean_distance=float(a.mean()), ci_low=float(a.mean() - half),
               ci_high=float(a.mean() + half))
    return RunOutput([table, ci], len(pools), _failed(outcomes), summary, _timings(outcomes))


def _panel_e(cfg):
    X = _es_design(cfg)
    p, eta = cfg["p"], cfg["eta"]
    train_spec, _ = _es_specs(p)
    data = shared_draw(cfg) if cfg["design"] == "gaussian" else _es_data(cfg, X, "e")
    checkpoints = tuple(sorted(set(cfg["checkpoints"])))
    tcfg = training.TrainConfig(eta=eta, max_epochs=max(checkpoints), checkpoint_steps=checkpoints)
    _, traj = training.train(train_spec, data, tcfg)
    adam = est.AdamConfig(cfg["fit_step"], cfg["fit_max_epochs"], cfg["fit_patience"])
    table = Table("main", ("t", "lambda_hat", "lambda_theory", "residual_mse", "cond", "rank", "rel_gap"))
    summary = []
    for t in checkpoints:
        system = est.endpoint_system(train_spec, data, traj.at(t), SCALAR_RIDGE, f"t={t}")
        r = est.fit_linear(system) if cfg["fit"] == "linear" else est.fit_iterative(system, adam)
        theory = oracles.scalarize_lambda(oracles.ali_lambda(X, eta, t))
        lam = float(r.lam[0])
        table.add(t=t, lambda_hat=lam, lambda_theory=theory, residual_mse=r.residual_mse,
                  cond=r.diagnostics["cond"], rank=r.diagnostics["rank"], rel_gap=abs(lam - theory) / theory)
        summary.append(f"panel e t={t}: lambda_hat={lam:.6g} theory={theory:.6g}")
    return RunOutput([table], len(checkpoints), 0, summary)


# --------------------------------------------------------------- bootstrap

def run_bootstrap(cfg: dict) -> RunOutput:
    """Stack the canonical endpoint with resample-retrain endpoints and fit
    a full symmetric quadratic penalty at a fixed step count."""
    p, t, eta = cfg["p"], cfg["t"], cfg["eta"]
    train_spec, fit_spec = _es_specs(p)
    tcfg = training.TrainConfig(eta=eta, max_epochs=t)
    if cfg["mode"] == "recovery":
        sigmas, m_values = (cfg["sigma"],), tuple(sorted(set(m for m in cfg["m_values"] if m <= cfg["m"])))
    else:
        sigmas, m_values = cfg["sigmas"], (cfg["m"],)
    seed = cfg["master_seed"]

    def dataset(sigma):
        return shared_draw(cfg, sigma)

    def one(task):
        sigma, pool = task
        data = dataset(sigma)
        systems, failed = [], 0
        for b in range(cfg["m"]):
            try:
                db = data if b == 0 else synthdata.resample_bootstrap(data, derive_seed(seed, "bootstrap", sigma, pool, b))
                rec, _ = training.train(train_spec, db, tcfg)
                systems.append(est.endpoint_system(fit_spec, db, rec.theta, SYM, f"b={b}"))
            except (ArithmeticError, ValueError):
                failed += 1
        fits = {m: est.fit_linear(est.stack(systems[:m]), reg_spec=SYM, p=p) for m in m_values if m <= len(systems)}
        return fits, failed

    tasks = [(sigma, pool) for sigma in sigmas for pool in range(cfg["pools"])]
    outcomes = fan_out(one, tasks, cfg["parallelism"], label=lambda t_: f"sigma={t_[0]!r} pool={t_[1]}")
    theory = {sigma: oracles.ali_lambda(dataset(sigma).X, eta, t).matrix for sigma in sigmas}
    cols = ("sigma", "pool", "m", "distance", "baseline", "rel_distance", "beats_baseline", "residual_mse", "cond",
            "rank", "min_eig", "low_identifiability", "failed_replicates", "status")
    table = Table("main", cols)
    summary = []
    for (sigma, pool), o in zip(tasks, outcomes):
        base = float(np.linalg.norm(theory[sigma]))
        if not o.ok:
            table.add(**{c: None for c in cols} | {"sigma": sigma, "pool": pool, "baseline": base, "status": o.error})
            continue
        fits, failed = o.value
        for m, r in fits.items():
            dist = float(np.linalg.norm(regfam.sym_from_upper(r.lam, p) - theory[sigma]))
            table.add(sigma=sigma, pool=pool, m=m, distance=dist, baseline=base, rel_distance=dist / base,
                      beats_baseline=dist < base, min_eig=r.diagnostics["min_eig"], failed_replicates=failed,
                      status="ok", **_diag_cols(r))
    top = max(m_values)
    for sigma in sigmas:
        rows = [row for row in table.rows if row[0] == sigma and row[2] == top and row[-1] == "ok"]
        wins = sum(row[6] for row in rows)
        med = float(np.median([row[3] for row in rows])) if rows else float("nan")
        note = "" if wins * 2 > len(rows) else " (flagged: worse than reporting zero)"
        summary.append(f"bootstrap sigma={sigma!r} m={top}: beats baseline in {wins}/{len(rows)} pools, "
                       f"median distance {med:.4g} vs baseline {float(np.linalg.norm(theory[sigma])):.4g}{note}")
    return RunOutput([table], len(tasks), _failed(outcomes), summary, _timings(outcomes))


# ----------------------------------------------------------------- dropout

def parse_architecture(text: str) -> tuple:
    try:
        widths = tuple(int(w) for w in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad architecture {text!r}; expected widths like 32 or 32x32") from None
    if not widths or min(widths) < 1:
        raise ValueError(f"bad architecture {text!r}")
    return widths


def run_dropout(cfg: dict) -> RunOutput:
    """SGD + momentum + dropout, then a scalar ridge fit on the clean loss."""
    seed = cfg["master_seed"]
    archs = [(a, parse_architecture(a)) for a in cfg["architectures"]]
    tasks = [(a, widths, rate, s) for a, widths in archs for rate in cfg["rates"] for s in range(cfg["seeds"])]
    idx = None
    if cfg["idx_images"] or cfg["idx_labels"]:
        idx = synthdata.idx_load(cfg["idx_images"], cfg["idx_labels"])

    def one(task):
        arch, widths, rate, s = task
        if idx is None:
            data = synthdata.gen_blobs(cfg["n"], cfg["d"], cfg["classes"], cfg["separation"],
                                       derive_seed(seed, "dropout", "data", s))
        else:
            data = idx
        train, val = synthdata.train_test_split(data, cfg["test_frac"], derive_seed(seed, "dropout", "split", s))
        spec = models.ModelSpec("mlp", (data.d, *widths, data.y.shape[1]), cfg["activation"], rate, "cross-entropy")
        tcfg = training.TrainConfig(eta=cfg["eta"], max_epochs=cfg["max_epochs"], optimizer="sgd",
                                    momentum=cfg["momentum"], batch_size=min(cfg["batch_size"], train.n),
                                    patience=cfg["patience"], seed=derive_seed(seed, "dropout", "train", s))
        rec, _ = training.train(spec, train, tcfg, val_data=val if cfg["monitor"] == "validation" else None)
        clean = spec.replace(dropout_rate=0.0)
        r = est.fit_linear(est.endpoint_system(clean, train, rec.theta, SCALAR_RIDGE))
        acc = float(np.mean(models.forward(clean, rec.theta, val.X).argmax(1) == val.y.argmax(1))) if val.n else None
        return rec, r, models.loss_value(clean, rec.theta, train), acc

    outcomes = fan_out(one, tasks, cfg["parallelism"], label=lambda t: f"arch={t[0]} rate={t[2]!r} seed={t[3]}")
    cols = ("architecture", "rate", "seed", "lambda_hat", "l2_coefficient", "residual_mse", "cond", "rank",
            "low_identifiability", "stop_step", "halted_at", "train_loss", "val_accuracy", "status")
    runs = Table("main", cols)
    for (arch, _, rate, s), o in zip(tasks, outcomes):
        if not o.ok:
            runs.add(**{c: None for c in cols} | {"architecture": arch, "rate": rate, "seed": s, "status": o.error})
            continue
        rec, r, loss, acc = o.value
        lam = float(r.lam[0])
        # scalar ridge is (lam/2)||theta||^2, so the coefficient of ||theta||^2 is lam/2
        runs.add(architecture=arch, rate=rate, seed=s, lambda_hat=lam, l2_coefficient=lam / 2,
                 stop_step=rec.stop_step, halted_at=rec.halted_at, train_loss=loss, val_accuracy=acc,
                 status="ok", **_diag_cols(r))
    trend = Table("trend", ("architecture", "spearman", "rate0_is_min", "median_lambda_hat"))
    summary = []
    for arch, _ in archs:
        med = []
        for rate in cfg["rates"]:
            vals = [row[3] for row in runs.rows if row[0] == arch and row[1] == rate and row[-1] == "ok"]
            med.append(float(np.median(vals)) if vals else float("nan"))
        ok = [(r_, m_) for r_, m_ in zip(cfg["rates"], med) if np.isfinite(m_)]
        rho = float(spearmanr(*zip(*ok))[0]) if len(ok) > 1 else float("nan")
        r0 = [m_ for r_, m_ in ok if r_ == 0.0]
        rate0_min = bool(r0) and r0[0] <= min(m_ for _, m_ in ok)
        trend.add(architecture=arch, spearman=rho, rate0_is_min=rate0_min, median_lambda_hat=med)
        summary.append(f"dropout arch={arch}: spearman={rho:.3f} medians={[f'{m_:.4g}' for m_ in med]}")
    return RunOutput([runs, trend], len(tasks), _failed(outcomes), summary, _timings(outcomes))


# --------------------------------------------------------------------- igr

def igr_probe(spec: models.ModelSpec, data, theta, eta: float, steps: int = 5, substeps: int = 10):
    """Full-batch probe steps from ``theta``; returns ``(samples, system)``.

    Each sample is ``(H g, T)`` with ``T`` the RK4 flow discrepancy. The
    system regresses ``T`` on ``H g`` (one coefficient, ``2 lambda / p``).
    """
    th = np.array(theta, dtype=float)
    samples = []
    for _ in range(steps):
        g = models.loss_grad(spec, th, data)
        samples.append((models.loss_hvp(spec, th, data, g), flowref.gd_flow_discrepancy(spec, th, data, eta, substeps)))
        th = th - eta * g
    system = est.EstimationSystem(np.concatenate([t for _, t in samples]),
                                  np.concatenate([h for h, _ in samples])[:, None])
    return samples, system


def run_igr(cfg: dict) -> RunOutput:
    seed = cfg["master_seed"]
    models_ = [("quadratic", cfg["quadratic_p"])] + [("mlp", w) for w in cfg["widths"]]
    tasks = [(kind, w, s) for kind, w in models_ for s in range(cfg["seeds"])]

    def one(task):
        kind, w, s = task
        if kind == "quadratic":
            data, _ = synthdata.gen_linear(synthdata.LinearGenConfig(
                cfg["quadratic_n"], w, 1.0, 1.0, derive_seed(seed, "igr", "quadratic", s), "igr"))
            spec = models.ModelSpec("linear", (w, 1), loss_kind="half-mse-normalized")
            theta, test, snap_loss = np.ones(w), None, None
        else:
            data = synthdata.gen_blobs(cfg["n"], cfg["d"], cfg["classes"], cfg["separation"],
                                       derive_seed(seed, "igr", "data", s))
            data, test = synthdata.train_test_split(data, cfg["test_frac"], derive_seed(seed, "igr", "split", s))
            spec = models.ModelSpec("mlp", (cfg["d"], w, cfg["classes"]), cfg["activation"], 0.0, "cross-entropy")
            tcfg = training.TrainConfig(eta=cfg["train_eta"], max_epochs=cfg["train_epochs"], optimizer="sgd",
                                        batch_size=min(cfg["batch_size"], data.n),
                                        seed=derive_seed(seed, "igr", "train", w, s))
            rec, _ = training.train(spec, data, tcfg)
            theta, snap_loss = rec.theta, rec.final_loss
        out = []
        g = models.loss_grad(spec, theta, data)
        r_ig = float(g @ g / spec.n_params)
        acc = None
        if test is not None and test.n:
            acc = float(np.mean(models.forward(spec, theta, test.X).argmax(1) == test.y.argmax(1)))
        for eta in cfg["etas"]:
            samples, system = igr_probe(spec, data, theta, eta, cfg["probe_steps"], cfg["substeps"])
            lam = est.igr_fit(samples, spec.n_params)
            out.append((eta, spec.n_params, lam, est.fit_linear(system), r_ig, acc, snap_loss))
        return out

    outcomes = fan_out(one, tasks, cfg["parallelism"], label=lambda t: f"{t[0]} width={t[1]} seed={t[2]}")
    cols = ("model", "width", "seed", "eta", "p", "lambda_hat", "lambda_theory", "ratio", "abs_error", "rel_error",
            "residual_mse", "cond", "rank", "r_ig", "test_accuracy", "snapshot_loss", "status")
    table = Table("main", cols)
    halving = Table("halving", ("model", "width", "seed", "eta", "eta_half", "abs_error_ratio", "rel_error_ratio"))
    summary = []
    for (kind, w, s), o in zip(tasks, outcomes):
        if not o.ok:
            table.add(**{c: None for c in cols} | {"model": kind, "width": w, "seed": s, "status": o.error})
            continue
        errs = {}
        for eta, p, lam, r, r_ig, acc, snap in o.value:
            theory = oracles.barrett_lambda(eta, p)
            errs[eta] = (abs(lam - theory), abs(lam - theory) / theory)
            table.add(model=kind, width=w, seed=s, eta=eta, p=p, lambda_hat=lam, lambda_theory=theory,
                      ratio=lam / theory, abs_error=errs[eta][0], rel_error=errs[eta][1],
                      residual_mse=r.residual_mse, cond=r.diagnostics["cond"], rank=r.diagnostics["rank"],
                      r_ig=r_ig, test_accuracy=acc, snapshot_loss=snap, status="ok")
            summary.append(f"igr {kind} width={w} seed={s} eta={eta!r}: lambda_hat/(eta p/4)={lam / theory:.5f}")
        for eta in errs:
            half = eta / 2
            match = [e for e in errs if np.isclose(e, half, rtol=1e-12, atol=0)]
            if match:
                a, b = errs[eta], errs[match[0]]
                halving.add(model=kind, width=w, seed=s, eta=eta, eta_half=match[0],
                            abs_error_ratio=a[0] / b[0] if b[0] > 0 else float("inf"),
                            rel_error_ratio=a[1] / b[1] if b[1] > 0 else float("inf"))
    return RunOutput([table, halving], len(tasks), _failed(outcomes), summary, _timings(outcomes))


RUNNERS = {
    "gradcheck": run_gradcheck,
    "ridge": run_ridge,
    "elasticnet": run_elasticnet,
    "early-stopping": run_early_stopping,
    "bootstrap": run_bootstrap,
    "dropout": run_dropout,
    "igr": run_igr,
}


def output_stem(cfg: dict) -> str:
    exp = cfg["experiment"]
    if exp == "early-stopping":
        return f"early-stopping_{cfg['panel']}"
    if exp == "bootstrap":
        return f"bootstrap_{cfg['mode']}"
    return exp
