"""Command-line surface.

Subcommands: kernel, elbo, train, sample, compare, selftest. Configs are
JSON documents validated against explicit key sets (unknown keys are
rejected with their path). All numeric output is printed with full double
precision. Exit codes: 0 ok, 2 invalid input, 3 numerical degeneracy,
4 estimation failure, 5 selftest failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import data as data_mod
from . import elbo as elbo_mod
from . import kernel as kernel_mod
from . import matops
from . import sampler as sampler_mod
from . import train as train_mod
from .process import DiffusionSpec, LearnableParams, named_instance
from .score import AnalyticGaussianScore, MlpScore

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DEGENERATE = 3
EXIT_ESTIMATION = 4
EXIT_SELFTEST = 5


class ConfigError(ValueError):
    pass


def _check_keys(doc: dict, allowed: set, path: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _resolve_spec(doc, path: str = "spec"):
    """Spec config: a named instance, a file, an inline document, or a
    learnable declaration. Returns (spec, learnable-or-None)."""
    if isinstance(doc, str):
        if doc in ("vpsde", "cld", "alda", "malda"):
            return named_instance(doc), None
        return DiffusionSpec.from_json(_load_json(doc)), None
    _check_keys(doc, {"name", "hyper", "file", "inline", "learnable"}, path)
    if "learnable" in doc:
        sub = doc["learnable"]
        _check_keys(sub, {"k", "beta", "diagonal_d", "horizon", "eps"},
                    f"{path}.learnable")
        k = int(sub.get("k", 2))
        lp = LearnableParams.vpsde_equivalent(
            k, float(sub.get("beta", 2.0)), bool(sub.get("diagonal_d", True)))
        template = DiffusionSpec(
            k, np.zeros((k, k)), np.eye(k), np.eye(k),
            sched_q=named_instance("vpsde").sched_q,
            sched_d=named_instance("vpsde").sched_d,
            horizon=float(sub.get("horizon", 1.0)),
            eps=float(sub.get("eps", 1e-3)))
        return lp.to_spec(template), lp
    if "file" in doc:
        return DiffusionSpec.from_json(_load_json(doc["file"])), None
    if "inline" in doc:
        return DiffusionSpec.from_json(doc["inline"]), None
    if "name" in doc:
        return named_instance(doc["name"], doc.get("hyper", {})), None
    raise ConfigError(f"{path}: no spec source given")


def _resolve_dataset(doc, path: str = "dataset") -> np.ndarray:
    _check_keys(doc, {"name", "n", "seed", "params"}, path)
    arr = data_mod.make(doc["name"], int(doc["n"]), int(doc.get("seed", 0)),
                        doc.get("params", {}))
    if arr.shape[0] == 0:
        raise ConfigError(f"{path}: empty dataset")
    return arr


def _resolve_score(doc, spec, d: int, path: str = "score"):
    doc = doc or {"kind": "analytic"}
    _check_keys(doc, {"kind", "hidden", "checkpoint", "data_var", "seed"},
                path)
    kind = doc.get("kind", "analytic")
    if kind == "analytic":
        var = doc.get("data_var", [1.0] * d)
        return AnalyticGaussianScore(np.asarray(var, dtype=float), spec)
    if kind == "mlp":
        if "checkpoint" in doc:
            return MlpScore.load(doc["checkpoint"])
        return MlpScore(d, spec.k, tuple(doc.get("hidden", (64, 64, 64))),
                        seed=int(doc.get("seed", 0)))
    raise ConfigError(f"{path}: unknown score kind {kind!r}")


def _emit(text: str, out: str = None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------


def cmd_kernel(args) -> int:
    spec, _ = _resolve_spec(args.spec)
    cond = kernel_mod.Conditioning(args.mode)
    if spec.commuting_path():
        ker = kernel_mod.transition(spec, args.s, cond)
    else:
        ker = kernel_mod.transition_ode(spec, args.s, cond, args.steps)
    doc = ker.to_json()
    if args.oracle:
        oracle = kernel_mod.transition_ode(spec, args.s, cond, args.steps)
        disc = max(
            np.abs(ker.mean_map - oracle.mean_map).max(),
            np.abs(ker.cov - oracle.cov).max())
        doc["oracle"] = oracle.to_json()
        doc["max_abs_discrepancy"] = disc
    _emit(json.dumps(doc, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_elbo(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"dataset", "spec", "eval", "score"}, "config")
    spec, _ = _resolve_spec(cfg["spec"])
    dataset = _resolve_dataset(cfg["dataset"])
    ev = cfg.get("eval", {})
    _check_keys(ev, {"n_time", "batch", "seeds"}, "eval")
    n_time = int(ev.get("n_time", 16))
    batch = int(ev.get("batch", dataset.shape[0]))
    seeds = [int(s) for s in ev.get("seeds", [0])]
    score = _resolve_score(cfg.get("score"), spec, dataset.shape[1])
    form = args.form
    rows = []
    d = dataset.shape[1]
    try:
        for seed in seeds:
            est = elbo_mod.estimate_elbo(spec, score, dataset[:batch],
                                         n_time, seed, form=form)
            rows.append(est.csv_row(seed, form, n_time))
            print(f"# seed {seed}: total {est.total!r} nats "
                  f"({est.total / d!r} nats/dim) +- {est.stderr!r}")
    except (matops.MatrixError, np.linalg.LinAlgError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    _emit(elbo_mod.dump_csv(rows), args.out)
    return EXIT_OK


def _train_config(doc, seed: int) -> train_mod.TrainConfig:
    doc = dict(doc or {})
    allowed = {f.name for f in dataclasses.fields(train_mod.TrainConfig)}
    _check_keys(doc, allowed - {"seed"}, "train")
    return train_mod.TrainConfig(seed=seed, **doc)


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"dataset", "spec", "train", "score"}, "config")
    dataset = _resolve_dataset(cfg["dataset"])
    spec, learnable = _resolve_spec(cfg["spec"])
    config = _train_config(cfg.get("train"), args.seed)
    if learnable is not None:
        config.learn_inference = True
    score = _resolve_score(cfg.get("score", {"kind": "mlp"}), spec,
                           dataset.shape[1])
    state = train_mod.fit(dataset, spec, score, config, learnable)
    _emit(train_mod.history_csv(state), args.out)
    print(f"# final elbo {state.report['final_elbo']!r} "
          f"+- {state.report['final_stderr']!r} "
          f"(best {state.report['best_elbo']!r} "
          f"at step {state.report['best_step']})")
    if args.checkpoint and hasattr(state.score, "save"):
        state.score.save(args.checkpoint)
    if args.spec_out:
        state.current_spec().save(args.spec_out)
    if args.figures:
        from . import report
        report.training_curve(state.evals, args.figures)
    return EXIT_OK


def cmd_sample(args) -> int:
    spec, _ = _resolve_spec(args.spec)
    if args.checkpoint:
        score = MlpScore.load(args.checkpoint)
        d = score.d
    else:
        d = args.d
        score = AnalyticGaussianScore(np.ones(d), spec)
    z, _ = sampler_mod.generate(spec, score, args.n, d, args.steps,
                                args.seed, final_denoise=args.denoise)
    _emit(sampler_mod.dump_csv(z), args.out)
    if args.figures:
        from . import report
        report.sample_scatter(z, args.figures)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"dataset", "train", "eval", "specs"}, "config")
    dataset = _resolve_dataset(cfg["dataset"])
    ev = cfg.get("eval", {})
    _check_keys(ev, {"n_seeds"}, "eval")
    n_seeds = int(ev.get("n_seeds", 1))
    results = []
    for entry in cfg["specs"]:
        _check_keys(entry, {"label", "spec", "score"}, "specs[]")
        label = entry["label"]
        finals = []
        stderrs = []
        try:
            for rep in range(n_seeds):
                seed = args.seed + rep
                spec, learnable = _resolve_spec(entry["spec"])
                config = _train_config(cfg.get("train"), seed)
                if learnable is not None:
                    config.learn_inference = True
                score = _resolve_score(entry.get("score", {"kind": "mlp"}),
                                       spec, dataset.shape[1])
                state = train_mod.fit(dataset, spec, score, config, learnable)
                finals.append(state.report["final_elbo"])
                stderrs.append(state.report["final_stderr"])
            n_params = getattr(score, "param_count", 0)
            mean = float(np.mean(finals))
            if n_seeds > 1:
                err = float(np.std(finals, ddof=1) / np.sqrt(n_seeds))
            else:
                err = float(stderrs[0])
            results.append((label, spec.k, n_params, mean, err))
        except Exception as exc:  # keep going; report the failure inline
            print(f"# {label}: failed: {exc}", file=sys.stderr)
    results.sort(key=lambda r: -r[3])
    lines = ["spec,K,params,final_elbo,stderr"]
    for label, k, n_params, mean, err in results:
        lines.append(f"{label},{k},{n_params},{mean!r},{err!r}")
    _emit("\n".join(lines) + "\n", args.out)
    if args.figures:
        from . import report
        report.compare_bars([(r[0], r[3], r[4]) for r in results],
                            args.figures)
    return EXIT_OK


def cmd_selftest(args) -> int:
    failures = []
    rng = np.random.default_rng(7)
    for trial in range(8):
        k = int(rng.integers(1, 4))
        spec = _random_stable_spec(rng, k)
        for s in (0.1, 0.5, 1.0):
            a = kernel_mod.transition(spec, s)
            b = kernel_mod.transition_ode(spec, s, steps=800)
            err = (np.linalg.norm(a.cov - b.cov)
                   + np.linalg.norm(a.mean_map - b.mean_map))
            scale = max(np.linalg.norm(b.cov), 1e-12)
            if err / scale > 1e-6:
                failures.append(f"kernel oracle trial {trial} s={s}: {err}")
    for name in ("vpsde", "cld"):
        spec = named_instance(name)
        score = AnalyticGaussianScore(np.ones(1), spec)
        x = data_mod.gaussian(2000, 11)
        d = elbo_mod.estimate_elbo(spec, score, x, 8, 3, form="dsm")
        i = elbo_mod.estimate_elbo(spec, score, x, 8, 3, form="ism")
        gap = abs(d.total - i.total)
        bar = 3.0 * np.hypot(d.stderr, i.stderr)
        if gap > max(bar, 1e-8):
            failures.append(f"{name}: ism/dsm gap {gap} > {bar}")
    for line in failures:
        print(f"FAIL {line}", file=sys.stderr)
    if failures:
        return EXIT_SELFTEST
    print("selftest ok")
    return EXIT_OK


def _random_stable_spec(rng, k: int) -> DiffusionSpec:
    q = rng.normal(size=(k, k))
    d = rng.normal(size=(k, k)) / np.sqrt(k)
    ell = np.tril(rng.normal(size=(k, k)) / np.sqrt(k))
    np.fill_diagonal(ell, np.abs(np.diag(ell)) + 0.5)
    return DiffusionSpec(
        k, matops.make_skew(q), matops.make_psd(d) + 0.2 * np.eye(k),
        ell @ ell.T,
        sched_q=named_instance("vpsde").sched_q,
        sched_d=named_instance("vpsde").sched_d, horizon=4.0)


# --- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdiff",
                                description="multivariate diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernel", help="print a transition kernel")
    k.add_argument("--spec", required=True)
    k.add_argument("--s", type=float, required=True)
    k.add_argument("--mode", default="full-state",
                   choices=["full-state", "data-only"])
    k.add_argument("--oracle", action="store_true")
    k.add_argument("--steps", type=int, default=1000)
    k.add_argument("--out")
    k.set_defaults(fn=cmd_kernel)

    e = sub.add_parser("elbo", help="estimate the bound on a dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--form", default="dsm", choices=["dsm", "ism"])
    e.add_argument("--out")
    e.set_defaults(fn=cmd_elbo)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out")
    t.add_argument("--checkpoint")
    t.add_argument("--spec-out")
    t.add_argument("--figures")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate from a trained model")
    s.add_argument("--spec", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--d", type=int, default=1)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--denoise", action="store_true")
    s.add_argument("--out")
    s.add_argument("--figures")
    s.set_defaults(fn=cmd_sample)

    c = sub.add_parser("compare", help="train several processes head-to-head")
    c.add_argument("--config", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out")
    c.add_argument("--figures")
    c.set_defaults(fn=cmd_compare)

    st = sub.add_parser("selftest", help="run built-in consistency checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (matops.MatrixError, np.linalg.LinAlgError) as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
