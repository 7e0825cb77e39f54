"""Command-line pipeline: train -> diagnose -> bound -> verify -> compare.

Configuration is TOML; outputs are RFC-4180 CSV and 17-significant-digit
JSON, and every output embeds the tool version, resolved config hash,
trajectory hash, and seeds so any file can be traced back to its run.
"""

from __future__ import annotations

import concurrent.futures
import math
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np

from . import __version__, _io, bound, gauss, proxies, schedule, train, verify
from .errors import ConfigError, FormatError, VPerturbError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

_SECTIONS = {
    "model": {"kind", "dim", "in_dim", "hidden", "a_kind", "a_seed", "center_mean", "lreg"},
    "dataset": {"seed", "n_train", "n_eval", "center_std", "noise_std"},
    "sgd": {"T", "eta", "batch", "subbatch", "replace", "seed", "w1"},
    "schedule": {"kind", "sigma", "sigma0", "c", "beta", "rho", "eps", "lambda0", "rank", "stat"},
    "reference": {"mode", "certificate", "public_seed", "ghost_seed"},
    "proxies": {"checkpoints", "m", "m_T", "deviation_mode", "seed", "common_random_numbers"},
    "bound": {"R", "mu", "rho", "kappa", "variant"},
    "output": {"trajectory", "prefix", "format"},
}


def load_config(path: str) -> tuple[dict, str]:
    """Parse a TOML config, rejecting unknown sections or keys.

    Returns the config dict and the sha256 of the raw file bytes.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    for section, body in cfg.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cfg, _io.sha256_hex(raw)


def _require(cfg: dict, section: str, key: str):
    if section not in cfg or key not in cfg[section]:
        raise ConfigError(f"config missing {section}.{key}")
    return cfg[section][key]


def _thread_count() -> int:
    raw = os.environ.get("VPERTURB_THREADS", "")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise ConfigError(f"VPERTURB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _provenance(config_hash: str, trajectory_hash: str | None, seeds: dict) -> dict:
    out = {"tool_version": __version__, "config_sha256": config_hash, "seeds": seeds}
    if trajectory_hash is not None:
        out["trajectory_sha256"] = trajectory_hash
    return out


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_io.dumps(payload) + "\n")


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _exit_code_for(exc: VPerturbError) -> int:
    return EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_DATA


@click.group()
@click.version_option(version=__version__, prog_name="vperturb")
def main():
    """Virtual-perturbation diagnostics for SGD trajectories."""


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed-override", type=int, default=None)
def cmd_train(config_path, out_path, seed_override):
    """Run SGD per the config and write the trajectory as JSONL."""
    try:
        cfg, _ = load_config(config_path)
        run_cfg = {
            "model": _require(cfg, "model", "kind") and cfg["model"],
            "dataset": cfg.get("dataset", {}),
            "sgd": dict(cfg.get("sgd", {})),
        }
        if "T" not in run_cfg["sgd"]:
            raise ConfigError("config missing sgd.T")
        if seed_override is not None:
            run_cfg["sgd"]["seed"] = seed_override
            run_cfg["dataset"] = dict(run_cfg["dataset"], seed=seed_override)
        if "seed" not in run_cfg["sgd"]:
            raise ConfigError("config missing sgd.seed")
        if "seed" not in run_cfg["dataset"]:
            raise ConfigError("config missing dataset.seed")
        traj = train.run_sgd(run_cfg)
        train.save_trajectory(traj, out_path)
    except ConfigError as exc:
        _fail(exc, EXIT_CONFIG)
    except (VPerturbError, KeyError, OSError) as exc:
        _fail(exc, EXIT_DATA)
    click.echo(f"wrote {out_path}")


def _diagnose(cfg: dict, config_hash: str, trajectory_path: str, seed_override=None):
    model = train.build_model(_require(cfg, "model", "kind") and cfg["model"])
    dataset = train.build_dataset(cfg["model"], cfg.get("dataset", {}))
    traj = train.load_trajectory(trajectory_path)
    if traj.dim != model.dim:
        raise FormatError(
            f"trajectory dimension {traj.dim} does not match model dimension {model.dim}"
        )
    sched = schedule.spec_from_toml(cfg.get("schedule", {"kind": "fixed_isotropic"}),
                                    dim=traj.dim, horizon=traj.horizon)
    ref_cfg = cfg.get("reference", {})
    ref = schedule.ReferenceSpec(
        mode=ref_cfg.get("mode", "synchronized_deterministic"),
        certificate=ref_cfg.get("certificate", ""),
        public_seed=ref_cfg.get("public_seed"),
    )
    ghost_traj = None
    if ref.mode == "ghost":
        ghost_seed = int(ref_cfg.get("ghost_seed", int(traj.meta["seed"]) + 1))
        ghost_cfg = {
            "model": cfg["model"],
            "dataset": dict(cfg.get("dataset", {}), seed=ghost_seed),
            "sgd": dict(cfg.get("sgd", {}), seed=ghost_seed),
        }
        ghost_traj = train.run_sgd(ghost_cfg)
    px = cfg.get("proxies", {})
    checkpoints = px.get("checkpoints", list(range(1, traj.horizon)))
    if isinstance(checkpoints, str):
        checkpoints = [int(x) for x in checkpoints.split(",") if x.strip()]
    opts = proxies.ProxyOptions(
        checkpoints=tuple(int(t) for t in checkpoints),
        mc_samples=int(px.get("m", 1000)),
        mc_samples_final=int(px.get("m_T", 1000)),
        deviation_mode=px.get("deviation_mode", "dev"),
        seed=int(px.get("seed", 0)) if seed_override is None else int(seed_override),
        common_random_numbers=bool(px.get("common_random_numbers", True)),
    )
    report = proxies.run_algorithm1(model, dataset, traj, sched, ref, opts,
                                    ghost_trajectory=ghost_traj)
    summary = proxies.report_to_summary(report)
    summary["provenance"] = _provenance(
        config_hash,
        train.trajectory_hash(traj),
        {"proxies": opts.seed, "sgd": traj.meta.get("seed")},
    )
    return report, summary


@main.command("diagnose")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--trajectory", "trajectory_path", required=True, type=click.Path())
@click.option("--out-prefix", required=True)
@click.option("--seed-override", type=int, default=None)
def cmd_diagnose(config_path, trajectory_path, out_prefix, seed_override):
    """Estimate per-checkpoint proxies and write CSV + summary JSON."""
    try:
        cfg, config_hash = load_config(config_path)
        report, summary = _diagnose(cfg, config_hash, trajectory_path, seed_override)
        with open(out_prefix + ".csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(proxies.report_to_csv(report))
        _write_json(out_prefix + ".json", summary)
    except ConfigError as exc:
        _fail(exc, EXIT_CONFIG)
    except (VPerturbError, OSError) as exc:
        _fail(exc, EXIT_DATA)
    click.echo(f"wrote {out_prefix}.csv and {out_prefix}.json")


@main.command("bound")
@click.option("--summary", "summary_path", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--variant", type=click.Choice(["general", "synchronized", "comparable"]),
              default=None)
def cmd_bound(summary_path, config_path, out_path, variant):
    """Assemble a bound report from a diagnostic summary."""
    try:
        cfg, config_hash = load_config(config_path)
        bnd = cfg.get("bound", {})
        r = float(_require(cfg, "bound", "R"))
        n = int(cfg.get("dataset", {}).get("n_train", 100))
        if variant is None:
            variant = bnd.get("variant", "general")
        with open(summary_path, encoding="utf-8") as fh:
            summary = _io.loads(fh.read())
        kappa = bnd.get("kappa")
        inputs = bound.inputs_from_summary(
            summary, r=r, n=n, kappa=float(kappa) if kappa is not None else None
        )
        if variant == "general":
            report = bound.general_bound(inputs)
        elif variant == "synchronized":
            report = bound.synchronized_bound(inputs)
        else:
            report = bound.comparable_bound(inputs)
        payload = bound.report_to_json(report)
        if "mu" in bnd:
            tr = summary["per_step"][-1]["tr_sigma_1t"] if summary["per_step"] else 0.0
            payload["smoothness_penalty"] = bound.smoothness_penalty(float(bnd["mu"]), tr)
        payload["provenance"] = _provenance(
            config_hash,
            summary.get("metadata", {}).get("trajectory_hash"),
            summary.get("provenance", {}).get("seeds", {}),
        )
        _write_json(out_path, payload)
    except ConfigError as exc:
        _fail(exc, EXIT_CONFIG)
    except (VPerturbError, OSError, KeyError) as exc:
        _fail(exc, EXIT_DATA)
    click.echo(f"wrote {out_path}")


def _verify_suite() -> list[dict]:
    """Small, fast oracle sweep; each entry carries a nonnegative-iff-pass margin."""
    checks = []

    grid_pairs = [(0.0, 1.0, 0.0, 2.0), (1.0, 1.0, 0.0, 1.0), (0.3, 0.7, -0.2, 1.4)]
    worst = 0.0
    for mp, vp, mq, vq in grid_pairs:
        closed = gauss.gaussian_kl(
            gauss.GaussianMoments(np.array([mp]), gauss.Isotropic(vp, 1)),
            gauss.GaussianMoments(np.array([mq]), gauss.Isotropic(vq, 1)),
        )
        grid = verify.auto_grid([mp, mq], [math.sqrt(vp), math.sqrt(vq)])
        numeric = verify.kl_numeric(
            lambda xs, m=mp, v=vp: np.exp(-0.5 * (xs - m) ** 2 / v) / math.sqrt(2 * math.pi * v),
            lambda xs, m=mq, v=vq: np.exp(-0.5 * (xs - m) ** 2 / v) / math.sqrt(2 * math.pi * v),
            grid,
        )
        worst = max(worst, abs(closed - numeric))
    checks.append({"name": "gaussian_kl_grid", "margin": 1e-6 - worst})

    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))
    worst = -np.inf
    for _ in range(10):
        ax = g.normal(size=2)
        ay = g.normal(size=2)
        coup = g.random((2, 2))
        coup /= coup.sum()
        lhs, rhs = verify.mixture_smoothing_check(ax, ay, coup, sigma=1.0)
        worst = max(worst, lhs - rhs)
    checks.append({"name": "mixture_smoothing", "margin": 1e-6 - worst})

    worst = -np.inf
    for _ in range(10):
        atoms = g.normal(size=2)
        probs = g.random(2)
        probs /= probs.sum()
        lhs, rhs = verify.mismatch_lemma_check(atoms, probs, m=float(g.normal()),
                                               sigma=0.8, sigma_ref=1.3)
        worst = max(worst, lhs - rhs)
    checks.append({"name": "mismatch_lemma", "margin": 1e-6 - worst})

    mi, chain = verify.toy_chain_mi(verify.ToyChainSpec.one_step(1.0, 1.0))
    checks.append({"name": "toy_chain_mi", "margin": min(chain - mi, math.log(2.0) - mi)})

    sigma3 = verify.third_moment_oracle_1d(1.0)
    checks.append(
        {"name": "third_moment", "margin": gauss.third_moment_bound(gauss.Isotropic(1.0, 1)) - sigma3}
    )

    traj = train.run_sgd({
        "model": {"kind": "quadratic", "dim": 3},
        "dataset": {"seed": 5, "n_train": 40},
        "sgd": {"T": 6, "eta": {"kind": "constant", "eta0": 0.1}, "batch": 8, "seed": 5},
    })
    ok = True
    for kind in ("fixed_isotropic", "adaptive_scalar", "adaptive_diagonal",
                 "adam_proportional", "lowrank_ridge"):
        spec = schedule.ScheduleSpec(kind=kind, dim=3, horizon=6)
        ok = ok and verify.predictability_sentinel(traj, spec)
    checks.append({"name": "predictability_sentinel", "margin": 0.0 if ok else -1.0})

    emp, target = verify.accumulated_cov_check(
        traj, schedule.ScheduleSpec(kind="fixed_isotropic", dim=3, horizon=6, sigma=0.1),
        t=5, replications=10_000,
    )
    rel = abs(np.trace(emp) - target.trace()) / target.trace()
    checks.append({"name": "accumulated_cov", "margin": 0.05 - rel})
    return checks


@main.command("verify")
@click.option("--out", "out_path", type=click.Path(), default=None)
def cmd_verify(out_path):
    """Run the oracle suite; exit 0 iff every margin is nonnegative."""
    try:
        checks = _verify_suite()
    except VPerturbError as exc:
        _fail(exc, _exit_code_for(exc))
    ok = all(c["margin"] >= 0 for c in checks)
    payload = {"tool_version": __version__, "passed": ok, "checks": checks}
    if out_path:
        _write_json(out_path, payload)
    for c in checks:
        click.echo(f"{'PASS' if c['margin'] >= 0 else 'FAIL'} {c['name']} margin={c['margin']:.3g}")
    if not ok:
        sys.exit(EXIT_VERIFY)


@main.command("compare")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--trajectory", "trajectory_path", required=True, type=click.Path())
@click.option("--schedules", required=True,
              help="comma-separated schedule kinds replayed on the same trajectory")
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_compare(config_path, trajectory_path, schedules, out_path):
    """Replay one trajectory under several schedules; emit a side-by-side CSV."""
    try:
        cfg, config_hash = load_config(config_path)
        kinds = [k.strip() for k in schedules.split(",") if k.strip()]
        if not kinds:
            raise ConfigError("no schedule kinds given")

        def one(kind: str):
            local = {k: dict(v) for k, v in cfg.items()}
            local.setdefault("schedule", {})
            local["schedule"] = dict(local["schedule"], kind=kind)
            # sample-driven schedules cannot legally synchronize their
            # reference; fall back to a ghost reference for those kinds
            if kind not in schedule.DETERMINISTIC_KINDS:
                local["reference"] = dict(local.get("reference", {}), mode="ghost")
                local["reference"].pop("certificate", None)
            _, summary = _diagnose(local, config_hash, trajectory_path)
            return kind, summary

        with concurrent.futures.ThreadPoolExecutor(max_workers=_thread_count()) as pool:
            results = list(pool.map(one, kinds))

        header = ["schedule", "B_hat", "R_hat", "sum_V_hat", "sum_Gamma_hat", "sum_C_hat",
                  "trajectory_sha256"]
        lines = [",".join(header)]
        for kind, summary in results:
            rows = summary["per_step"]
            lines.append(",".join(_io.csv_field(v) for v in (
                kind,
                summary["B_hat"],
                summary["R_hat"],
                sum(r["V_hat"] for r in rows),
                sum(r["Gamma_hat"] or 0.0 for r in rows),
                sum(r["C_hat"] for r in rows),
                summary["metadata"]["trajectory_hash"],
            )))
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\r\n".join(lines) + "\r\n")
    except ConfigError as exc:
        _fail(exc, EXIT_CONFIG)
    except (VPerturbError, OSError) as exc:
        _fail(exc, EXIT_DATA)
    click.echo(f"wrote {out_path}")
