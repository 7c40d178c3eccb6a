"""Command-line entry point.

Subcommands cover the full workflow: ``synth`` writes a synthetic scenario,
``pretrain`` fits the per-domain factor models (plain or sharpness-aware),
``train`` fits a mapping (emcdr | scdr | scdr_minus), and ``eval`` /
``attack`` / ``landscape`` / ``sharpness`` produce report files. Every
command is a pure function of (config file, input files, seed): re-runs are
byte-identical. Existing outputs are never overwritten without --force.

Exit codes: 0 success, 2 validation error, 3 numeric divergence,
4 missing input.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import analysis, data, factorization, mapping
from .errors import DivergenceError, MissingInputError, ValidationError
from .perturbation import PerturbConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out": "runs/default",
    "synth": {
        "users": 2000,
        "items": 500,
        "overlap_ratio": 0.05,
        "dim": 10,
        "noise": 0.3,
        "map_kind": "tanh",
        "beta": 0.8,
        "ratings_per_user": 30,
    },
    "pretrain": {
        "epochs": 30,
        "learning_rate": 0.01,
        "batch_size": 256,
        "weight_decay": 0.0,
        "init_std": 0.01,
        "dim": 10,
        "rho": 0.05,
        "k": 5,
        "alpha": None,
    },
    "train": {
        "epochs": 300,
        "learning_rate": 0.01,
        "batch_size": 256,
        "hidden": 50,
        "rho": 0.3,
        "k": 5,
        "alpha": None,
        "tune_source_embeddings": True,
    },
    "attack": {"epsilons": [0.0, 0.25, 0.5, 0.75, 1.0]},
    "landscape": {
        "zeta_min": -1.0,
        "zeta_max": 1.0,
        "gamma_min": -1.0,
        "gamma_max": 1.0,
        "resolution": 21,
        "n_samples": None,
        "seed": None,
    },
    "sharpness": {"rho": 0.3, "k": 5},
}

METHODS = ("emcdr", "scdr", "scdr_minus")
MODES = ("plain", "sharpness_aware")

# scdr consumes sharpness-aware pretraining; the baseline and the ablation
# without it consume plain checkpoints
_METHOD_MODE = {"emcdr": "plain", "scdr": "sharpness_aware", "scdr_minus": "plain"}


def load_config(path: str | None) -> dict:
    """Defaults merged with the optional JSON config file; flags win later."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ValidationError("config must be a JSON object")
    for key, value in user.items():
        if key not in cfg:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config section {key!r} must be an object")
            for sub, subval in value.items():
                if sub not in cfg[key]:
                    raise ValidationError(f"unknown config key {key}.{sub}")
                cfg[key][sub] = subval
        else:
            cfg[key] = value
    return cfg


def _check_outputs(paths, force: bool) -> None:
    if force:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise ValidationError(
            "refusing to overwrite existing outputs (use --force): " + ", ".join(existing)
        )


def _train_config(section: dict, seed: int) -> factorization.TrainConfig:
    return factorization.TrainConfig(
        epochs=int(section["epochs"]),
        learning_rate=float(section["learning_rate"]),
        batch_size=int(section["batch_size"]),
        weight_decay=float(section.get("weight_decay", 0.0)),
        init_std=float(section.get("init_std", 0.01)),
        dim=int(section.get("dim", 10)),
        seed=int(seed),
    )


def _perturb_config(section: dict) -> PerturbConfig:
    alpha = section.get("alpha")
    return PerturbConfig(
        rho=float(section["rho"]),
        k=int(section["k"]),
        alpha=None if alpha is None else float(alpha),
    )


def _write_trace(trace: list[float], path: Path) -> None:
    lines = ["epoch,loss"]
    lines.extend(f"{i},{v!r}" for i, v in enumerate(trace))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_scenario(out: Path) -> data.CdrScenario:
    return data.load_scenario(out / "scenario.json")


def cmd_synth(cfg: dict, out: Path, seed: int, force: bool) -> None:
    section = dict(cfg["synth"])
    spec = data.SyntheticSpec(
        users=int(section["users"]),
        items=int(section["items"]),
        overlap_ratio=float(section["overlap_ratio"]),
        dim=int(section["dim"]),
        noise=float(section["noise"]),
        map_kind=str(section["map_kind"]),
        seed=int(seed),
        beta=float(section["beta"]),
        ratings_per_user=int(section["ratings_per_user"]),
    )
    outputs = [out / n for n in
               ("source_ratings.csv", "target_ratings.csv", "scenario.json", "ground_truth.json")]
    _check_outputs(outputs, force)
    scenario, sidecar = data.generate_synthetic(spec)
    out.mkdir(parents=True, exist_ok=True)
    data.write_ratings(scenario.source, outputs[0])
    data.write_ratings(scenario.target, outputs[1])
    data.save_manifest(scenario, outputs[2], "source_ratings.csv", "target_ratings.csv",
                       sidecar="ground_truth.json")
    data.save_sidecar(sidecar, outputs[3])
    print(f"wrote scenario with {len(scenario.overlap)} overlapping users to {out}")


def cmd_pretrain(cfg: dict, out: Path, seed: int, force: bool, mode: str) -> None:
    if mode not in MODES:
        raise ValidationError(f"unknown pretrain mode {mode!r}")
    scenario = _load_scenario(out)
    section = cfg["pretrain"]
    train_cfg = _train_config(section, seed)
    perturb = _perturb_config(section) if mode == "sharpness_aware" else None
    outputs = [out / f"{stem}_{mode}.{ext}"
               for stem, ext in (("source_model", "json"), ("target_model", "json"),
                                 ("source_trace", "csv"), ("target_trace", "csv"))]
    _check_outputs(outputs, force)
    if perturb is None:
        src = factorization.train_mf(scenario.source, train_cfg)
        tgt = factorization.train_mf(scenario.target_training_dataset(), train_cfg)
    else:
        src = factorization.train_smf(scenario.source, train_cfg, perturb)
        tgt = factorization.train_smf(scenario.target_training_dataset(), train_cfg, perturb)
    factorization.save_factor_model(src.model, outputs[0], train_cfg, perturb)
    factorization.save_factor_model(tgt.model, outputs[1], train_cfg, perturb)
    _write_trace(src.loss_trace, outputs[2])
    _write_trace(tgt.loss_trace, outputs[3])
    print(f"pretrained {mode} factor models (final losses "
          f"{src.loss_trace[-1] if src.loss_trace else float('nan'):.4f} / "
          f"{tgt.loss_trace[-1] if tgt.loss_trace else float('nan'):.4f})")


def _load_models_for(method: str, out: Path, scenario: data.CdrScenario):
    mode = _METHOD_MODE[method]
    src_model, _ = factorization.load_factor_model(out / f"source_model_{mode}.json")
    tgt_model, _ = factorization.load_factor_model(out / f"target_model_{mode}.json")
    if src_model.d != tgt_model.d:
        raise ValidationError("source and target checkpoints disagree on latent dim")
    if (src_model.U.shape[0] != scenario.source.n_users
            or src_model.V.shape[0] != scenario.source.n_items):
        raise ValidationError("source checkpoint does not match the scenario's shape")
    if (tgt_model.U.shape[0] != scenario.target.n_users
            or tgt_model.V.shape[0] != scenario.target.n_items):
        raise ValidationError("target checkpoint does not match the scenario's shape")
    return src_model, tgt_model


def cmd_train(cfg: dict, out: Path, seed: int, force: bool, method: str) -> None:
    if method not in METHODS:
        raise ValidationError(f"unknown train method {method!r}")
    scenario = _load_scenario(out)
    src_model, tgt_model = _load_models_for(method, out, scenario)
    section = cfg["train"]
    base = factorization.TrainConfig(
        epochs=int(section["epochs"]),
        learning_rate=float(section["learning_rate"]),
        batch_size=int(section["batch_size"]),
        dim=src_model.d,
        seed=int(seed),
    )
    outputs = [out / f"mapping_{method}.json", out / f"mapping_trace_{method}.csv"]
    _check_outputs(outputs, force)
    echo = {"method": method, "seed": seed, "epochs": base.epochs,
            "learning_rate": base.learning_rate, "batch_size": base.batch_size,
            "hidden": int(section["hidden"])}
    if method == "emcdr":
        result = mapping.emcdr_train(scenario, src_model, tgt_model, base,
                                     hidden=int(section["hidden"]))
        mapping.save_mapping(result.net, outputs[0], config=echo)
        _write_trace(result.loss_trace, outputs[1])
    else:
        perturb = _perturb_config(section)
        echo.update({"rho": perturb.rho, "k": perturb.k, "alpha": perturb.alpha,
                     "tune_source_embeddings": bool(section["tune_source_embeddings"])})
        train_cfg = mapping.ScdrTrainConfig(
            base=base,
            perturb=perturb,
            tune_source_embeddings=bool(section["tune_source_embeddings"]),
            hidden=int(section["hidden"]),
        )
        result = mapping.scdr_train(scenario, src_model, tgt_model, train_cfg)
        rows = [s for s, _ in scenario.train_pairs]
        mapping.save_mapping(
            result.net, outputs[0], config=echo,
            tuned_users=scenario.train_user_tokens,
            tuned_vectors=result.tuned_source_U[rows],
        )
        _write_trace(result.loss_trace, outputs[1])
    print(f"trained {method} mapping (final loss "
          f"{result.loss_trace[-1] if result.loss_trace else float('nan'):.4f})")


def _load_eval_inputs(out: Path, method: str):
    scenario = _load_scenario(out)
    src_model, tgt_model = _load_models_for(method, out, scenario)
    net, _ = mapping.load_mapping(out / f"mapping_{method}.json")
    if net.d != src_model.d:
        raise ValidationError("mapping checkpoint does not match the factor models' latent dim")
    return scenario, src_model, tgt_model, net


def cmd_eval(cfg: dict, out: Path, seed: int, force: bool, method: str) -> None:
    scenario, src_model, tgt_model, net = _load_eval_inputs(out, method)
    target = out / f"eval_{method}.json"
    _check_outputs([target], force)
    report = analysis.evaluate(net, src_model, tgt_model, scenario)
    analysis.save_eval_report(report, target)
    print(f"{method}: MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  (n={report.n})")


def cmd_attack(cfg: dict, out: Path, seed: int, force: bool, method: str) -> None:
    scenario, src_model, tgt_model, net = _load_eval_inputs(out, method)
    target = out / f"attack_{method}.json"
    _check_outputs([target], force)
    entries = analysis.fgsm_sweep(net, src_model, tgt_model, scenario, cfg["attack"]["epsilons"])
    analysis.save_attack_report(entries, target)
    for eps, report in entries:
        print(f"{method} eps={eps:g}: MAE {report.mae:.4f}  RMSE {report.rmse:.4f}")


def cmd_landscape(cfg: dict, out: Path, seed: int, force: bool, method: str) -> None:
    scenario, src_model, tgt_model, net = _load_eval_inputs(out, method)
    section = cfg["landscape"]
    spec = analysis.LandscapeSpec(
        zeta_min=float(section["zeta_min"]),
        zeta_max=float(section["zeta_max"]),
        gamma_min=float(section["gamma_min"]),
        gamma_max=float(section["gamma_max"]),
        resolution=int(section["resolution"]),
        n_samples=None if section["n_samples"] is None else int(section["n_samples"]),
        seed=int(seed) if section["seed"] is None else int(section["seed"]),
    )
    target = out / f"landscape_{method}.csv"
    _check_outputs([target], force)
    grid = analysis.landscape_grid(net, src_model, tgt_model, scenario, spec)
    analysis.save_landscape(grid, target)
    print(f"{method}: {grid.loss.shape[0]}x{grid.loss.shape[1]} landscape grid, "
          f"loss range [{grid.loss.min():.4f}, {grid.loss.max():.4f}]")


def cmd_sharpness(cfg: dict, out: Path, seed: int, force: bool, method: str) -> None:
    scenario, src_model, tgt_model, net = _load_eval_inputs(out, method)
    target = out / f"sharpness_{method}.json"
    _check_outputs([target], force)
    report = analysis.lipschitz_estimate(net, src_model, tgt_model, scenario,
                                         _perturb_config(cfg["sharpness"]))
    analysis.save_sharpness_report(report, target)
    print(f"{method}: lipschitz estimate {report.lipschitz_estimate:.6f} "
          f"over {report.n_users} users ({report.n_skipped} skipped)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdr",
        description="Sharpness-aware cross-domain recommendation workflows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, method=False, mode=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file (defaults built in)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--force", action="store_true", help="allow overwriting outputs")
        if method:
            p.add_argument("--method", choices=METHODS, required=True)
        if mode:
            p.add_argument("--mode", choices=MODES, default="plain")
        return p

    add("synth", "generate a synthetic two-domain scenario")
    add("pretrain", "train per-domain factor models", mode=True)
    add("train", "train a cross-domain mapping", method=True)
    add("eval", "cold-start MAE/RMSE report", method=True)
    add("attack", "FGSM robustness sweep", method=True)
    add("landscape", "2-D loss landscape grid export", method=True)
    add("sharpness", "Lipschitz sharpness estimate", method=True)
    return parser


_DISPATCH = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "landscape": cmd_landscape,
    "sharpness": cmd_sharpness,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        if args.out is not None:
            cfg["out"] = args.out
        out = Path(cfg["out"])
        seed = int(cfg["seed"])
        kwargs = {}
        if args.command == "pretrain":
            kwargs["mode"] = args.mode
        elif args.command in ("train", "eval", "attack", "landscape", "sharpness"):
            kwargs["method"] = args.method
        _DISPATCH[args.command](cfg, out, seed, args.force, **kwargs)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
