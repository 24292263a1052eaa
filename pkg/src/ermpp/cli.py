"""Command-line entry point.

    ermpp run CONFIG [--workers N] [--out DIR]
    ermpp pretrain CONFIG [--out DIR]
    ermpp verify

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import MultiDomainDataset, generate
from .errors import ConfigError, ContractError
from .nn import ModelSpec
from .pipeline import (
    ABLATION_ROWS,
    EvalReport,
    ablation_grid,
    leave_one_domain_out,
    pretrained_backbone,
    reports_csv,
    reports_markdown,
)
from .pretrain import backbone_only
from . import verify as verify_mod

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _dataset(cfg: ExperimentConfig) -> MultiDomainDataset:
    try:
        return generate(cfg.dataset)
    except (ContractError, TypeError) as e:
        raise ConfigError(f"invalid [dataset] section: {e}") from None


def _spec(cfg: ExperimentConfig, ds: MultiDomainDataset) -> ModelSpec:
    return ModelSpec(ds.input_dim, cfg.hidden_dims, ds.num_classes, cfg.use_batchnorm)


def _held_out(cfg: ExperimentConfig, ds: MultiDomainDataset) -> list[str] | None:
    if cfg.held_out is None:
        return None
    unknown = [d for d in cfg.held_out if d not in ds.domains]
    if unknown:
        raise ConfigError(f"held_out names unknown domains {unknown} (dataset has {ds.domain_names})")
    return list(cfg.held_out)


def execute(cfg: ExperimentConfig, out_dir: Path, workers: int) -> list[EvalReport]:
    """Run the configured experiment and write every artifact under ``out_dir``."""
    ds = _dataset(cfg)
    spec = _spec(cfg, ds)
    held_out = _held_out(cfg, ds)
    digest = cfg.digest()
    backbone = None
    if cfg.init_checkpoint:
        backbone = backbone_only(load_checkpoint(cfg.init_checkpoint))
    runs_dir, ckpt_dir = out_dir / "runs", out_dir / "checkpoints"
    runs_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    common = dict(spec=spec, backbone=backbone, pretrain_cfg=cfg.pretrain, held_out=held_out,
                  workers=workers, config_digest=digest, checkpoint_dir=str(ckpt_dir))
    if cfg.mode == "ablation":
        sets = [(f"exp{n}", ABLATION_ROWS[n]) for n in cfg.ablation_rows]
        reports = ablation_grid(ds, cfg.schedule, sets, cfg.seeds, **common)
    else:
        label = cfg.label or cfg.mode
        extra = {"smpa_cfg": cfg.smpa} if cfg.mode == "smpa" else {}
        reports = [leave_one_domain_out(ds, cfg.schedule, cfg.toggles, cfg.seeds, label=label,
                                        **common, **extra)]
    for rep in reports:
        for rec in rep.runs:
            name = f"{rec.label}_{rec.held_out_domain}_s{rec.seed}.json"
            (runs_dir / name).write_text(rec.to_json() + "\n")
    (out_dir / "report.csv").write_text(reports_csv(reports, digest))
    header = (
        f"# {cfg.label or cfg.mode} report\n\n"
        f"config digest: `{digest}`\n\n"
        f"seeds: {cfg.seeds}\n\n"
        f"```json\n{json.dumps(cfg.to_dict(), indent=1, sort_keys=True)}\n```"
    )
    (out_dir / "report.md").write_text(reports_markdown(reports, header))
    (out_dir / "config.json").write_text(
        json.dumps({"digest": digest, "config": cfg.to_dict()}, indent=1, sort_keys=True) + "\n"
    )
    return reports


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    workers = args.workers or cfg.workers
    reports = execute(cfg, out, workers)
    for rep in reports:
        print(f"{rep.label}: mean held-out accuracy {rep.mean:.4f} over {len(rep.runs)} runs")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    ds = _dataset(cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = pretrained_backbone(ds, _spec(cfg, ds), cfg.pretrain, cfg.seed)
    path = out / "backbone.ckpt"
    sha = save_checkpoint(state, path)
    meta = {"config_digest": cfg.digest(), "checkpoint_sha256": sha, "pretrain": cfg.pretrain.to_dict(),
            "hidden_dims": list(cfg.hidden_dims), "seed": cfg.seed}
    (out / "backbone.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path} (sha256 {sha})")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ermpp", description="Desk-scale domain-generalization training lab.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a leave-one-domain-out, ablation or specialist experiment")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None, help="parallel runs (overrides the config)")
    run.add_argument("--out", default=None, help="output directory (overrides the config)")
    run.set_defaults(fn=cmd_run)
    pre = sub.add_parser("pretrain", help="pretrain a backbone usable as strong initialization")
    pre.add_argument("config")
    pre.add_argument("--out", default=None)
    pre.set_defaults(fn=cmd_pretrain)
    ver = sub.add_parser("verify", help="run the oracle suites")
    ver.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # any runtime failure maps to the stable exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
