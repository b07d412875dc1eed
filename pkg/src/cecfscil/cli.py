"""Command line: ``cecfscil {pretrain,pil,run,eval,ablate}``.

Every subcommand reads one JSON config (``--config``; omitted means the
desk-scale defaults) and accepts dotted overrides such as
``--pil.iterations=50`` or ``--run.head=linear``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import DESK_CONFIG, RunConfig, load_config, parse_value
from .harness import (
    RunResult, ablate, ablation_csv, build_dataset, build_split, default_grid, derive_seed,
    load_checkpoints, pretrain_encoder, run_incremental, run_pipeline, train_adapter,
    write_loss_log, write_run,
)
from .numerics import save_params

log = logging.getLogger("cecfscil")


def _overrides(extra: list[str]) -> dict:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise SystemExit(f"unrecognised argument {arg!r}; overrides look like --section.key=value")
        key, value = arg[2:].split("=", 1)
        if "." not in key:
            raise SystemExit(f"override {arg!r} needs a dotted key such as --pil.iterations=50")
        out[key] = parse_value(value)
    return out


def _config(args, extra) -> RunConfig:
    try:
        if args.config:
            return load_config(args.config, _overrides(extra))
        return RunConfig.from_dict(DESK_CONFIG).with_overrides(_overrides(extra))
    except (KeyError, TypeError, ValueError) as err:
        raise SystemExit(f"bad configuration: {err}") from None


def _split_and_pretrained(cfg: RunConfig, seed: int):
    split = build_split(cfg, build_dataset(cfg, seed), seed)
    pretrained, adapter = load_checkpoints(cfg)
    return split, pretrained, adapter


def cmd_pretrain(cfg: RunConfig, args) -> int:
    split, _, _ = _split_and_pretrained(cfg, args.seed)
    res = pretrain_encoder(cfg, split, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "encoder.json", res.params,
                {"encoder": cfg.encoder.to_dict(), "train_accuracy": res.train_accuracy})
    save_params(out / "base_head.json", res.head, {"classes": res.classes})
    (out / "manifest.json").write_text(json.dumps(split.manifest(), indent=1) + "\n")
    with open(out / "pretrain_log.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{loss!r}\n" for i, loss in enumerate(res.losses))
    print(f"base-session train accuracy {100 * res.train_accuracy:.2f}%")
    return 0


def cmd_pil(cfg: RunConfig, args) -> int:
    split, pretrained, _ = _split_and_pretrained(cfg, args.seed)
    if pretrained is None:
        pretrained = pretrain_encoder(cfg, split, args.seed)
    res = train_adapter(cfg, pretrained.params, split, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "adapter.json").write_text(res.adapter.to_json())
    save_params(out / "encoder.json", res.encoder, {"encoder": cfg.encoder.to_dict()})
    write_loss_log(out / "loss_log.csv", res.log)
    last = res.log[-1]
    print(f"{len(res.log)} iterations, final loss {last[1]:.4f}")
    return 0


def _report(result: RunResult, out) -> None:
    write_run(out, result)
    m = result.metrics
    sys.stdout.write(m.sessions_csv())
    print(f"avg {100 * m.avg:.2f}  pd {100 * m.pd:.2f}")


def cmd_run(cfg: RunConfig, args) -> int:
    split, pretrained, adapter = _split_and_pretrained(cfg, args.seed)
    _report(run_pipeline(cfg, args.seed, pretrained, split, adapter, args.workers), args.out)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    """Deployment only: every trained component comes from the checkpoints."""
    split, pretrained, adapter = _split_and_pretrained(cfg, args.seed)
    if pretrained is None:
        raise SystemExit("eval needs checkpoints.encoder")
    if cfg.run.adapter and adapter is None:
        raise SystemExit("eval with run.adapter=true needs checkpoints.adapter")
    base = {**pretrained.head, "classes": pretrained.classes} if pretrained.head else None
    metrics = run_incremental(pretrained.params, cfg.encoder, adapter, split, cfg,
                              derive_seed(args.seed, "sessions"), base, args.workers)
    _report(RunResult(cfg, args.seed, split, metrics, pretrained, pretrained.params,
                      adapter if cfg.run.adapter else None, None), args.out)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    grid = json.loads(args.grid) if args.grid else default_grid(args.axis)
    if args.axis == "way-shot":
        grid = [tuple(v) for v in grid]
    pretrained, _ = load_checkpoints(cfg)
    rows = ablate(args.axis, grid, cfg, args.seed, pretrained)
    table = ablation_csv(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.csv").write_text(table)
    sys.stdout.write(table)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "pil": cmd_pil, "run": cmd_run, "eval": cmd_eval,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cecfscil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, allow_abbrev=False)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, required=name in ("pretrain", "pil", "run"),
                        default=0)
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--workers", type=int, default=1,
                        help="evaluation threads (results do not depend on it)")
        if name == "ablate":
            sp.add_argument("--axis", required=True,
                            choices=["way-shot", "rotation-degrees", "classifier-kind",
                                     "switches"])
            sp.add_argument("--grid", help="JSON list of grid values (default: the full grid)")
    return p


def main(argv: list[str] | None = None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args, extra)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    raise SystemExit(main())
