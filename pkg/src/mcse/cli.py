"""``mcse`` command line: simulate, train, enhance, evaluate, params, gradcheck, scanbench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("mcse")

DEFAULTS = {
    "preset": "desk",
    "model": {},
    "train": {},
    "data": {"n_items": 40, "duration": 1.0, "snr_grid": [0.0, 5.0, 10.0],
             "split_fractions": [0.8, 0.1, 0.1], "noise_kinds": ["white", "pink", "babble"]},
}


class CliError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: Optional[str], overrides: Sequence[str], seed: int) -> dict:
    """Defaults <- JSON config file <- ``section.key=value`` overrides; ``seed`` always wins."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {config_path}: {exc}") from exc
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for ov in overrides:
        if "=" not in ov:
            raise CliError(f"override {ov!r} is not key=value")
        key, value = ov.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    cfg["seed"] = seed
    return cfg


def model_config(cfg: dict, n_mics: Optional[int] = None):
    from .network import ModelConfig
    kw = dict(cfg.get("model", {}))
    if n_mics is not None:
        kw["n_mics"] = n_mics
    mics = kw.pop("n_mics", 6)
    if cfg.get("preset", "desk") == "full":
        return ModelConfig.full(mics, **kw)
    return ModelConfig.desk(mics, **kw)


def _echo(cfg: dict) -> None:
    print("resolved config: " + json.dumps(cfg, sort_keys=True))


def _run_dir(base: str, seed: int) -> Path:
    path = Path(base) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands ----------------------------------------------------------------------


def cmd_simulate(args, cfg) -> int:
    from . import arraysim
    d = cfg["data"]
    man = arraysim.simulate_dataset(args.out, int(d["n_items"]), seed=cfg["seed"], duration=float(d["duration"]),
                                    snr_grid=tuple(d["snr_grid"]), noise_kinds=tuple(d["noise_kinds"]),
                                    split_fractions=tuple(d["split_fractions"]))
    print(f"wrote {man}")
    return 0


def cmd_train(args, cfg) -> int:
    from . import arraysim
    from .network import Generator
    from .trainer import TrainConfig, Trainer
    manifest = arraysim.load_manifest(args.manifest)
    mics = args.mics or cfg["model"].get("n_mics", 6)
    from .arraysim import MIC_SUBSETS
    subset = MIC_SUBSETS.get(mics) if mics != 6 else None
    mcfg = model_config(cfg, mics)
    if subset is not None:
        mcfg = mcfg.replace(reference_index=subset.index(4))
    tcfg = TrainConfig.from_dict(dict(cfg["train"], seed=cfg["seed"]))
    if args.epochs is not None:
        tcfg = tcfg.replace(epochs=args.epochs)
    run = _run_dir(args.runs, cfg["seed"])
    (run / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    train = arraysim.load_split(manifest, "train", subset)
    val = arraysim.load_split(manifest, "val", subset)
    trainer = Trainer(Generator(mcfg, seed=cfg["seed"]), tcfg, run)
    for _ in range(tcfg.epochs):
        s = trainer.train_epoch(train, val)
        print(json.dumps(s, sort_keys=True), flush=True)
    print(f"run directory: {run}")
    return 0


def cmd_enhance(args, cfg) -> int:
    from . import dsp
    from .enhance import enhance_waveform
    from .trainer import load_checkpoint
    model = load_checkpoint(args.checkpoint)
    noisy, rate = dsp.read_wav(args.input)
    if rate != model.cfg.stft.sample_rate:
        raise CliError(f"{args.input}: sample rate {rate}, model expects {model.cfg.stft.sample_rate}")
    if noisy.shape[0] != model.cfg.n_mics:
        raise CliError(f"channel mismatch: {args.input} has {noisy.shape[0]} channels, "
                       f"checkpoint expects {model.cfg.n_mics}")
    dsp.write_wav(args.output, enhance_waveform(model, noisy), rate)
    print(f"wrote {args.output}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    from . import arraysim
    from .arraysim import MIC_SUBSETS
    from .metrics import evaluate_model
    from .trainer import load_checkpoint
    model = load_checkpoint(args.checkpoint)
    subset = MIC_SUBSETS.get(model.cfg.n_mics) if model.cfg.n_mics != 6 else None
    items = arraysim.load_split(arraysim.load_manifest(args.manifest), args.split, subset)
    report = evaluate_model(model, items, label=f"{args.split} M={model.cfg.n_mics}")
    print(report.render_table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return 0


def cmd_params(args, cfg) -> int:
    from .network import param_count
    if args.c_mid is not None:
        cfg["model"]["c_mid"] = args.c_mid
    base = model_config(cfg, args.mics)
    counts = param_count(base)
    width = max(len(k) for k in counts)
    for k, v in counts.items():
        print(f"{k.ljust(width)}  {v:>10,d}")
    print("\nmics  total       delta")
    prev = None
    for m in range(1, max(args.mics, 6) + 1):
        total = param_count(base.replace(n_mics=m, reference_index=min(base.reference_index, m - 1)))["total"]
        delta = "" if prev is None else str(total - prev)
        print(f"{m:<5d} {total:<11,d} {delta}")
        prev = total
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradsuite import run_suite
    reports = run_suite(seed=cfg["seed"])
    ok = True
    for name, rep in reports.items():
        print(f"{name:28s} {rep.summary()}")
        ok &= rep.passed
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_scanbench(args, cfg) -> int:
    from .scanbench import run_scanbench
    for row in run_scanbench(lengths=args.lengths, chunk=args.chunk, seed=cfg["seed"]):
        print(f"L={row['L']:<6d} seq {row['sequential_steps_per_s']:>12,.0f} steps/s  "
              f"chunked {row['chunked_steps_per_s']:>12,.0f} steps/s  max rel dev {row['max_rel_dev']:.2e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcse", description="Multi-channel speech enhancement toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="numeric worker threads (default 1)")
    common.add_argument("overrides", nargs="*", help="section.key=value overrides")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated dataset and manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a generator")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mics", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--runs", default="runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", parents=[common], help="enhance an M-channel WAV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("params", parents=[common], help="parameter counts and per-mic deltas")
    s.add_argument("--mics", type=int, default=6)
    s.add_argument("--c-mid", type=int)
    s.add_argument("--preset", choices=("desk", "full"), default=None)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("scanbench", parents=[common], help="sequential vs chunked scan")
    s.add_argument("--lengths", type=int, nargs="+", default=[64, 1000, 4096])
    s.add_argument("--chunk", type=int, default=16)
    s.set_defaults(func=cmd_scanbench)
    return p


THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _set_threads(n: int) -> None:
    """Thread caps only take effect before numpy is first imported."""
    if "numpy" in sys.modules:
        log.info("numpy already loaded; --threads %d is advisory", n)
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("MCSE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _set_threads(args.threads)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        if getattr(args, "preset", None):
            cfg["preset"] = args.preset
        _echo(cfg)
        return args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a message + exit code
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
