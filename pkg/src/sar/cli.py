"""Command-line interface: synth, train, recognize, eval, attn-dump, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Configuration is
layered as defaults < ``--config`` JSON < ``--section.key=value`` flags, and
the effective configuration is written next to every command's outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("sar")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _default_train_config() -> dict:
    from .model import ModelConfig
    from .train import TrainConfig

    clean = {"distortions": [{"kind": "none"}]}
    curved = {"distortions": [{"kind": "curve", "amplitude": [1, 3], "wavelength": [16, 32]}]}
    rotated = {"distortions": [{"kind": "rotate", "max_degrees": 12}]}
    return {
        "seed": 0,
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        # one source per entry of train.group_sizes; a source is either
        # {"manifest": path} or {"synth": SynthSpec fields, "size": n}
        "data": {"sources": [{"synth": clean, "size": 1024},
                             {"synth": curved, "size": 1024},
                             {"synth": rotated, "size": 1024}],
                 "validation": None},
        "log_every": 10,
    }


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: dict, overrides: list[str], schema: dict | None = None) -> dict:
    """Apply ``--a.b=value`` tokens; keys must already exist in ``schema`` (default: ``config``)."""
    schema = config if schema is None else schema
    out = copy.deepcopy(config)
    for tok in overrides:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"unrecognized argument {tok!r} (overrides look like --key=value)")
        key, raw = tok[2:].split("=", 1)
        parts = key.split(".")
        node, ref = out, schema
        for p in parts[:-1]:
            if not isinstance(ref, dict) or p not in ref or not isinstance(ref[p], dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node.setdefault(p, {})
            ref = ref[p]
        if not isinstance(ref, dict) or parts[-1] not in ref:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return out


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("data",):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("SAR_THREADS")
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _read_lexicon(path: str | None) -> list[str] | None:
    if path is None:
        return None
    try:
        words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
    except FileNotFoundError:
        raise RuntimeError(f"lexicon not found: {path}") from None
    words = [w for w in words if w]
    if not words:
        raise RuntimeError(f"lexicon {path} is empty")
    return words


def _load_checkpoint(path: str | None):
    from .train import Checkpoint

    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise RuntimeError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


# ---------------------------------------------------------------- commands


def cmd_synth(args, overrides: list[str]) -> int:
    from dataclasses import asdict

    from .data import write_dataset
    from .synth import SynthSpec, SynthSpecError, synth_generate

    if args.n is None or args.n < 1:
        raise UsageError("--n must be a positive sample count")
    if args.out is None:
        raise UsageError("--out is required")
    base = asdict(SynthSpec())
    try:
        cfg = _merge(base, _load_json(args.config)) if args.config else base
        cfg = apply_overrides(cfg, overrides, base)
        if args.seed is not None:
            cfg["seed"] = args.seed
        spec = SynthSpec.from_dict(cfg)
        spec.validate()
    except (SynthSpecError, TypeError) as e:
        raise RuntimeError(f"invalid synth spec: {e}") from None
    out = Path(args.out)
    write_dataset(synth_generate(spec, args.n), out)
    _write_json(out / "config.json", {"command": "synth", "n": args.n, "spec": json.loads(spec.to_json())})
    print(f"wrote {args.n} samples to {out}")
    return 0


def _build_sources(cfg: dict, charset):
    from .data import load_manifest
    from .synth import SynthSpec, synth_generate

    sources = []
    for k, src in enumerate(cfg["data"]["sources"]):
        if "manifest" in src:
            samples = load_manifest(src["manifest"])
        elif "synth" in src:
            spec_d = {"charset": "".join(charset.symbols), "seed": cfg["seed"] * 1000 + k}
            spec_d.update(src["synth"])
            samples = synth_generate(SynthSpec.from_dict(spec_d), int(src.get("size", 1024)))
        else:
            raise UsageError(f"data source {k} needs 'manifest' or 'synth'")
        for s in samples:
            charset.validate(s.label)
        sources.append(samples)
    return sources


def cmd_train(args, overrides: list[str]) -> int:
    from .inference import predict_batch, sequence_accuracy
    from .model import SAR, ModelConfig
    from .train import Checkpoint, GroupSampler, TrainConfig, prepare_samples, train_loop, write_loss_log

    if args.out is None:
        raise UsageError("--out is required")
    base = _default_train_config()
    cfg = _merge(base, _load_json(args.config)) if args.config else base
    cfg = apply_overrides(cfg, overrides, base)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.variant is not None:
        cfg["model"]["variant"] = args.variant
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
        mcfg = ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    if len(cfg["data"]["sources"]) != len(tcfg.group_sizes):
        raise UsageError("train.group_sizes needs one count per data source")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.checkpoint is not None:
        resume = _load_checkpoint(args.checkpoint)
        mcfg = resume.model_config
        cfg["model"] = mcfg.to_dict()
    _write_json(out / "config.json", cfg)

    sources = _build_sources(cfg, mcfg.charset)
    prepared = [prepare_samples(s, mcfg.backbone.input_height) for s in sources]
    model = SAR(mcfg, resume.store if resume else None, seed=cfg["seed"])
    sampler = GroupSampler([len(s) for s in sources], tcfg.group_sizes, tcfg.batch_size,
                           tcfg.epochs_per_group, tcfg.groups, seed=tcfg.seed)
    start = 0
    if resume is not None:
        sampler.load_state(resume.sampler_state)
        start = resume.iteration
    log.info("model has %d parameters; %d iterations planned", model.store.num_scalars(), len(sampler))

    loss_path = out / "loss.csv"
    write_loss_log(loss_path, [], append=resume is not None and loss_path.exists())
    every = max(1, int(cfg.get("log_every", 10)))

    def on_log(it, lr, loss):
        write_loss_log(loss_path, [(it, lr, loss)], append=True)
        if it % every == 0:
            log.info("iter %d lr %.3g loss %.4f", it, lr, loss)

    ckpt, history = train_loop(model, tcfg, sampler, prepared, start_iteration=start,
                               checkpoint_path=out / "checkpoint.sarc", on_log=on_log)
    summary = {"iterations": ckpt.iteration, "final_loss": history[-1][2] if history else None}
    if cfg["data"].get("validation"):
        from .data import load_manifest

        val = load_manifest(cfg["data"]["validation"])
        preds = predict_batch(model, [s.image for s in val])
        summary["validation_accuracy"] = sequence_accuracy(preds, [s.label for s in val])
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_recognize(args, overrides: list[str]) -> int:
    from .data import read_pnm
    from .inference import lexicon_match, recognize

    if overrides:
        raise UsageError(f"unrecognized arguments {overrides}")
    if not args.images:
        raise UsageError("give at least one image")
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model()
    lexicon = _read_lexicon(args.lexicon)
    for path in args.images:
        img = read_pnm(path)
        rec = recognize(model, img, beam=args.beam, rotate=args.rotate)
        for cand in rec.candidates:
            log.debug("decode %s orientation %+d: %r score %.4f", path, cand.orientation, cand.text, cand.score)
        text = lexicon_match(rec.text, lexicon) if lexicon else rec.text
        print(f"{path}\t{text}\t{rec.score:.6f}")
    return 0


def cmd_eval(args, overrides: list[str]) -> int:
    from .data import iter_manifest, load_manifest, read_pnm
    from .inference import lexicon_accuracy, predict_batch, recognize, sequence_accuracy

    if overrides:
        raise UsageError(f"unrecognized arguments {overrides}")
    if args.manifest is None:
        raise UsageError("--manifest is required")
    lexicon = _read_lexicon(args.lexicon)
    if args.predictions is not None:
        # score a file of image_path<TAB>prediction lines against the manifest labels
        labels = {Path(p).name: lab for p, lab in _read_pairs(args.manifest)}
        pairs = _read_pairs(args.predictions)
        preds = [p for _, p in pairs]
        try:
            truth = [labels[Path(k).name] for k, _ in pairs]
        except KeyError as e:
            raise RuntimeError(f"prediction for unknown image {e}") from None
    else:
        ckpt = _load_checkpoint(args.checkpoint)
        model = ckpt.model()
        samples = load_manifest(args.manifest)
        truth = [s.label for s in samples]
        if args.beam > 1 or args.rotate:
            preds = [recognize(model, s.image, beam=args.beam, rotate=args.rotate).text for s in samples]
        else:
            preds = predict_batch(model, [s.image for s in samples])
    report = {"samples": len(truth), "sequence_accuracy": 100.0 * sequence_accuracy(preds, truth)}
    print(f"sequence accuracy: {report['sequence_accuracy']:.1f}%")
    if lexicon:
        report["lexicon_accuracy"] = 100.0 * lexicon_accuracy(preds, truth, lexicon)
        print(f"lexicon accuracy: {report['lexicon_accuracy']:.1f}%")
    if args.out:
        out = Path(args.out)
        _write_json(out / "report.json", report)
        with open(out / "predictions.tsv", "w", encoding="utf-8", newline="\n") as f:
            for p, t in zip(preds, truth):
                f.write(f"{p}\t{t}\n")
    return 0


def _read_pairs(path: str) -> list[tuple[str, str]]:
    p = Path(path)
    if not p.exists():
        raise RuntimeError(f"file not found: {path}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise RuntimeError(f"{path}:{lineno}: expected two tab-separated fields")
        out.append((parts[0], parts[1]))
    return out


def cmd_attn_dump(args, overrides: list[str]) -> int:
    import numpy as np

    from .data import read_pnm, resize_policy, write_pnm
    from .inference import beam_search, greedy_decode, _features_for

    if overrides:
        raise UsageError(f"unrecognized arguments {overrides}")
    if args.out is None or not args.images or len(args.images) != 1:
        raise UsageError("attn-dump needs --out and exactly one image")
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model()
    img = read_pnm(args.images[0])
    fmap = _features_for(model, img)
    rec = beam_search(model, fmap, args.beam) if args.beam > 1 else greedy_decode(model, fmap)[0]
    if not rec.attention:
        raise RuntimeError("decoding produced no steps")
    resized, _ = resize_policy(img, height=model.config.backbone.input_height)
    in_h, in_w = resized.shape[:2]
    fh, fw = rec.attention[0].shape
    rows = (np.arange(in_h) * fh) // in_h
    cols = (np.arange(in_w) * fw) // in_w

    def to_pgm(a: np.ndarray) -> np.ndarray:
        peak = float(a.max())
        scaled = a / peak * 255.0 if peak > 0 else np.zeros_like(a)
        return np.rint(scaled[rows][:, cols]).astype(np.uint8)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    symbols = list(rec.text) + ["<END>"]
    for k, a in enumerate(rec.attention):
        write_pnm(out / f"step_{k:03d}.pgm", to_pgm(a))
    total = np.sum(rec.attention, axis=0)
    write_pnm(out / "aggregate.pgm", to_pgm(total))
    write_pnm(out / "input.pgm", np.clip(np.rint(resized), 0, 255).astype(np.uint8).reshape(in_h, in_w, -1)[:, :, 0])
    _write_json(out / "attention.json", {
        "image": str(args.images[0]),
        "text": rec.text,
        "score": rec.score,
        "input_shape": [in_h, in_w],
        "feature_shape": [fh, fw],
        "steps": [{"symbol": s, "alpha": a.tolist()} for s, a in zip(symbols, rec.attention)],
    })
    print(f"{rec.text}\t{rec.score:.6f}\t{len(rec.attention)} maps written to {out}")
    return 0


def cmd_gradcheck(args, overrides: list[str]) -> int:
    from . import verify

    if overrides:
        raise UsageError(f"unrecognized arguments {overrides}")
    variants = (args.variant,) if args.variant else ("proposed2d",)
    ok = True
    for r in verify.check_ops():
        ok &= r.ok
        print(f"{r.name:28s} max_rel_err {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}", flush=True)
    for v in () if args.ops_only else variants:
        r = verify.check_model(v, seed=args.seed or 0)
        ok &= r.ok
        print(f"{r.name:28s} max_rel_err {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}  ({r.seconds:.1f}s)",
              flush=True)
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("--lexicon", help="file with one lexicon word per line")
    common.add_argument("--rotate", action="store_true", help="try +/-90 degree turns on tall images")
    common.add_argument("--beam", type=int, default=5, metavar="K")
    common.add_argument("--variant", choices=["proposed2d", "traditional2d", "oned"])
    common.add_argument("--threads", type=int, metavar="N", help="BLAS threads (default: $SAR_THREADS)")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="sar", description="Show-attend-and-read text recognizer")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, help="number of samples")
    sub.add_parser("train", parents=[common], help="train a model")
    r = sub.add_parser("recognize", parents=[common], help="transcribe images")
    r.add_argument("images", nargs="*")
    e = sub.add_parser("eval", parents=[common], help="accuracy on a manifest")
    e.add_argument("--manifest")
    e.add_argument("--predictions", help="score these predictions instead of running a model")
    a = sub.add_parser("attn-dump", parents=[common], help="write attention maps for one image")
    a.add_argument("images", nargs="*")
    g = sub.add_parser("gradcheck", parents=[common], help="verify gradients against finite differences")
    g.add_argument("--ops-only", action="store_true", help="skip the micro-model check")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "recognize": cmd_recognize,
    "eval": cmd_eval,
    "attn-dump": cmd_attn_dump,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        _apply_threads(args.threads)
        if args.beam < 1:
            raise UsageError("--beam must be >= 1")
        return COMMANDS[args.command](args, extra)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"sar {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        if args.verbose:
            log.exception("failed")
        print(f"sar {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
