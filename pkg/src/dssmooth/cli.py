"""Command-line front end.

Subcommands mirror the pipeline stages: ``watermark`` builds the protected
dataset and its manifest, ``train`` fits a named model pool, ``certify``
produces WR/PP records, ``verify`` turns records into verdicts, ``attack``
traces robustness curves, and ``report`` merges everything into
plot-ready tables.  Exit codes: 0 success, 1 failed run (a JSON error
record goes to stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from pathlib import Path

from .attacks import (finetune_resistance, prune_resistance,
                      resistance_to_csv, wsr_under_noise)
from .dual_space import NoiseSpec
from .errors import DSSmoothError, InputError
from .harness import (DatasetFile, ExperimentConfig, evaluate_suspect,
                      run_verification_suite, save_dataset,
                      smoothed_wsr_curve, vanilla_testset,
                      vanilla_watermark_dataset)
from .statcore import RandomStream
from .text_model import embed, train
from .verify import (CalibrationSet, VerificationContext, VerifyConfig,
                     certified_decision)

_SIGMA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
_FINETUNE_SCHEDULE = (0, 2, 4, 8)
_PRUNE_RATES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        cfg = ExperimentConfig.desk_default()
    overrides = {}
    for flag, field in (("seed", "seed"), ("sigma", "sigma"),
                        ("group_size", "group_size_smooth"),
                        ("samples", "samples"), ("alpha0", "alpha0"),
                        ("kappa", "kappa")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir if getattr(args, "out_dir", None) else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_watermark(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = run_verification_suite(cfg, out_dir=out)
    wm_rows = []
    for seq in art.watermarked_dataset:
        words = [art.vocab.id_to_token[t] for t, m in zip(seq.ids, seq.mask)
                 if m]
        wm_rows.append((seq.label, " ".join(words)))
    save_dataset(DatasetFile(rows=tuple(wm_rows), n_classes=cfg.n_classes),
                 out / "watermarked.tsv")
    print(f"watermarked dataset + manifest written to {out}")
    print(f"max embedding perturbation {art.manifest.max_delta_e:.6f}, "
          f"max reordering perturbation {art.manifest.max_delta_p:.1f}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = run_verification_suite(cfg, out_dir=out)
    pool = {"benign": art.benign, "watermarked": art.watermarked,
            "independent": art.independent}.get(args.pool)
    if pool is None:
        raise InputError(f"unknown pool {args.pool!r}")
    print(f"pool {args.pool}: {len(pool)} models cached under {out}")
    return 0


def _cmd_certify(args) -> int:
    cfg = _load_config(args)
    if args.mode == "gaussian_only":
        cfg = dataclasses.replace(cfg, group_size_smooth=1)
    out = _out_dir(args)
    art = run_verification_suite(cfg, out_dir=out)
    records = []
    for tag, verdicts in (("watermarked", art.verdicts_watermarked),
                          ("independent", art.verdicts_independent)):
        for i, v in enumerate(verdicts):
            records.append({"model": f"{tag}-{i}", "wr": v.wr,
                            "r_e": v.r_e, "r_p": v.r_p,
                            "sigma": v.sigma, "group_size": v.group_size})
    payload = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
               "mode": args.mode, "records": records,
               "threshold": art.context.threshold}
    (out / "wr_records.json").write_text(json.dumps(payload, indent=2) + "\n")
    cal = CalibrationSet(values=art.report.pp_calibration)
    (out / "cal.json").write_text(cal.to_json() + "\n")
    print(f"{len(records)} WR records written to {out / 'wr_records.json'}")
    return 0


def _iter_wr_records(raw):
    if isinstance(raw, dict) and "records" in raw:
        for rec in raw["records"]:
            yield rec
    elif isinstance(raw, list):
        yield from raw
    else:
        yield raw


def _cmd_verify(args) -> int:
    out = _out_dir(args)
    if args.calibration is None or args.wr is None:
        cfg = _load_config(args)
        art = run_verification_suite(cfg, out_dir=out)
        r = art.report
        print(f"threshold={r.threshold:.4f} vsr={r.vsr:.2f} "
              f"wca={r.wca:.2f} fpr={r.fpr:.2f}")
        return 0
    vcfg = VerifyConfig(alpha0=args.alpha0 if args.alpha0 is not None else 0.05,
                        kappa=args.kappa if args.kappa is not None else 0.05)
    cal = CalibrationSet.from_json(Path(args.calibration).read_text())
    raw = json.loads(Path(args.wr).read_text())
    sigma = args.sigma if args.sigma is not None else 1.0
    lam = args.group_size if args.group_size is not None else 1
    ctx = VerificationContext.from_calibration(cal, NoiseSpec(sigma, lam), vcfg)
    verdicts = []
    for rec in _iter_wr_records(raw):
        noise = NoiseSpec(float(rec.get("sigma", sigma)),
                          int(rec.get("group_size", lam)))
        v = certified_decision(float(rec["wr"]), ctx.threshold,
                               float(rec.get("r_e", 0.0)),
                               float(rec.get("r_p", 0.0)), noise, vcfg)
        name = rec.get("model", "suspect")
        print(f"{name}: wr={v.wr:.4f} threshold={v.threshold:.4f} "
              f"decision={'OWNED' if v.decision else 'not-owned'} "
              f"certified={'yes' if v.certified else 'no'}")
        verdicts.append(json.loads(v.to_json()))
    (out / "verdict.json").write_text(json.dumps(verdicts, indent=2) + "\n")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = run_verification_suite(cfg, out_dir=out)
    root = RandomStream(cfg.seed).child("attack", args.kind)
    plan = cfg.plan()
    if args.kind == "noise":
        stream = root.child("corpus")
        vanilla_train = vanilla_watermark_dataset(
            art.train_seqs, art.vocab, cfg.target_label, cfg.rate,
            stream.child("ds"))
        vanilla_model = train(art.benign[0], vanilla_train,
                              cfg.train_config(cfg.seed + 97))
        v_reps = [embed(s, vanilla_model)
                  for s in vanilla_testset(art.test_seqs, art.vocab,
                                           cfg.target_label,
                                           stream.child("vt"))[:80]]
        grid = wsr_under_noise(vanilla_model, v_reps, cfg.target_label,
                               _SIGMA_GRID, root.child("vanilla"))
        (out / "vanilla_noise.csv").write_text(grid.to_csv())
        wm_model = art.watermarked[0]
        from .watermark import make_probes
        probes = make_probes(wm_model, art.test_seqs, plan, art.vocab,
                             cfg.n_classes, root.child("probes"))
        curve = smoothed_wsr_curve(wm_model, list(probes.watermarked.values()),
                                   cfg.target_label, _SIGMA_GRID,
                                   cfg.group_size_smooth, cfg.samples,
                                   root.child("smoothed"))
        (out / "smoothed_noise.csv").write_text(curve.to_csv())
        print(f"noise curves written to {out}")
        return 0
    evaluate = _make_evaluator(art, cfg)
    if args.kind == "finetune":
        tune_cfg = dataclasses.replace(cfg.train_config(cfg.seed + 131),
                                       lr=cfg.finetune_lr)
        curve = finetune_resistance(art.watermarked, art.train_seqs,
                                    _FINETUNE_SCHEDULE, tune_cfg,
                                    evaluate)
        (out / "finetune.csv").write_text(resistance_to_csv(curve, "epochs"))
    elif args.kind == "prune":
        curve = prune_resistance(art.watermarked, _PRUNE_RATES, evaluate)
        (out / "prune.csv").write_text(resistance_to_csv(curve, "rate"))
    else:
        raise InputError(f"unknown attack kind {args.kind!r}")
    print(f"{args.kind} curve written to {out}")
    return 0


def _make_evaluator(art, cfg: ExperimentConfig):
    root = RandomStream(cfg.seed).child("attack-eval")
    radii = (art.manifest.max_delta_e, art.manifest.max_delta_p)
    calls = itertools.count()

    def evaluate(model):
        verdict, _ = evaluate_suspect(model, art.test_seqs, cfg, art.vocab,
                                      art.context, radii,
                                      root.child(next(calls)))
        return verdict

    return evaluate


def _cmd_report(args) -> int:
    out = _out_dir(args)
    merged = {}
    for name in ("config", "metrics", "manifest", "calibration"):
        path = out / f"{name}.json"
        if path.exists():
            merged[name] = json.loads(path.read_text())
    verdict_path = out / "verdicts.jsonl"
    if verdict_path.exists():
        merged["verdicts"] = [json.loads(line) for line in
                              verdict_path.read_text().splitlines() if line]
    curves = {}
    for path in sorted(out.glob("*.csv")):
        curves[path.stem] = path.read_text()
    if curves:
        merged["curves"] = sorted(curves)
    if not merged:
        raise InputError(f"no records found under {out}")
    (out / "report.json").write_text(json.dumps(merged, sort_keys=True,
                                                indent=2) + "\n")
    lines = ["section,key,value"]
    metrics = merged.get("metrics", {})
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, (int, float, str)):
            lines.append(f"metrics,{key},{value}")
    for i, v in enumerate(merged.get("verdicts", [])):
        for key in ("wr", "threshold", "decision", "certified_embedding",
                    "certified_permutation"):
            lines.append(f"verdict-{i},{key},{v[key]}")
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    print(f"merged report written to {out / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dssmooth",
        description="Certified dataset watermarking for text classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="ExperimentConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--lambda", dest="group_size", type=int,
                       help="reordering group size")
        p.add_argument("--samples", type=int)
        p.add_argument("--alpha0", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("watermark", help="build the protected dataset")
    common(p)
    p.set_defaults(fn=_cmd_watermark)

    p = sub.add_parser("train", help="train a named model pool")
    common(p)
    p.add_argument("--pool", default="watermarked",
                   choices=("benign", "watermarked", "independent"))
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("certify", help="compute WR/PP records")
    common(p)
    p.add_argument("--mode", default="dual",
                   choices=("dual", "gaussian_only"))
    p.set_defaults(fn=_cmd_certify)

    p = sub.add_parser("verify", help="turn records into ownership verdicts")
    common(p)
    p.add_argument("--calibration", help="CalibrationSet JSON")
    p.add_argument("--wr", help="WR record JSON")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("attack", help="robustness curves")
    common(p)
    p.add_argument("--kind", default="noise",
                   choices=("noise", "finetune", "prune"))
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("report", help="merge records into tables")
    common(p)
    p.set_defaults(fn=_cmd_report)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DSSmoothError, OSError, KeyError, ValueError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
