"""Command-line entry point.

Exit codes: 0 success, 1 domain or validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .afpe import build_base_sequences, encode_positions, PositionEncoder
from .analysis import estimate_period, export_heatmap, self_similarity
from .config import RunConfig, format_config, load_config, save_config
from .container import read_container, write_container
from .decompose import trend_seasonal
from .synth import CorpusConfig, SynthConfig, SyntheticSequence, generate_corpus
from .train import embed_all, format_metric_log, load_model, save_checkpoint, train_toy
from .pipeline import rank_eval

import torch


def _cmd_afpe(args) -> int:
    if args.action != "dump":
        raise ValueError(f"unknown afpe action {args.action!r}")
    bases = build_base_sequences(args.seq_len, args.td)
    out = {
        "bases": bases.values.numpy(),
        "k_indices": np.array(bases.k_indices, dtype=np.float64),
    }
    if args.params:
        tensors = read_container(args.params)
        for key in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
            if key not in tensors:
                raise ValueError(f"params container is missing {key!r}")
        channels = tensors["fc2.weight"].shape[0]
        hidden = tensors["fc1.weight"].shape[0]
        encoder = PositionEncoder(args.td, channels, hidden=hidden)
        state = {k: torch.as_tensor(v) for k, v in tensors.items()}
        encoder.load_state_dict(state)
        with torch.no_grad():
            table = encode_positions(bases, encoder)
        out["table"] = table.values.numpy()
    write_container(out, args.out)
    return 0


def _cmd_decompose(args) -> int:
    tensors = read_container(args.infile)
    if not tensors:
        raise ValueError("input container holds no tensors")
    trends, seasonals = {}, {}
    for name, arr in tensors.items():
        dec = trend_seasonal(torch.as_tensor(arr), args.window)
        trends[name] = dec.trend.numpy()
        seasonals[name] = dec.seasonal.numpy()
    write_container(trends, args.out_trend)
    write_container(seasonals, args.out_seasonal)
    return 0


def _corpus_config(args) -> CorpusConfig:
    return CorpusConfig(
        synth=SynthConfig(parts=args.parts, channels=args.channels),
        n_ids=args.ids,
        views=args.views,
        seqs_per_view=args.seqs_per_id,
        length_range=(args.min_len, args.max_len),
        noise_sigma=args.noise,
        seed=args.seed,
        fixed_period=args.period,
    )


def _cmd_synth(args) -> int:
    if args.action != "gen":
        raise ValueError(f"unknown synth action {args.action!r}")
    corpus = generate_corpus(_corpus_config(args), id_offset=args.id_offset)
    os.makedirs(args.out, exist_ok=True)
    lines = []
    for i, seq in enumerate(corpus):
        name = f"seq_{i:05d}.tnsc"
        write_container({"features": seq.features}, os.path.join(args.out, name))
        lines.append(f"{name} {seq.ident} {seq.view} {seq.phase} {seq.period}")
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def load_corpus(directory) -> list[SyntheticSequence]:
    """Read a generated corpus back from its manifest."""
    manifest = os.path.join(directory, "manifest.txt")
    sequences = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            name, ident, view, phase, period = line.split()
            tensors = read_container(os.path.join(directory, name))
            if "features" not in tensors:
                raise ValueError(f"{name} holds no 'features' entry")
            sequences.append(
                SyntheticSequence(
                    features=tensors["features"],
                    ident=int(ident),
                    view=int(view),
                    phase=int(phase),
                    period=int(period),
                    noise_sigma=float("nan"),
                )
            )
    if not sequences:
        raise ValueError(f"no sequences listed in {manifest}")
    return sequences


def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    train_set = load_corpus(args.data)
    heldout = load_corpus(args.eval_data) if args.eval_data else None
    result = train_toy(train_set, cfg, heldout=heldout)

    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.txt"))
    save_checkpoint(result.model, os.path.join(args.out, "checkpoint.tnsc"))
    metrics = format_metric_log(result.log_rows)
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics)

    artifacts = ["config.txt", "checkpoint.tnsc", "metrics.csv"]
    for rel in artifacts:
        if not os.path.exists(os.path.join(args.out, rel)):
            raise ValueError(f"artifact {rel} missing at manifest write time")
    manifest = {
        "config": {line.split("=")[0]: line.split("=", 1)[1] for line in format_config(cfg).splitlines()},
        "seed": cfg.seed,
        "artifacts": artifacts,
        "metrics": [
            {"step": s, "loss_cls": c, "loss_tri": t, "loss_total": tot, "rank1": r}
            for s, c, t, tot, r in result.log_rows
        ],
        "final_rank1": result.final_rank1,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    if result.final_rank1 is not None:
        print(f"final held-out rank-1: {result.final_rank1:.4f}")
    return 0


def _load_run(model_dir):
    cfg = load_config(os.path.join(model_dir, "config.txt"))
    model = load_model(cfg, os.path.join(model_dir, "checkpoint.tnsc"))
    model.eval()
    return cfg, model


def _cmd_eval(args) -> int:
    _, model = _load_run(args.model)
    gallery_seqs = load_corpus(args.gallery)
    probe_seqs = load_corpus(args.probe) if args.probe else gallery_seqs
    g_emb = embed_all(model, gallery_seqs)
    p_emb = g_emb if probe_seqs is gallery_seqs else embed_all(model, probe_seqs)
    gallery = [(g_emb[i], s.ident, s.view) for i, s in enumerate(gallery_seqs)]
    probe = [(p_emb[i], s.ident, s.view) for i, s in enumerate(probe_seqs)]
    result = rank_eval(gallery, probe, ranks=(1, 5))
    for k in sorted(result.rank_k_accuracy):
        print(f"rank-{k}: {result.rank_k_accuracy[k]:.4f}")
    if result.excluded_probes:
        print(f"excluded probes (no cross-view gallery): {result.excluded_probes}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "rank_k_accuracy": {str(k): v for k, v in result.rank_k_accuracy.items()},
                    "excluded_probes": result.excluded_probes,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    return 0


def _load_sequence(path) -> SyntheticSequence:
    tensors = read_container(path)
    if "features" not in tensors:
        raise ValueError(f"{path} holds no 'features' entry")
    return SyntheticSequence(
        features=tensors["features"], ident=-1, view=-1, phase=0, period=0, noise_sigma=float("nan")
    )


def _cmd_analyze(args) -> int:
    if args.action == "period":
        seq = _load_sequence(args.seq)
        feats = np.transpose(seq.features, (2, 0, 1)).reshape(seq.features.shape[2], -1)
        period = estimate_period(feats)
        print("period: none" if period is None else f"period: {period}")
        return 0
    if args.action == "similarity":
        seq = _load_sequence(args.seq)
        if args.stage == "raw":
            feats = np.transpose(seq.features, (2, 0, 1)).reshape(seq.features.shape[2], -1)
        else:
            if not args.model:
                raise ValueError(f"--model is required for stage {args.stage!r}")
            _, model = _load_run(args.model)
            feats = model.frame_features(seq, stage=args.stage)
        matrix = self_similarity(feats)
        csv_path, pgm_path = export_heatmap(matrix, args.out)
        print(f"wrote {csv_path} and {pgm_path}")
        return 0
    raise ValueError(f"unknown analyze action {args.action!r}")


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, verbose=False)
    failures = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name}: worst rel err {r.worst_error:.3e} (tol {r.tolerance:.0e})")
        failures += 0 if r.passed else 1
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpa",
        description="Periodic-sequence metric learning: train, evaluate and analyze on synthetic data.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("afpe", help="dump Fourier bases and the encoded position table")
    p.add_argument("action", choices=["dump"])
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--td", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="container with fc1/fc2 weights to also emit the table")
    p.set_defaults(func=_cmd_afpe)

    p = sub.add_parser("decompose", help="split container tensors into trend and seasonal parts")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--out-trend", required=True)
    p.add_argument("--out-seasonal", required=True)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("synth", help="generate a synthetic corpus with a manifest")
    p.add_argument("action", choices=["gen"])
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--seqs-per-id", type=int, default=1)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--parts", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--min-len", type=int, default=64)
    p.add_argument("--max-len", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--period", type=int, default=None, help="force every identity to this period")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--id-offset", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on a generated corpus")
    p.add_argument("--config", help="flat key=value run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="gallery/probe retrieval accuracy of a trained run")
    p.add_argument("--model", required=True, help="run directory written by train")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probe")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="self-similarity heatmaps and period estimates")
    p.add_argument("action", choices=["similarity", "period"])
    p.add_argument("--seq", required=True)
    p.add_argument("--model", help="run directory; needed for stages pre/post")
    p.add_argument("--stage", choices=["raw", "pre", "post"], default="raw")
    p.add_argument("--out", help="output path prefix for similarity dumps")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
