"""Command-line surface for the full pipeline.

Subcommands: synth-data, train-hfdq, train-gadg, encode, decode, generate,
evaluate. Every command is deterministic given its seed, config, and
inputs. Exit codes: 0 success, 2 validation error, 3 missing dependency,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import motion as MO
from .checkpoint import config_hash
from .codec import (
    load_codec,
    read_codes_file,
    save_codec,
    train_codec,
    write_codes_file,
)
from .config import CONFIG_ENV_VAR, load_config
from .errors import (
    ConfigError,
    DancegenError,
    DependencyError,
    InputError,
    RoutingError,
)
from .generator import generate as generate_codes
from .generator import load_generator, save_generator, train_generator
from .metrics import (
    GaussianStats,
    beat_align_score,
    diversity,
    extract_features,
    frechet_distance,
    write_report_file,
)
from .motion import MotionSequence, read_motion_file, write_motion_file
from .music import (
    SyntheticPairConfig,
    beat_extract,
    read_music_file,
    synthesize_pair,
    write_music_file,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
LOSSES_FORMAT = "dancegen-losses"
LOSSES_VERSION = 1


def write_loss_log(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write(f"#format {LOSSES_FORMAT} v{LOSSES_VERSION}\n")
        for step, value in enumerate(losses):
            fh.write(f"{step} {repr(float(value))}\n")


def read_loss_log(path):
    from .errors import FormatError

    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != f"#format {LOSSES_FORMAT} v{LOSSES_VERSION}":
        raise FormatError(f"{path}: missing or wrong loss-log header")
    out = []
    for ln in lines[1:]:
        step, _, value = ln.partition(" ")
        out.append(float(value))
    return np.array(out)


def _read_manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST_NAME
    if not path.exists():
        raise InputError(f"{data_dir} has no {MANIFEST_NAME}; run synth-data first")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise InputError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def _load_pairs(data_dir: Path):
    manifest = _read_manifest(data_dir)
    if not manifest["clips"]:
        raise InputError(f"{data_dir}: manifest lists no clips")
    pairs = []
    for entry in manifest["clips"]:
        music = read_music_file(data_dir / entry["music"])
        clip = read_motion_file(data_dir / entry["motion"])
        pairs.append((music, clip, int(entry["genre_id"])))
    return pairs


# ---------------------------------------------------------------------------
# Commands


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.clips):
        genre_id = i % cfg.data.num_genres
        pair_cfg = SyntheticPairConfig(
            seed=cfg.data.seed + i, clip_frames=cfg.data.clip_frames
        )
        music, clip = synthesize_pair(pair_cfg, genre_id)
        music_name = f"clip_{i:04d}.music.txt"
        motion_name = f"clip_{i:04d}.motion.txt"
        write_music_file(out / music_name, music)
        write_motion_file(out / motion_name, clip)
        entries.append({"music": music_name, "motion": motion_name, "genre_id": genre_id})
    manifest = {
        "format": "dancegen-manifest",
        "version": MANIFEST_VERSION,
        "seed": cfg.data.seed,
        "clip_frames": cfg.data.clip_frames,
        "clips": entries,
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.clips == 0:
        print("warning: zero clips requested; wrote an empty manifest", file=sys.stderr)
    print(f"wrote {args.clips} music/motion pairs to {out}")
    return 0


def cmd_train_hfdq(args) -> int:
    cfg = load_config(args.config)
    pairs = _load_pairs(Path(args.data))
    clips = [clip.frames for _, clip, _ in pairs]
    model, losses = train_codec(
        clips, cfg.fsq_config(), cfg.loss_config(), cfg.codec_train_config()
    )
    save_codec(args.out_ckpt, model, cfg.loss_config())
    loss_log = args.loss_log or f"{args.out_ckpt}.losses.txt"
    write_loss_log(loss_log, losses)
    print(
        f"codec trained for {len(losses)} steps on {len(clips)} clips; "
        f"final loss {losses[-1]:.6f}; checkpoint {args.out_ckpt}"
    )
    return 0


def cmd_train_gadg(args) -> int:
    cfg = load_config(args.config)
    codec = load_codec(args.hfdq_ckpt)
    if codec.cfg.codebook_size != cfg.codebook_size:
        raise ConfigError(
            f"codec checkpoint has a {codec.cfg.codebook_size}-code grid but the "
            f"config levels imply {cfg.codebook_size}"
        )
    pairs = _load_pairs(Path(args.data))
    dataset = [
        (music.frames, genre_id, codec.encode(clip.frames))
        for music, clip, genre_id in pairs
    ]
    model, losses = train_generator(dataset, cfg.gadg_config(), cfg.generator_train_config())
    save_generator(args.out_ckpt, model)
    loss_log = args.loss_log or f"{args.out_ckpt}.losses.txt"
    write_loss_log(loss_log, losses)
    print(
        f"generator trained for {len(losses)} steps on {len(dataset)} sequences; "
        f"final loss {losses[-1]:.6f}; checkpoint {args.out_ckpt}"
    )
    return 0


def cmd_encode(args) -> int:
    codec = load_codec(args.ckpt)
    clip = read_motion_file(args.infile)
    codes = codec.encode(clip.frames)
    write_codes_file(args.out, codes)
    print(f"encoded {clip.frames.shape[0]} frames to {codes.latent_len} code steps")
    return 0


def cmd_decode(args) -> int:
    codec = load_codec(args.ckpt)
    codes = read_codes_file(args.infile)
    frames = codec.decode(codes)
    write_motion_file(args.out, MotionSequence(frames))
    print(f"decoded {codes.latent_len} code steps to {frames.shape[0]} frames")
    return 0


def cmd_generate(args) -> int:
    generator = load_generator(args.gadg_ckpt)
    codec = load_codec(args.hfdq_ckpt)
    if generator.cfg.codebook_size != codec.cfg.codebook_size:
        raise ConfigError(
            f"checkpoint mismatch: generator predicts {generator.cfg.codebook_size} "
            f"codes, codec decodes {codec.cfg.codebook_size}"
        )
    if not 0 <= args.genre < generator.cfg.num_genres:
        raise RoutingError(
            f"unknown genre id {args.genre}; valid ids: "
            f"{', '.join(str(g) for g in range(generator.cfg.num_genres))}"
        )
    music = read_music_file(args.music)
    codes = generate_codes(
        generator, music.frames, args.genre, args.frames,
        top_k=args.top_k, temperature=args.temperature, seed=args.seed,
    )
    frames = codec.decode(codes)
    write_motion_file(args.out, MotionSequence(frames))
    print(f"generated {frames.shape[0]} frames (genre {args.genre}, seed {args.seed})")
    return 0


def _feature_matrix(paths, kind):
    return np.stack([extract_features(read_motion_file(p).frames, kind) for p in paths])


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    gen_dir, ref_dir = Path(args.generated_dir), Path(args.reference_dir)
    gen_paths = sorted(gen_dir.glob("*.motion.txt"))
    ref_paths = sorted(ref_dir.glob("*.motion.txt"))
    for name, paths in (("generated", gen_paths), ("reference", ref_paths)):
        if len(paths) < 2:
            raise InputError(
                f"{name} directory needs at least two .motion.txt files for "
                f"covariance fits, found {len(paths)}"
            )
    report = {"n_sequences": len(gen_paths), "config_hash": config_hash(cfg.to_dict())}
    for kind, fid_key, div_key in (
        ("kinetic", "fid_k", "div_k"), ("geometric", "fid_g", "div_g"),
    ):
        gen_feats = _feature_matrix(gen_paths, kind)
        ref_feats = _feature_matrix(ref_paths, kind)
        report[fid_key] = frechet_distance(
            GaussianStats.from_samples(gen_feats),
            GaussianStats.from_samples(ref_feats),
        )
        report[div_key] = diversity(gen_feats)
    scores = []
    for motion_path in gen_paths:
        music_path = motion_path.with_name(
            motion_path.name.replace(".motion.txt", ".music.txt")
        )
        if not music_path.exists():
            continue
        music = read_music_file(music_path)
        clip = read_motion_file(motion_path)
        kin = beat_extract(MO.forward_kinematics(clip.frames))
        scores.append(
            beat_align_score(music.beat_frames(), kin, sigma=cfg.metrics.bas_sigma)
        )
    if not scores:
        raise InputError(
            "no .music.txt files alongside generated motions; beat alignment needs music"
        )
    report["bas"] = float(np.mean(scores))
    write_report_file(args.out_report, report)
    print(
        f"fid_k {report['fid_k']:.6f}  fid_g {report['fid_g']:.6f}  "
        f"div_k {report['div_k']:.6f}  div_g {report['div_g']:.6f}  "
        f"bas {report['bas']:.6f}  ({report['n_sequences']} sequences)"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dancegen",
        description="Two-stage music-to-dance pipeline: motion codec + genre-routed generator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None,
                       help=f"JSON config path (default: ${CONFIG_ENV_VAR} or built-ins)")

    p = sub.add_parser("synth-data", help="write a synthetic paired music/motion dataset")
    add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.set_defaults(handler=cmd_synth_data)

    p = sub.add_parser("train-hfdq", help="train the motion codec")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--loss-log", default=None)
    p.set_defaults(handler=cmd_train_hfdq)

    p = sub.add_parser("train-gadg", help="train the code generator")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--hfdq-ckpt", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--loss-log", default=None)
    p.set_defaults(handler=cmd_train_gadg)

    p = sub.add_parser("encode", help="motion file to latent code file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser("decode", help="latent code file to motion file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("generate", help="music + genre to a generated motion file")
    p.add_argument("--gadg-ckpt", required=True)
    p.add_argument("--hfdq-ckpt", required=True)
    p.add_argument("--music", required=True)
    p.add_argument("--genre", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("evaluate", help="metric report for generated vs reference motions")
    add_config(p)
    p.add_argument("--generated-dir", required=True)
    p.add_argument("--reference-dir", required=True)
    p.add_argument("--out-report", required=True)
    p.set_defaults(handler=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DancegenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
