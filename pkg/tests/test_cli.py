"""End-to-end checks of the command-line surface.

Everything runs in-process through main(argv) against a module-scoped
miniature dataset and deliberately under-trained checkpoints; correctness
of the trained pipeline itself lives in the acceptance suite.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from dancegen.cli import main, read_loss_log
from dancegen.codec import LatentCodeSequence, read_codes_file, write_codes_file
from dancegen.metrics import read_report_file
from dancegen.motion import FRAME_WIDTH, MotionSequence, read_motion_file, write_motion_file
from dancegen.music import read_music_file

TINY = {
    "hfdq": {"steps": 25, "batch_size": 2, "feature_dim": 16},
    "gadg": {
        "model_dim": 32, "num_heads": 4, "ff_dim": 64, "state_dim": 4,
        "steps": 15, "batch_size": 2,
    },
    "data": {"clip_frames": 96, "num_genres": 4},
}


@pytest.fixture(scope="module")
def env(tmp_path_factory):
    """Config file, six synthetic clips, and one checkpoint per stage."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["synth-data", "--config", str(cfg), "--out", str(data), "--clips", "6"]) == 0
    codec = root / "codec.ckpt.json"
    assert main(["train-hfdq", "--config", str(cfg), "--data", str(data),
                 "--out-ckpt", str(codec)]) == 0
    gen = root / "gen.ckpt.json"
    assert main(["train-gadg", "--config", str(cfg), "--data", str(data),
                 "--hfdq-ckpt", str(codec), "--out-ckpt", str(gen)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "codec": codec, "gen": gen}


def test_synth_data_layout(env):
    data = env["data"]
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["format"] == "dancegen-manifest"
    assert len(manifest["clips"]) == 6
    # genres cycle through the configured count
    assert [c["genre_id"] for c in manifest["clips"]] == [0, 1, 2, 3, 0, 1]
    for entry in manifest["clips"]:
        music = read_music_file(data / entry["music"])
        clip = read_motion_file(data / entry["motion"])
        assert music.genre_id == entry["genre_id"]
        assert clip.frames.shape == (96, FRAME_WIDTH)


def test_synth_data_rerun_byte_identical(env, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth-data", "--config", str(env["cfg"]),
                     "--out", str(out), "--clips", "3"]) == 0
    for name in sorted(p.name for p in a.iterdir()):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_data_zero_clips_warns(tmp_path, capsys):
    out = tmp_path / "empty"
    assert main(["synth-data", "--out", str(out), "--clips", "0"]) == 0
    assert json.loads((out / "manifest.json").read_text())["clips"] == []
    assert "warning" in capsys.readouterr().err


def test_train_hfdq_outputs(env):
    losses = read_loss_log(str(env["codec"]) + ".losses.txt")
    assert losses.shape == (TINY["hfdq"]["steps"],)
    assert losses[-1] < losses[0]
    doc = json.loads(env["codec"].read_text())
    assert doc["stage"] == "codec"
    assert doc["config"]["velocity_weight"] == 0.5


def test_train_gadg_outputs(env):
    losses = read_loss_log(str(env["gen"]) + ".losses.txt")
    assert losses.shape == (TINY["gadg"]["steps"],)
    assert losses[-1] < losses[0]


def test_train_requires_data_dir(env, tmp_path):
    assert main(["train-hfdq", "--config", str(env["cfg"]),
                 "--data", str(tmp_path), "--out-ckpt", str(tmp_path / "c.json")]) == 2


def test_train_gadg_missing_codec_is_dependency_error(env, tmp_path, capsys):
    code = main(["train-gadg", "--config", str(env["cfg"]), "--data", str(env["data"]),
                 "--hfdq-ckpt", str(tmp_path / "nope.json"),
                 "--out-ckpt", str(tmp_path / "g.json")])
    assert code == 3
    assert "not found" in capsys.readouterr().err


def test_encode_decode_round_trip(env, tmp_path):
    src = env["data"] / "clip_0000.motion.txt"
    codes_path = tmp_path / "c.codes.txt"
    rec_path = tmp_path / "c.rec.motion.txt"
    assert main(["encode", "--ckpt", str(env["codec"]), "--in", str(src),
                 "--out", str(codes_path)]) == 0
    codes = read_codes_file(codes_path)
    assert codes.latent_len == 96 // 8
    assert main(["decode", "--ckpt", str(env["codec"]), "--in", str(codes_path),
                 "--out", str(rec_path)]) == 0
    rec = read_motion_file(rec_path)
    assert rec.frames.shape == (96, FRAME_WIDTH)


def test_encode_rejects_ragged_length(env, tmp_path):
    clip = read_motion_file(env["data"] / "clip_0000.motion.txt")
    short = tmp_path / "short.motion.txt"
    write_motion_file(short, MotionSequence(clip.frames[:10]))
    assert main(["encode", "--ckpt", str(env["codec"]), "--in", str(short),
                 "--out", str(tmp_path / "x.txt")]) == 2


def test_decode_all_zero_codes_is_valid_motion(env, tmp_path):
    codes = LatentCodeSequence(
        upper=np.zeros(4, dtype=np.int64), lower=np.zeros(4, dtype=np.int64),
        codebook_size=4375,
    )
    path = tmp_path / "zero.codes.txt"
    write_codes_file(path, codes)
    out = tmp_path / "zero.motion.txt"
    assert main(["decode", "--ckpt", str(env["codec"]), "--in", str(path),
                 "--out", str(out)]) == 0
    frames = read_motion_file(out).frames  # constructor validates the pose
    assert frames.shape == (32, FRAME_WIDTH)


def test_generate_deterministic(env, tmp_path):
    music = env["data"] / "clip_0001.music.txt"
    outs = []
    for name in ("g1.motion.txt", "g2.motion.txt"):
        out = tmp_path / name
        assert main(["generate", "--gadg-ckpt", str(env["gen"]),
                     "--hfdq-ckpt", str(env["codec"]), "--music", str(music),
                     "--genre", "1", "--frames", "64", "--seed", "5",
                     "--top-k", "3", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert read_motion_file(tmp_path / "g1.motion.txt").frames.shape == (64, FRAME_WIDTH)


def test_generate_unknown_genre_lists_valid_ids(env, tmp_path, capsys):
    code = main(["generate", "--gadg-ckpt", str(env["gen"]),
                 "--hfdq-ckpt", str(env["codec"]),
                 "--music", str(env["data"] / "clip_0001.music.txt"),
                 "--genre", "11", "--frames", "32",
                 "--out", str(tmp_path / "x.txt")])
    assert code == 2
    err = capsys.readouterr().err
    assert "11" in err and "0, 1, 2, 3" in err


def test_generate_rejects_codebook_mismatch(env, tmp_path, capsys):
    cfg = tmp_path / "small.json"
    tiny = dict(TINY, hfdq=dict(TINY["hfdq"], levels=[3, 3, 3], steps=4))
    cfg.write_text(json.dumps(tiny))
    other = tmp_path / "other_codec.json"
    assert main(["train-hfdq", "--config", str(cfg), "--data", str(env["data"]),
                 "--out-ckpt", str(other)]) == 0
    code = main(["generate", "--gadg-ckpt", str(env["gen"]), "--hfdq-ckpt", str(other),
                 "--music", str(env["data"] / "clip_0001.music.txt"),
                 "--genre", "0", "--frames", "32", "--out", str(tmp_path / "x.txt")])
    assert code == 2
    assert "27" in capsys.readouterr().err


def test_train_gadg_rejects_codebook_mismatch(env, tmp_path):
    cfg = tmp_path / "small.json"
    tiny = dict(TINY, hfdq=dict(TINY["hfdq"], levels=[3, 3, 3], steps=4))
    cfg.write_text(json.dumps(tiny))
    # generator config says 27 codes but the checkpoint was built on 4375
    assert main(["train-gadg", "--config", str(cfg), "--data", str(env["data"]),
                 "--hfdq-ckpt", str(env["codec"]),
                 "--out-ckpt", str(tmp_path / "g.json")]) == 2


def test_evaluate_reference_against_itself(env, tmp_path):
    report_path = tmp_path / "report.txt"
    assert main(["evaluate", "--config", str(env["cfg"]),
                 "--generated-dir", str(env["data"]),
                 "--reference-dir", str(env["data"]),
                 "--out-report", str(report_path)]) == 0
    report = read_report_file(report_path)
    assert abs(report["fid_k"]) < 1e-6
    assert abs(report["fid_g"]) < 1e-6
    assert report["n_sequences"] == 6
    assert report["div_k"] > 0.0
    assert 0.0 < report["bas"] <= 1.0
    assert len(report["config_hash"]) == 16


def test_evaluate_needs_music_siblings(env, tmp_path):
    gen_dir = tmp_path / "gen"
    gen_dir.mkdir()
    for name in ("clip_0000.motion.txt", "clip_0001.motion.txt"):
        (gen_dir / name).write_bytes((env["data"] / name).read_bytes())
    assert main(["evaluate", "--config", str(env["cfg"]),
                 "--generated-dir", str(gen_dir),
                 "--reference-dir", str(env["data"]),
                 "--out-report", str(tmp_path / "r.txt")]) == 2


def test_evaluate_needs_two_sequences(env, tmp_path):
    gen_dir = tmp_path / "one"
    gen_dir.mkdir()
    for ext in ("motion", "music"):
        name = f"clip_0000.{ext}.txt"
        (gen_dir / name).write_bytes((env["data"] / name).read_bytes())
    assert main(["evaluate", "--config", str(env["cfg"]),
                 "--generated-dir", str(gen_dir),
                 "--reference-dir", str(env["data"]),
                 "--out-report", str(tmp_path / "r.txt")]) == 2


def test_unwritable_output_is_io_error(env):
    assert main(["encode", "--ckpt", str(env["codec"]),
                 "--in", str(env["data"] / "clip_0000.motion.txt"),
                 "--out", "/nonexistent-dir/x.txt"]) == 4


def test_config_env_var_used(tmp_path, monkeypatch):
    cfg = tmp_path / "env.json"
    cfg.write_text(json.dumps({"data": {"clip_frames": 48, "num_genres": 2},
                               "gadg": {"num_genres": 2}}))
    monkeypatch.setenv("DANCEGEN_CONFIG", str(cfg))
    out = tmp_path / "d"
    assert main(["synth-data", "--out", str(out), "--clips", "2"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["clip_frames"] == 48
    assert [c["genre_id"] for c in manifest["clips"]] == [0, 1]


def test_bad_config_file_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{oops")
    assert main(["synth-data", "--config", str(cfg),
                 "--out", str(tmp_path / "d"), "--clips", "1"]) == 2
