import json
import subprocess
import sys

import pytest

from edgevlm import cli, datasets, vision
from edgevlm.config import ModelConfig


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["init", "--out", str(d / "m.ovlm"), "--seed", "0"]) == 0
    img = vision.synthetic_caption_dataset(1, 216, 0)[0][0]
    vision.write_ppm(d / "img.ppm", img)
    return d


def test_init_is_deterministic_with_default_dims(tmp_path, capsys, ckpt):
    rc, out, _ = run(capsys, "init", "--out", tmp_path / "a.ovlm", "--seed", 0)
    assert rc == 0
    assert (tmp_path / "a.ovlm").read_bytes() == (ckpt / "m.ovlm").read_bytes()
    cfg = ModelConfig.from_dict(json.loads(out)["config"])
    assert (cfg.image_tokens, cfg.lm.d_lm, cfg.vision.d_vision, cfg.lm.vocab_size) == (81, 128, 64, 261)


def test_config_errors_exit_2(tmp_path, capsys):
    rc, _, err = run(capsys, "init", "--out", tmp_path / "x.ovlm", "--ratio", 5)
    assert rc == 2 and "config error" in err
    assert not (tmp_path / "x.ovlm").exists()
    with pytest.raises(SystemExit) as exc:
        cli.main(["cost", "--width", "1", "--height", "1", "--bogus"])
    assert exc.value.code == 2


def test_generate_outputs(capsys, ckpt):
    args = ["generate", "--checkpoint", ckpt / "m.ovlm", "--image", ckpt / "img.ppm", "--greedy", "--max-new", 4]
    rc, out1, err1 = run(capsys, *args)
    rc2, out2, _ = run(capsys, *args, "--verbose")
    assert rc == rc2 == 0 and out1 == out2
    timing = json.loads(err1.strip().splitlines()[-1])
    assert set(timing) == {"ttft_ms", "decode_tps"} and timing["ttft_ms"] > 0
    rc, _, err = run(capsys, *args, "--verbose")
    info = json.loads(err.strip().splitlines()[-1])
    assert info["image_tokens"] == 81 and info["prompt_tokens"] == 0 and 1 <= info["generated_tokens"] <= 4


def test_bad_image_exits_3(tmp_path, capsys, ckpt):
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    rc, _, err = run(capsys, "generate", "--checkpoint", ckpt / "m.ovlm", "--image", tmp_path / "bad.ppm")
    assert rc == 3 and "input error" in err
    rc, _, _ = run(capsys, "inspect", tmp_path / "bad.ppm")
    assert rc == 3


def test_inspect_lists_tensors(capsys, ckpt):
    rc, out, _ = run(capsys, "inspect", ckpt / "m.ovlm")
    head = json.loads(out)
    names = [t["name"] for t in head["tensors"]]
    assert rc == 0 and "projector.fc1.weight" in names and "lm.head" in names
    assert "projector.conv.weight" not in names


def test_dpo_pairs_threshold(tmp_path, capsys):
    recs = [
        # 50 tokens, 1 substitution: distance 0.02
        {"image": "a.ppm", "prompt": "p", "original": "a" * 49 + "b", "edited": "a" * 50},
        {"image": "a.ppm", "prompt": "p", "original": "aabb", "edited": "aacc"},  # 0.5
        {"image": "a.ppm", "prompt": "p", "original": "ab", "edited": "cd"},  # 1.0
    ]
    datasets.write_jsonl(tmp_path / "in.jsonl", recs)
    rc, out, _ = run(capsys, "dpo-pairs", "--input", tmp_path / "in.jsonl", "--out", tmp_path / "p.jsonl",
                     "--tau", 0.3)
    assert rc == 0 and json.loads(out) == {"admitted": 1, "rejected": 2, "skipped_lines": 0}
    (pair,) = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert pair["chosen"] == "a" * 50 and pair["normalized_distance"] == pytest.approx(0.02)


def test_cost(capsys):
    rc, out, _ = run(capsys, "cost", "--width", 1024, "--height", 1024)
    rep = json.loads(out)
    assert rc == 0 and rep["tokens"] == 765 and rep["energy_joules"] == pytest.approx(535.5)


def test_synth_then_pretrain(tmp_path, capsys):
    cfg = ModelConfig.from_dict({"vision": {"image_size": 24, "patch_size": 4, "d_vision": 4, "n_layers": 1,
                                            "n_heads": 1},
                                 "lm": {"d_lm": 8, "n_layers": 1, "n_heads": 1, "d_ff": 8, "max_seq": 96},
                                 "strategy": {"kind": "reshape", "ratio": 3}, "d_proj": 4})
    (tmp_path / "cfg.json").write_text(cfg.to_json())
    rc, out, _ = run(capsys, "synth", "--config", tmp_path / "cfg.json", "--n", 4, "--out", tmp_path / "data")
    assert rc == 0
    records = json.loads(out)["records"]
    run(capsys, "init", "--config", tmp_path / "cfg.json", "--out", tmp_path / "m.ovlm")
    rc, out, _ = run(capsys, "train", "--stage", "pretrain", "--checkpoint", tmp_path / "m.ovlm",
                     "--data", records, "--out", tmp_path / "t.ovlm", "--steps", 3, "--batch-size", 2)
    assert rc == 0 and out.splitlines()[0].startswith("step,")
    assert (tmp_path / "t.ovlm").exists()


def test_help_documents_every_flag():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.choices and "init" in a.choices)
    for name, sp in sub.choices.items():
        for action in sp._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "edgevlm.cli", "cost", "--width", "512", "--height", "512"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["tokens"] == 255
