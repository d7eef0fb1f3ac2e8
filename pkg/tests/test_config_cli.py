import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lm2.cli import dispatch
from lm2.config import RunConfig, dump_config, load_config, parse_config
from lm2.numerics import ConfigError

SMOKE = """
# small enough to run in a few seconds
d = 16
L = 2
k_memory_blocks = 2
N = 8
n_heads = 2
d_ff = 32
segment_len = 16
n_pairs = 2
filler_len = 4
batch_size = 2
eval_size = 8
warmup_steps = 5
sweep_k = 1, 2
gate_bias_init = 0.0
"""


def write_cfg(tmp_path, extra=""):
    path = tmp_path / "run.txt"
    path.write_text(SMOKE + extra)
    return path


def run_cli(argv, capsys):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = RunConfig()
        assert parse_config(dump_config(cfg)) == cfg

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-6, 1.0), st.integers(1, 50), st.sampled_from(["recall", "yes_no", "negation"]),
           st.sampled_from([None, 1, 3]), st.booleans())
    def test_roundtrip_property(self, lr, steps, task, top_k, tie):
        cfg = RunConfig(lr=lr, steps=steps, task=task, top_k=top_k, tie_embeddings=tie)
        assert parse_config(dump_config(cfg)) == cfg

    def test_comments_and_blank_lines(self):
        cfg = parse_config("\n# note\nsteps = 7  # trailing\n")
        assert cfg.steps == 7

    @pytest.mark.parametrize("text,field", [
        ("colour = red", "colour"),
        ("steps = many", "steps"),
        ("steps = 0", "steps"),
        ("task = poetry", "task"),
        ("sweep_k = 1, 9", "sweep_k"),
        ("n_heads = 3", "n_heads"),
        ("memory_enabled = maybe", "memory_enabled"),
    ])
    def test_errors_name_the_field(self, text, field):
        with pytest.raises(ConfigError, match=f"^{field}"):
            parse_config(text)

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("steps 7")


class TestCli:
    def test_train_writes_one_record_per_step(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "steps = 200\n")
        code, out, _ = run_cli(["train", "--config", cfg, "--out", tmp_path / "runs"], capsys)
        assert code == 0
        run = Path(out["out"])
        lines = (run / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 200
        assert [json.loads(l)["step"] for l in lines] == list(range(1, 201))
        assert (run / "final.ckpt").is_file()
        summary = json.loads((run / "summary.json").read_text())
        assert summary["steps"] == 200 and "wall_clock_s" in summary
        assert load_config(run / "config.txt") == load_config(cfg)

    def test_config_echo_reproduces_metrics(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "steps = 5\n")
        _, first, _ = run_cli(["train", "--config", cfg, "--out", tmp_path / "a"], capsys)
        echo = Path(first["out"]) / "config.txt"
        _, second, _ = run_cli(["train", "--config", echo, "--out", tmp_path / "b"], capsys)
        a = (Path(first["out"]) / "metrics.jsonl").read_bytes()
        b = (Path(second["out"]) / "metrics.jsonl").read_bytes()
        assert a == b

    def test_sweep_eval_generate_inspect(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "steps = 3\n")
        code, out, _ = run_cli(["sweep", "--config", cfg, "--out", tmp_path], capsys)
        assert code == 0 and set(out["heldout_ppl"]) == {"k=1", "k=2", "vanilla", "memory_off"}
        run = Path(out["out"])
        for name in ("metrics_k1.jsonl", "metrics_k2.jsonl", "metrics_vanilla.jsonl",
                     "metrics_memory_off.jsonl", "comparison.tsv", "summary.json"):
            assert (run / name).is_file(), name

        code, out, _ = run_cli(["train", "--config", cfg, "--out", tmp_path], capsys)
        ckpt = Path(out["out"]) / "final.ckpt"
        code, out, _ = run_cli(["eval", "--checkpoint", ckpt, "--out", tmp_path], capsys)
        assert code == 0 and 0.0 <= out["value"] <= 1.0
        code, out, _ = run_cli(["eval", "--checkpoint", ckpt, "--mode", "ppl", "--out", tmp_path],
                               capsys)
        assert code == 0 and out["value"] > 1.0
        code, out, _ = run_cli(["generate", "--checkpoint", ckpt, "--prompt", "k1 v2 ? k1",
                                "--max-new", "3", "--out", tmp_path], capsys)
        assert code == 0 and len(out["output"].split()) == 3
        code, out, _ = run_cli(["inspect", "heatmap", "--checkpoint", ckpt, "--prompt",
                                "k1 v2 f3 ? k1", "--out", tmp_path], capsys)
        assert code == 0 and out["l1"] >= 0
        assert (Path(out["out"]) / "heatmap_before.tsv").is_file()
        code, out, _ = run_cli(["inspect", "slots", "--checkpoint", ckpt, "--probes", "4",
                                "--out", tmp_path], capsys)
        assert code == 0 and len(out["top"]) == 3
        code, out, _ = run_cli(["inspect", "delta", "--checkpoint", ckpt, "--prompt", "k1 v2",
                                "--out", tmp_path], capsys)
        assert code == 0 and out["total"] > 0

    @pytest.mark.parametrize("argv,code,kind", [
        (["train"], 2, "usage"),
        (["fly"], 2, "usage"),
        (["train", "--config", "nope.txt"], 2, "missing_file"),
        (["eval", "--checkpoint", "nope.ckpt"], 2, "missing_checkpoint"),
    ])
    def test_error_exits(self, tmp_path, capsys, argv, code, kind):
        got, out, err = run_cli(argv + ["--out", tmp_path], capsys)
        assert got == code and out is None and err["error"] == kind

    def test_bad_config_and_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("steps = -1\n")
        code, _, err = run_cli(["train", "--config", bad, "--out", tmp_path], capsys)
        assert code == 3 and err["message"].startswith("steps")
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"not a checkpoint at all")
        code, _, err = run_cli(["eval", "--checkpoint", junk, "--out", tmp_path], capsys)
        assert code == 4 and err["error"].startswith("Checkpoint")

    def test_unknown_prompt_token(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "steps = 1\n")
        _, out, _ = run_cli(["train", "--config", cfg, "--out", tmp_path], capsys)
        ckpt = Path(out["out"]) / "final.ckpt"
        code, _, err = run_cli(["generate", "--checkpoint", ckpt, "--prompt", "k1 banana",
                                "--out", tmp_path], capsys)
        assert code == 5 and err["error"] == "unknown_token" and "banana" in err["message"]
