"""Command-line interface: dispatch, exit codes, pipelines, reproducibility."""

import re

import numpy as np
import pytest

from beat.cli import build_parser, dispatch
from beat.signal_io import read_segment_file

TINY_MODEL_FLAGS = [
    "--context-len", "20", "--n-leads", "1", "--patch-frame", "5",
    "--embed-dim", "8", "--n-queries", "2", "--enc-layers", "1",
    "--dec-layers", "1", "--heads", "2", "--ffn-mult", "2",
    "--codebook-size1", "4", "--codebook-size2", "4", "--pred-len", "10",
]
TINY_SYNTH_FLAGS = ["--duration", "2.0", "--n-leads", "1", "--fs", "250"]


def run(args):
    return dispatch(args)


def train_tiny(tmp_path, seed="0", extra=()):
    ckpt = tmp_path / f"model_{seed}.beat"
    hist = tmp_path / f"history_{seed}.csv"
    code = run(
        ["train", *TINY_MODEL_FLAGS, *TINY_SYNTH_FLAGS,
         "--synth-pairs", "8", "--synth-eval-pairs", "4",
         "--epochs", "2", "--batch-size", "4", "--lr", "1e-3",
         "--seed", seed, "--out", str(ckpt), "--history", str(hist), *extra]
    )
    assert code == 0
    return ckpt, hist


class TestDispatch:
    def test_no_arguments_usage_error(self, capsys):
        assert run([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 2

    def test_unknown_flag(self):
        assert run(["synth", "--no-such-flag", "1", "--out", "x.csv"]) == 2

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0
        assert run(["train", "--help"]) == 0

    def test_domain_error_exit_one(self, tmp_path, capsys):
        missing = tmp_path / "nope.bseg"
        assert run(["encode", "--ckpt", str(missing), "--in", str(missing)]) == 1
        assert "error:" in capsys.readouterr().err

    def test_every_flag_listed_once(self):
        parser = build_parser()
        sub = next(
            a for a in parser._actions
            if isinstance(a, type(parser._subparsers._group_actions[0]))
        )
        for name, subparser in sub.choices.items():
            seen = []
            for action in subparser._actions:
                seen.extend(action.option_strings)
            assert len(seen) == len(set(seen)), f"duplicate flags in {name}: {seen}"


class TestSynthCommand:
    def test_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "rec.csv"
        assert run(["synth", "--out", str(out), *TINY_SYNTH_FLAGS, "--seed", "3"]) == 0
        rows = out.read_text().strip().splitlines()
        assert len(rows) == 500  # 2 s at 250 Hz

    def test_writes_bseg(self, tmp_path):
        out = tmp_path / "rec.bseg"
        assert run(["synth", "--out", str(out), *TINY_SYNTH_FLAGS, "--seed", "3"]) == 0
        segment = read_segment_file(out)
        assert segment.samples.shape == (500, 1)

    def test_seed_reproducibility(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            assert run(["synth", "--out", str(out), *TINY_SYNTH_FLAGS, "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        assert run(["synth", "--out", str(a), *TINY_SYNTH_FLAGS, "--seed", "1"]) == 0
        assert run(["synth", "--out", str(b), *TINY_SYNTH_FLAGS, "--seed", "2"]) == 0
        assert a.read_bytes() != b.read_bytes()


class TestIngestAndPreprocess:
    def make_wfdb_record(self, tmp_path):
        rng = np.random.default_rng(0)
        adc = rng.integers(-2000, 2000, size=(1200, 2)).astype("<i2")
        (tmp_path / "rec.dat").write_bytes(adc.tobytes())
        (tmp_path / "rec.hea").write_text(
            "rec 2 500 1200\n"
            "rec.dat 16 200(0)/mV 16 0 0 0 0 I\n"
            "rec.dat 16 200(0)/mV 16 0 0 0 0 II\n"
        )
        return tmp_path / "rec.hea"

    def test_ingest_wfdb(self, tmp_path, capsys):
        hea = self.make_wfdb_record(tmp_path)
        assert run(["ingest", "--in", str(hea)]) == 0
        out = capsys.readouterr().out
        assert "1200 samples x 2 leads at 500.0 Hz" in out

    def test_ingest_reexport_csv(self, tmp_path):
        hea = self.make_wfdb_record(tmp_path)
        out = tmp_path / "rec.csv"
        assert run(["ingest", "--in", str(hea), "--out", str(out)]) == 0
        assert len(out.read_text().strip().splitlines()) == 1200

    def test_ingest_csv_needs_fs(self, tmp_path, capsys):
        csv = tmp_path / "r.csv"
        csv.write_text("1,2\n3,4\n")
        assert run(["ingest", "--in", str(csv)]) == 1
        assert "--fs" in capsys.readouterr().err

    def test_preprocess_synth_record(self, tmp_path):
        rec = tmp_path / "rec.csv"
        assert run(["synth", "--out", str(rec), "--duration", "4.0",
                    "--n-leads", "2", "--fs", "500", "--seed", "5"]) == 0
        pair = tmp_path / "pair.bseg"
        assert run(["preprocess", "--in", str(rec), "--fs", "500",
                    "--segment-len", "500", "--pred-len", "250",
                    "--out", str(pair)]) == 0
        segment = read_segment_file(pair)
        assert segment.samples.shape == (750, 2)
        assert segment.fs == 250.0


class TestTrainEvalEncodeDecode:
    def test_train_eval_roundtrip(self, tmp_path, capsys):
        ckpt, hist = train_tiny(tmp_path)
        assert ckpt.exists()
        lines = hist.read_text().strip().splitlines()
        assert lines[0].startswith("epoch,")
        assert len(lines) == 3  # header + 2 epochs
        assert run(["eval", "--ckpt", str(ckpt), *TINY_SYNTH_FLAGS,
                    "--synth-pairs", "4", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert re.search(r"loss_r=\d", out)
        assert re.search(r"score=\d", out)

    def test_train_determinism(self, tmp_path):
        ckpt_a, hist_a = train_tiny(tmp_path, seed="7")
        first = (ckpt_a.read_bytes(), hist_a.read_bytes())
        ckpt_a.unlink()
        hist_a.unlink()
        ckpt_b, hist_b = train_tiny(tmp_path, seed="7")
        assert ckpt_b.read_bytes() == first[0]
        assert hist_b.read_bytes() == first[1]

    def test_encode_decode_cycle(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path)
        seg = tmp_path / "seg.bseg"
        assert run(["synth", "--out", str(seg), *TINY_SYNTH_FLAGS, "--seed", "2"]) == 0

        assert run(["encode", "--ckpt", str(ckpt), "--in", str(seg)]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("<ECG_START>")
        assert line.endswith("<ECG_END>")
        assert len(re.findall(r"<ECG_Index_\d+>", line)) == 4  # levels * queries

        token_file = tmp_path / "tokens.txt"
        token_file.write_text(line + "\n")
        recon = tmp_path / "recon.bseg"
        assert run(["decode", "--ckpt", str(ckpt), "--tokens", str(token_file),
                    "--out", str(recon)]) == 0
        segment = read_segment_file(recon)
        assert segment.samples.shape == (20, 1)

        # re-encoding the reconstruction yields another well-formed line
        assert run(["encode", "--ckpt", str(ckpt), "--in", str(recon)]) == 0
        line2 = capsys.readouterr().out.strip()
        assert len(re.findall(r"<ECG_Index_\d+>", line2)) == 4

    def test_encode_rejects_short_segment(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path)
        short = tmp_path / "short.bseg"
        assert run(["synth", "--out", str(short), "--duration", "0.05",
                    "--n-leads", "1", "--fs", "250", "--seed", "1"]) == 0
        assert run(["encode", "--ckpt", str(ckpt), "--in", str(short)]) == 1
        assert "model needs 20" in capsys.readouterr().err


class TestConfigFile:
    def test_values_applied(self, tmp_path):
        config = tmp_path / "synth.cfg"
        config.write_text("duration=2.0\nn-leads=3\nfs=250\nseed=4\n")
        out = tmp_path / "rec.csv"
        assert run(["synth", "--config", str(config), "--out", str(out)]) == 0
        rows = out.read_text().strip().splitlines()
        assert len(rows) == 500
        assert len(rows[0].split(",")) == 3

    def test_flag_overrides_config(self, tmp_path):
        config = tmp_path / "synth.cfg"
        config.write_text("duration=2.0\nn-leads=3\n")
        out = tmp_path / "rec.csv"
        assert run(["synth", "--config", str(config), "--n-leads", "2",
                    "--fs", "250", "--out", str(out)]) == 0
        assert len(out.read_text().strip().splitlines()[0].split(",")) == 2

    def test_unknown_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("volume=11\n")
        out = tmp_path / "rec.csv"
        assert run(["synth", "--config", str(config), "--out", str(out)]) == 1
        assert "volume" in capsys.readouterr().err

    def test_comments_and_blanks(self, tmp_path):
        config = tmp_path / "synth.cfg"
        config.write_text("# comment\n\nduration=2.0  # inline\n")
        out = tmp_path / "rec.csv"
        assert run(["synth", "--config", str(config), "--fs", "250",
                    "--n-leads", "1", "--out", str(out)]) == 0
        assert len(out.read_text().strip().splitlines()) == 500
