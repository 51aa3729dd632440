import math

import pytest

from sltrans import cli, data
from sltrans.config import ConfigError, RunConfig, SweepSpec, load_config
from sltrans.training import read_log

SYNTH = ["synth.n_symbols=5", "synth.frames_per_symbol=2", "synth.feature_dim=8", "synth.min_len=1",
         "synth.max_len=3", "synth.n_train=60", "synth.n_val=10", "synth.n_test=10"]
MODEL = ["model.encoder_layers=1", "model.decoder_layers=1", "model.embed_dim=16", "model.ffn_dim=32",
         "model.attention_heads=2", "model.feature_dim=8", "model.dropout=0.0",
         "train.batch_size=10", "train.warmup_steps=20", "train.restart_period=200",
         "train.validate_every_epochs=2", "decode.beam=2", "decode.max_len=6", "data.vocab_size=12"]


def sets(items):
    return [a for kv in items for a in ("--set", kv)]


def write_config(path, synth_dir, extra=()):
    lines = [f"data.{s} = {synth_dir / (s + '.tsv')}" for s in ("train", "valid", "test")]
    lines += [kv.replace("=", " = ", 1) for kv in MODEL + list(extra)]
    path.write_text("# test run\n" + "\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out-dir", str(out)] + sets(SYNTH)) == 0
    return out


def test_synth_summary_and_determinism(tmp_path, capsys):
    assert cli.main(["synth", "--out-dir", str(tmp_path / "a"), "--seed", "4"] + sets(SYNTH)) == 0
    summary = capsys.readouterr().out
    assert cli.main(["synth", "--out-dir", str(tmp_path / "b"), "--seed", "4"] + sets(SYNTH)) == 0
    for split, n in (("train", 60), ("valid", 10), ("test", 10)):
        assert (tmp_path / "a" / f"{split}.tsv").exists()
        assert len(data.parse_manifest(tmp_path / "a" / f"{split}.tsv")) == n
        assert f"{split}={n}" in summary
    frames = sum(r.n_frames for s in ("train", "valid", "test")
                 for r in data.parse_manifest(tmp_path / "a" / f"{s}.tsv"))
    assert f"total_frames={frames}" in summary and "symbols=5" in summary
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_prepare_is_idempotent(tmp_path, synth_dir):
    cfg = write_config(tmp_path / "run.cfg", synth_dir)
    run = tmp_path / "run"
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(run)]) == 0
    first = {n: (run / n).read_bytes() for n in (cli.TOKENIZER_FILE, cli.TRUECASER_FILE, cli.RESOLVED_CONFIG)}
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(run)]) == 0
    for n, b in first.items():
        assert (run / n).read_bytes() == b


def test_prepare_exit_codes(tmp_path, synth_dir, capsys):
    cfg = write_config(tmp_path / "run.cfg", synth_dir)
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(tmp_path),
                     "--set", "data.vocab_size=5"]) == 3
    assert "CorpusTooSmall" in capsys.readouterr().err
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(tmp_path),
                     "--set", "model.bogus=1"]) == 2
    assert cli.main(["prepare", "--config", str(tmp_path / "absent.cfg"), "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["prepare", "--out-dir", str(tmp_path), "--set", f"data.train={tmp_path / 'no.tsv'}"]) == 3


def test_train_translate_evaluate_pipeline(tmp_path, synth_dir, capsys):
    cfg = write_config(tmp_path / "run.cfg", synth_dir, ["train.max_steps=60"])
    run = tmp_path / "run"
    base = ["--config", str(cfg), "--out-dir", str(run)]
    assert cli.main(["prepare"] + base) == 0
    assert cli.main(["train"] + base) == 0
    log = read_log(run / "train_log.jsonl")
    assert log and log[-1]["step"] == 60
    resolved = load_config(run / cli.RESOLVED_CONFIG)
    assert resolved.model.vocab_size == 12 and resolved.train.max_steps == 60
    assert cli.main(["translate"] + base) == 0
    out = run / "translations.test.txt"
    first = out.read_bytes()
    assert len(first.decode().splitlines()) == 10
    assert cli.main(["translate"] + base) == 0
    assert out.read_bytes() == first
    capsys.readouterr()
    per = tmp_path / "per.tsv"
    assert cli.main(["evaluate", "--hyps", str(out), "--per-sentence", str(per)] + base) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0] == "split\trBLEU\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU"
    assert table[1].startswith("test\t")
    assert per.read_text().splitlines()[0] == "id\tBLEU\trBLEU"
    assert len(per.read_text().splitlines()) == 11


def test_evaluate_identity_and_table4(tmp_path, capsys):
    refs = ["great vital point technique for women's self defense", "show you how to tape cables down"]
    (tmp_path / "r.txt").write_text("\n".join(refs) + "\n")
    assert cli.main(["evaluate", "--hyps", str(tmp_path / "r.txt"), "--refs", str(tmp_path / "r.txt")]) == 0
    row = capsys.readouterr().out.splitlines()[1].split("\t")
    assert row[1:] == ["100.00"] * 5
    (tmp_path / "h.txt").write_text("It's a very important part of the process.\n")
    (tmp_path / "g.txt").write_text("So, this is a very important part of the process.\n")
    per = tmp_path / "per.tsv"
    assert cli.main(["evaluate", "--hyps", str(tmp_path / "h.txt"), "--refs", str(tmp_path / "g.txt"),
                     "--per-sentence", str(per)]) == 0
    assert per.read_text().splitlines()[1].split("\t")[2] == "0.00"


def test_evaluate_length_mismatch_is_data_error(tmp_path):
    (tmp_path / "h.txt").write_text("a\nb\n")
    (tmp_path / "r.txt").write_text("a\n")
    assert cli.main(["evaluate", "--hyps", str(tmp_path / "h.txt"), "--refs", str(tmp_path / "r.txt")]) == 3


def test_translate_without_checkpoint(tmp_path, synth_dir):
    cfg = write_config(tmp_path / "run.cfg", synth_dir)
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    assert cli.main(["translate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 3


def test_non_finite_loss_exit_code(tmp_path, synth_dir, monkeypatch):
    from sltrans.training import NonFiniteLoss

    def boom(*a, **k):
        raise NonFiniteLoss(3, float("nan"))
    cfg = write_config(tmp_path / "run.cfg", synth_dir, ["train.max_steps=5"])
    assert cli.main(["prepare", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 4


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("model.embed_dim = 32  # comment\ntrain.peak_lr = 5e-4\ntrain.keep_checkpoints = yes\n")
    cfg = load_config(p, [("model.embed_dim", "64")])
    assert cfg.model.embed_dim == 64 and cfg.train.peak_lr == 5e-4 and cfg.train.keep_checkpoints
    for bad in ("nonsense line", "model.embed_dim = 3.5", "train.nothing = 1"):
        p.write_text(bad + "\n")
        with pytest.raises(ConfigError):
            load_config(p)
    keys = RunConfig.keys()
    assert "model.encoder_layers" in keys and "train.restart_period" in keys and "eval.blacklist" in keys
    again = load_config(None, []).update(
        [tuple(l.split(" = ", 1)) for l in RunConfig().dumps().splitlines()])
    assert again.model == RunConfig().model and again.train == RunConfig().train


def test_sweep_spec_parsing():
    spec = SweepSpec.parse("train.peak_lr = 1e-3, 5e-1\nmodel.dropout = 0.1\n")
    assert spec.axes == [("train.peak_lr", ["1e-3", "5e-1"]), ("model.dropout", ["0.1"])]
    with pytest.raises(ConfigError):
        SweepSpec.parse("train.unknown = 1\n")
    with pytest.raises(ConfigError):
        SweepSpec.parse("train.peak_lr = \n")


def test_sweep_picks_stable_learning_rate(tmp_path, synth_dir, capsys):
    cfg = write_config(tmp_path / "run.cfg", synth_dir, ["train.max_steps=150", "train.weight_decay=0.0"])
    sweep = tmp_path / "sweep.txt"
    sweep.write_text("train.peak_lr = 5e-1, 3e-3\ntrain.label_smoothing = 0.1\n")
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out-dir", str(out), "--sweep", str(sweep)]) == 0
    rows = (out / "sweep_results.tsv").read_text().splitlines()
    assert rows[0] == "trial_id\toverrides\tval_rbleu\tval_bleu"
    assert len(rows) == 1 + 3
    broken, stable = (float(r.split("\t")[2]) if r.split("\t")[2] != "nan" else -math.inf for r in rows[1:3])
    assert stable > broken
    best = load_config(out / "sweep_best.cfg")
    assert best.train.peak_lr == 3e-3 and best.train.label_smoothing == 0.1
    assert rows[3].split("\t")[1] == "train.peak_lr=3e-3,train.label_smoothing=0.1"


def test_sweep_single_value_and_failures(tmp_path, synth_dir):
    cfg = write_config(tmp_path / "run.cfg", synth_dir, ["train.max_steps=12"])
    sweep = tmp_path / "sweep.txt"
    sweep.write_text("model.attention_heads = 3, 2\n")
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out-dir", str(out), "--sweep", str(sweep)]) == 0
    rows = (out / "sweep_results.tsv").read_text().splitlines()[1:]
    assert rows[0].endswith("nan\tnan") and not rows[1].endswith("nan\tnan")
    assert load_config(out / "sweep_best.cfg").model.attention_heads == 2
    sweep.write_text("model.attention_heads = 3\n")
    assert cli.main(["sweep", "--config", str(cfg), "--out-dir", str(tmp_path / "s2"),
                     "--sweep", str(sweep)]) == 2
