import subprocess
import sys

import numpy as np
import pytest

from dman import DMANRecommender, checkpoint
from dman.cli import main
from dman.config import ConfigError, RunConfig
from dman.data import BehaviorLog, generate_synthetic, write_log
from dman.model import DMAN, UserState

from helpers import tiny_batch, tiny_config

SMALL_CONFIG = """\
# tiny run
embed_dim = 8
window_t = 5
memory_slots = 2
layers = 2
neg_samples = 3
lr = 0.01
batch_size = 16
epochs = 2
seed = 0
"""


@pytest.fixture
def small_log(tmp_path):
    log, _ = generate_synthetic(30, 3, 5, 100, 0.9, seed=2)
    path = tmp_path / "log.tsv"
    write_log(log, path)
    return path


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SMALL_CONFIG)
    return path


# -- config --------------------------------------------------------------------

def test_config_defaults_and_round_trip():
    cfg = RunConfig()
    assert (cfg.embed_dim, cfg.window_t, cfg.neg_samples, cfg.routing_iters, cfg.lr,
            cfg.batch_size, cfg.epochs) == (128, 20, 5, 3, 0.001, 128, 8)
    tweaked = RunConfig(variant="fifo", attention_scale=False, data_path="x.tsv")
    assert RunConfig.loads(tweaked.dumps()) == tweaked


def test_config_errors_name_key_and_line():
    with pytest.raises(ConfigError) as err:
        RunConfig.loads("embed_dim = 8\n\nbogus = 1\n")
    assert (err.value.key, err.value.line) == ("bogus", 3)
    with pytest.raises(ConfigError) as err:
        RunConfig.loads("lr = fast\n")
    assert (err.value.key, err.value.line) == ("lr", 1)
    with pytest.raises(ConfigError) as err:
        RunConfig.loads("seed = 1\nseed = 2\n")
    assert err.value.line == 2
    with pytest.raises(ConfigError) as err:
        RunConfig.loads("# c\nvariant = sasrec\n")
    assert (err.value.key, err.value.line) == ("variant", 2)
    with pytest.raises(ConfigError):
        RunConfig.loads("just words\n")


# -- checkpoint ----------------------------------------------------------------

def _trained_model():
    model = DMAN.create(tiny_config(), 12)
    segs, tg = tiny_batch()
    opts = model.make_optimizers()
    rng = np.random.default_rng(0)
    state = UserState()
    for n in range(3):
        _, _, state = model.train_step(state, segs[:, n], tg[:, n], rng, *opts)
    return model, opts, state


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model, opts, state = _trained_model()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, opts, state, meta={"note": "x"})
    got, got_opts, got_state, meta = checkpoint.load(path)
    assert got.config == model.config
    assert meta == {"n_items": 12, "note": "x"}
    for name in model.params.names():
        assert got.params[name].value.tobytes() == model.params[name].value.tobytes()
    for old, new in zip(opts, got_opts):
        assert old.t == new.t
        for a, b in zip(old.m + old.v, new.m + new.v):
            assert a.tobytes() == b.tobytes()
    assert got_state.segments_done == 3
    for a, b in zip(state.cache, got_state.cache):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(state.memory.levels, got_state.memory.levels):
        assert a.tobytes() == b.tobytes()
    # a resumed step matches an uninterrupted one
    segs, tg = tiny_batch(seed=5)
    r1 = model.train_step(state, segs[:, 0], tg[:, 0], np.random.default_rng(1), *opts)
    r2 = got.train_step(got_state, segs[:, 0], tg[:, 0], np.random.default_rng(1), *got_opts)
    assert r1[:2] == r2[:2]


def test_checkpoint_header_is_readable(tmp_path):
    model, _, _ = _trained_model()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model)
    head = path.read_bytes().split(b"\nend\n")[0].decode()
    lines = head.split("\n")
    assert lines[:2] == ["DMAN-CHECKPOINT", "version 1"]
    assert any(line == "array param.item_emb 13x8 0" for line in lines)
    assert lines[-1].startswith("digest sha256:")
    assert checkpoint.load(path)[1] is None


def test_checkpoint_rejects_tampering(tmp_path):
    model, _, _ = _trained_model()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model)
    raw = path.read_bytes()
    flipped = bytearray(raw)
    flipped[-3] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(checkpoint.CheckpointError, match="digest"):
        checkpoint.load(tmp_path / "bad.ckpt")
    (tmp_path / "v2.ckpt").write_bytes(raw.replace(b"version 1", b"version 2", 1))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load(tmp_path / "v2.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "short.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "junk.ckpt")


# -- command line --------------------------------------------------------------

def test_gen_data_is_byte_identical(tmp_path, capsys):
    args = ["gen-data", "--users", "50", "--segments", "6", "--window", "20",
            "--period-strength", "1.0", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.tsv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.tsv")]) == 0
    a = (tmp_path / "a.tsv").read_bytes()
    assert a == (tmp_path / "b.tsv").read_bytes()
    assert a.count(b"\n") == 50 * 120
    assert "wrote 6000 interactions" in capsys.readouterr().out


@pytest.mark.parametrize("bad", [["--period-strength", "1.5"], ["--users", "0"], ["--window", "1"]])
def test_gen_data_validation_exit_code(tmp_path, bad):
    assert main(["gen-data", "--out", str(tmp_path / "x.tsv"), *bad]) == 1
    assert not (tmp_path / "x.tsv").exists()


def test_unparsable_arguments_exit_1(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["gen-data", "--out", str(tmp_path / "x.tsv"), "--users", "ten"])
    assert err.value.code == 1


def test_train_eval_bench(tmp_path, small_log, small_config, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(small_config), "--data", str(small_log), "--out", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "epoch 1" in out
    rows = (tmp_path / "m.ckpt.loss.tsv").read_text().splitlines()
    assert rows[0] == "epoch\tsegment\tmain_loss\taux_loss"
    assert len(rows) == 1 + 2 * 3
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(small_log), "--k", "1,5",
                 "--metrics-out", str(tmp_path / "m.txt")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "users\t30"
    flat = dict(line.split("=") for line in (tmp_path / "m.txt").read_text().splitlines())
    assert set(flat) == {"users", "hr@1", "ndcg@1", "recall@1", "hr@5", "ndcg@5", "recall@5"}
    assert float(flat["hr@1"]) <= float(flat["hr@5"])
    assert main(["bench", "--checkpoint", str(ckpt), "--history-segments", "2,4", "--users", "8",
                 "--repeats", "2", "--out", str(tmp_path / "b.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("dman\tN=2\t") and lines[0].endswith(f"scores/user={2 * 5 * 12}")
    assert lines[3].startswith("full_scan\tN=4\t") and lines[3].endswith(f"scores/user={2 * 20 ** 2}")
    assert "full_scan.N4.scores_per_user=800" in (tmp_path / "b.txt").read_text()


def test_training_runs_are_reproducible(tmp_path, small_log, small_config):
    for name in ("a", "b"):
        assert main(["train", "--config", str(small_config), "--data", str(small_log),
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.loss.tsv").read_bytes() == (tmp_path / "b.loss.tsv").read_bytes()
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_ablate_lists_every_variant(tmp_path, small_log, small_config, capsys):
    small_config.write_text(SMALL_CONFIG.replace("epochs = 2", "epochs = 1"))
    assert main(["ablate", "--config", str(small_config), "--data", str(small_log),
                 "--seeds", "3", "--out", str(tmp_path / "a.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["variant", "seeds", "HR@10", "NDCG@10", "train_s"]
    assert [line.split("\t")[:2] for line in lines[1:]] == [["dman", "3"], ["xl", "3"], ["fifo", "3"],
                                                            ["nran", "3"]]
    assert "nran.hr@10=" in (tmp_path / "a.txt").read_text()


def test_fresh_model_is_at_chance(tmp_path):
    # no planted signal: uniform items, so an untrained model should rank at chance
    rng = np.random.default_rng(0)
    users, length, vocab = 1500, 30, 400
    items = np.concatenate([rng.permutation(vocab)[:length] + 1 for _ in range(users)])
    log = BehaviorLog(np.repeat(np.arange(users), length), items, np.tile(np.arange(length), users))
    write_log(log, tmp_path / "u.tsv")
    cfg = tmp_path / "zero.cfg"
    cfg.write_text("embed_dim = 16\nwindow_t = 10\nmemory_slots = 4\nepochs = 0\n")
    ckpt = tmp_path / "zero.ckpt"
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "u.tsv"), "--out", str(ckpt)]) == 0
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "u.tsv"), "--k", "10",
                 "--metrics-out", str(tmp_path / "m.txt")]) == 0
    hr = float(dict(l.split("=") for l in (tmp_path / "m.txt").read_text().splitlines())["hr@10"])
    chance = 10 / (vocab - (length - 1))
    sd = np.sqrt(chance * (1 - chance) / users)
    assert abs(hr - chance) <= 4 * sd


def test_error_exit_codes(tmp_path, small_log, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("embed_dim = 8\nspeed = 3\n")
    assert main(["train", "--config", str(bad_cfg), "--data", str(small_log),
                 "--out", str(tmp_path / "m")]) == 1
    assert "line 2" in capsys.readouterr().err
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"DMAN-CHECKPOINT\nversion 1\n")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(small_log)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data", str(small_log)]) == 2
    bad_log = tmp_path / "bad.tsv"
    bad_log.write_text("1\t2\n")
    good_cfg = tmp_path / "g.cfg"
    good_cfg.write_text(SMALL_CONFIG)
    assert main(["train", "--config", str(good_cfg), "--data", str(bad_log),
                 "--out", str(tmp_path / "m")]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dman", "gen-data", "--users", "3", "--out",
                           str(tmp_path / "x.tsv"), "--period-strength", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "period-strength" in proc.stderr


def test_estimator_save_load(tmp_path):
    log, _ = generate_synthetic(20, 3, 5, 100, 0.5, seed=4)
    est = DMANRecommender(embed_dim=8, window_t=5, memory_slots=2, epochs=1, batch_size=8).fit(log)
    est.save(tmp_path / "e.ckpt")
    back = DMANRecommender.load(tmp_path / "e.ckpt")
    assert back.get_params() == est.get_params()
    np.testing.assert_array_equal(back.transform(log), est.transform(log))
