import re

import pytest

from semcomp import evaluation as E
from semcomp.cli import run_command

TINY = """\
model.dim = 16
model.heads = 2
model.vision_layers = 1
model.text_layers = 1
model.fusion_layers = 1
model.fusion_hidden = 32
model.image_size = 16
model.proj_dim = 8
train.batch_size = 4
data.train_pairs = 12
data.test_pairs = 6
data.video_pairs = 6
curriculum.frames = 2
curriculum.stage2_steps = 2
"""

STEP = re.compile(r"^step=\d+ cl=\S+ vtm=\S+ mlm=\S+ mgsc=\S+ mltc=\S+ total=\S+ lr=\S+$")
METRICS = re.compile(r"^dir=(t2v|v2t) r1=[0-9.]+ r5=[0-9.]+ r10=[0-9.]+ n=\d+$")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run_command(["gen-data", "--seed", "3", "--out", str(root / "data"), "--config", str(cfg)]) == 0
    return root, cfg


def lines(capsys):
    return capsys.readouterr().out.splitlines()


def test_gen_data_outputs(workspace):
    root, _ = workspace
    data = root / "data"
    for name in ("train.tsv", "test.tsv", "video.tsv", "vocab.txt"):
        assert (data / name).exists()
    train_ids = {ln.split("\t")[0] for ln in (data / "train.tsv").read_text().splitlines() if ln}
    test_ids = {ln.split("\t")[0] for ln in (data / "test.tsv").read_text().splitlines() if ln}
    assert len(train_ids) == 12 and len(test_ids) == 6 and not train_ids & test_ids


def test_pretrain_ten_steps(workspace, capsys):
    root, cfg = workspace
    out = root / "run"
    code = run_command(["pretrain", "--config", str(cfg), "--seed", "0", "--steps", "10",
                        "--manifest", str(root / "data" / "train.tsv"), "--out", str(out)])
    assert code == 0
    out_lines = lines(capsys)
    assert sum(bool(STEP.match(ln)) for ln in out_lines) == 10
    assert "config model.dim = 16" in out_lines
    assert (out / "stage1.ckpt").exists()


def test_eval_and_export(workspace, capsys):
    root, cfg = workspace
    out = root / "run2"
    run_command(["pretrain", "--config", str(cfg), "--seed", "1", "--steps", "2",
                 "--manifest", str(root / "data" / "train.tsv"), "--out", str(out)])
    capsys.readouterr()
    ck, test = str(out / "stage1.ckpt"), str(root / "data" / "test.tsv")
    assert run_command(["eval-retrieval", "--checkpoint", ck, "--manifest", test, "--k", "3"]) == 0
    metrics = lines(capsys)
    assert len(metrics) == 2 and all(METRICS.match(ln) for ln in metrics)
    pair = int(open(test).readline().split("\t")[0])
    heat = root / "heat"
    assert run_command(["export-attn", "--checkpoint", ck, "--manifest", test, "--pair", str(pair),
                        "--token", "1", "--out", str(heat)]) == 0
    img, comments = E.read_pgm(heat / f"{pair}_1_0.pgm")
    assert img.shape == (2, 2) and len(comments) == 2
    assert run_command(["export-attn", "--checkpoint", ck, "--manifest", test, "--pair", "99999",
                        "--out", str(heat)]) == 1


def test_curriculum_via_cli(workspace, capsys):
    root, cfg = workspace
    out = root / "run3"
    code = run_command(["pretrain", "--config", str(cfg), "--seed", "0", "--steps", "2",
                        "--manifest", str(root / "data" / "train.tsv"),
                        "--video-manifest", str(root / "data" / "video.tsv"), "--out", str(out)])
    assert code == 0
    assert (out / "stage1.ckpt").exists() and (out / "stage2.ckpt").exists()
    assert sum(bool(STEP.match(ln)) for ln in lines(capsys)) == 4


def test_gradcheck_exit_zero(capsys):
    assert run_command(["gradcheck", "--seed", "7"]) == 0
    out = lines(capsys)
    assert out and all(ln.startswith("op=") and ln.endswith(" ok") for ln in out)


def test_unknown_subcommand_and_missing_seed(capsys):
    assert run_command(["train-forever"]) == 1
    assert run_command([]) == 1
    assert run_command(["pretrain", "--out", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_names_key(workspace, capsys):
    root, _ = workspace
    args = ["pretrain", "--seed", "0", "--manifest", str(root / "data" / "train.tsv"), "--out", str(root / "x")]
    assert run_command(args + ["--set", "mgsc.image=1.5"]) == 1
    assert "mgsc.image" in capsys.readouterr().err
    assert run_command(args + ["--set", "bogus.key=1"]) == 1
    assert "bogus.key" in capsys.readouterr().err


def test_corrupt_checkpoint_and_missing_files(workspace, capsys):
    root, _ = workspace
    bad = root / "bad.ckpt"
    bad.write_bytes(b"GLSC not really a checkpoint")
    test = str(root / "data" / "test.tsv")
    assert run_command(["eval-retrieval", "--checkpoint", str(bad), "--manifest", test]) == 1
    assert run_command(["eval-retrieval", "--checkpoint", str(root / "absent.ckpt"), "--manifest", test]) == 1
    assert "error" in capsys.readouterr().err
