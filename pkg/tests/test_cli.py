import json

import numpy as np
import pytest

from sar import cli, verify
from sar import tensor as T
from sar.data import load_manifest, read_pnm, write_pnm
from sar.model import SAR
from sar.synth import Sample, SynthSpec, render
from sar.train import GroupSampler, TrainConfig, prepare_samples, train_loop


@pytest.fixture(scope="module")
def trained_micro(tmp_path_factory):
    """A micro checkpoint that has memorised two short words."""
    spec = SynthSpec(charset="abcde", scale_y=2, margin=1, noise=0, seed=3)
    samples = [Sample(render(w, spec, i), w) for i, w in enumerate(["abc", "ed"])]
    config = verify.micro_config()
    config.precision = "float32"
    model = SAR(config, seed=0)
    cfg = TrainConfig(batch_size=2, group_sizes=[2], epochs_per_group=1, groups=300, lr0=3e-3)
    sampler = GroupSampler([2], [2], 2, epochs=1, groups=300)
    path = tmp_path_factory.mktemp("ck") / "micro.sarc"
    train_loop(model, cfg, sampler, [prepare_samples(samples, 16)], checkpoint_path=path)
    return path, samples


def test_synth_writes_dataset_and_config(tmp_path, capsys):
    assert cli.main(["synth", "--n", "10", "--seed", "4", "--out", str(tmp_path / "d")]) == 0
    samples = load_manifest(tmp_path / "d" / "manifest.tsv")
    assert len(samples) == 10
    cfg = json.loads((tmp_path / "d" / "config.json").read_text())
    assert cfg["spec"]["seed"] == 4
    again = tmp_path / "e"
    cli.main(["synth", "--n", "10", "--seed", "4", "--out", str(again)])
    first = sorted(p.read_bytes() for p in (tmp_path / "d").glob("*.p?m"))
    second = sorted(p.read_bytes() for p in again.glob("*.p?m"))
    assert first == second


def test_usage_errors_exit_2(tmp_path):
    assert cli.main(["synth", "--n", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["synth", "--n", "3", "--out", str(tmp_path), "--bogus.key=1"]) == 2
    assert cli.main(["train", "--out", str(tmp_path), "--train.nope=3"]) == 2
    assert cli.main(["recognize", "--beam", "0", "x.pgm"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_config_file_layering(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"max_len": 2, "seed": 9}))
    assert cli.main(["synth", "--n", "4", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o"),
                     "--min_len=2"]) == 0
    spec = json.loads((tmp_path / "o" / "config.json").read_text())["spec"]
    assert (spec["min_len"], spec["max_len"], spec["seed"]) == (2, 2, 9)
    assert all(len(s.label) == 2 for s in load_manifest(tmp_path / "o" / "manifest.tsv"))
    (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
    assert cli.main(["synth", "--n", "1", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2


def test_missing_checkpoint_exit_1(tmp_path):
    img = tmp_path / "a.pgm"
    write_pnm(img, np.full((10, 30), 200, np.uint8))
    assert cli.main(["recognize", "--checkpoint", str(tmp_path / "none.sarc"), str(img)]) == 1


def _manifest(tmp_path, labels):
    lines = [f"img{i}.pgm\t{lab}" for i, lab in enumerate(labels)]
    (tmp_path / "m.tsv").write_text("\n".join(lines) + "\n")
    return tmp_path / "m.tsv"


def test_eval_predictions_and_lexicon(tmp_path, capsys):
    m = _manifest(tmp_path, ["cat", "dog", "bird"])
    (tmp_path / "p.tsv").write_text("img0.pgm\tcat\nimg1.pgm\tdog\nimg2.pgm\tbird\n")
    assert cli.main(["eval", "--manifest", str(m), "--predictions", str(tmp_path / "p.tsv")]) == 0
    assert "sequence accuracy: 100.0%" in capsys.readouterr().out
    (tmp_path / "q.tsv").write_text("img0.pgm\tcat\nimg1.pgm\tdig\nimg2.pgm\tbird\n")
    (tmp_path / "lex.txt").write_text("cat\ndog\nbird\nfish\n")
    assert cli.main(["eval", "--manifest", str(m), "--predictions", str(tmp_path / "q.tsv"),
                     "--lexicon", str(tmp_path / "lex.txt"), "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "sequence accuracy: 66.7%" in out and "lexicon accuracy: 100.0%" in out
    assert json.loads((tmp_path / "r" / "report.json").read_text())["lexicon_accuracy"] == 100.0


def test_recognize_tall_image_decodes_three_times(tmp_path, trained_micro, capsys):
    path, samples = trained_micro
    img = tmp_path / "tall.pgm"
    write_pnm(img, np.ascontiguousarray(np.rot90(samples[0].image)))
    assert cli.main(["recognize", "--checkpoint", str(path), "--rotate", "--beam", "1", "--verbose", str(img)]) == 0
    captured = capsys.readouterr()
    decodes = [ln for ln in captured.err.splitlines() if "decode " in ln]
    assert len(decodes) == 3
    assert {ln.split("orientation ")[1].split(":")[0] for ln in decodes} == {"+0", "+90", "-90"}
    line = captured.out.strip().split("\t")
    assert line[0] == str(img) and len(line) == 3


def test_recognize_and_eval_with_model(tmp_path, trained_micro, capsys):
    path, samples = trained_micro
    names = []
    for i, s in enumerate(samples):
        write_pnm(tmp_path / f"img{i}.pgm", s.image)
        names.append(str(tmp_path / f"img{i}.pgm"))
    assert cli.main(["recognize", "--checkpoint", str(path), *names]) == 0
    preds = [ln.split("\t")[1] for ln in capsys.readouterr().out.splitlines()]
    assert preds == [s.label for s in samples]
    m = _manifest(tmp_path, [s.label for s in samples])
    assert cli.main(["eval", "--checkpoint", str(path), "--manifest", str(m)]) == 0
    assert "sequence accuracy: 100.0%" in capsys.readouterr().out


def test_attn_dump(tmp_path, trained_micro, capsys):
    path, samples = trained_micro
    write_pnm(tmp_path / "x.pgm", samples[0].image)
    out = tmp_path / "maps"
    assert cli.main(["attn-dump", "--checkpoint", str(path), "--beam", "1", "--out", str(out),
                     str(tmp_path / "x.pgm")]) == 0
    info = json.loads((out / "attention.json").read_text())
    n = len(info["text"]) + 1
    assert len(info["steps"]) == n == len(list(out.glob("step_*.pgm")))
    assert info["steps"][-1]["symbol"] == "<END>"
    for k in range(n):
        a = np.array(info["steps"][k]["alpha"])
        assert abs(a.sum() - 1) < 1e-4
        pgm = read_pnm(out / f"step_{k:03d}.pgm")
        assert pgm.max() == 255 and pgm.shape == read_pnm(out / "input.pgm").shape
    assert read_pnm(out / "aggregate.pgm").max() == 255


def test_gradcheck_ops_and_negative_control(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--ops-only"]) == 0
    names = capsys.readouterr().out
    assert all(name in names for name in verify.op_names())

    real = T.tanh

    def broken(x):
        out = real(x)
        inner = out._backward

        def backward(g):
            return inner(g * 1.01)
        out._backward = backward
        return out

    monkeypatch.setattr(T, "tanh", broken)
    assert cli.main(["gradcheck", "--ops-only"]) == 1
    assert "gradcheck FAILED" in capsys.readouterr().out
