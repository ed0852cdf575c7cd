import struct

import numpy as np
import pytest

from ncup.cli import build_parser, fmt, main
from ncup.flowio import read_flo, read_ppm, write_flo, write_ppm
from ncup.train import gen_synthetic
from ncup.upsampler import NCUPModel, save_model


def _pairs(text: str) -> dict[str, str]:
    out = {}
    for line in text.strip().splitlines():
        for token in line.split():
            key, _, value = token.partition("=")
            out[key] = value
    return out


def test_six_significant_digits():
    assert fmt(1 / 3) == "0.333333"
    assert fmt(5.0) == "5"
    assert fmt(123456789.0) == "1.23457e+08"
    assert fmt(7) == "7"


def test_exactly_one_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_eval_identical_and_known(tmp_path, capsys):
    zero = np.zeros((1, 2, 4, 4))
    known = zero.copy()
    known[:, 0], known[:, 1] = 3.0, 4.0
    write_flo(tmp_path / "z.flo", zero)
    write_flo(tmp_path / "k.flo", known)
    assert main(["eval", str(tmp_path / "z.flo"), str(tmp_path / "z.flo")]) == 0
    assert _pairs(capsys.readouterr().out)["epe"] == "0"
    assert main(["eval", str(tmp_path / "k.flo"), str(tmp_path / "z.flo")]) == 0
    assert _pairs(capsys.readouterr().out)["epe"] == "5"


def test_eval_shape_mismatch(tmp_path, capsys):
    write_flo(tmp_path / "a.flo", np.zeros((1, 2, 4, 4)))
    write_flo(tmp_path / "b.flo", np.zeros((1, 2, 4, 5)))
    assert main(["eval", str(tmp_path / "a.flo"), str(tmp_path / "b.flo")]) != 0
    assert "mismatch" in capsys.readouterr().err


def test_eval_bad_file(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"nope" + struct.pack("<ii", 1, 1))
    write_flo(tmp_path / "a.flo", np.zeros((1, 2, 1, 1)))
    assert main(["eval", str(tmp_path / "bad.flo"), str(tmp_path / "a.flo")]) == 1


def test_upsample_zero_flow(tmp_path, capsys):
    write_flo(tmp_path / "z.flo", np.zeros((1, 2, 6, 5)))
    rc = main(["upsample", str(tmp_path / "z.flo"), "--scale", "2", "--out", str(tmp_path / "o.flo")])
    assert rc == 0
    out = read_flo(tmp_path / "o.flo")
    assert out.shape == (1, 2, 12, 10)
    np.testing.assert_array_equal(out, 0.0)
    err = capsys.readouterr().err
    assert "guidance" in err and "zeros" in err


def test_upsample_scale_mismatch(tmp_path, capsys):
    save_model(NCUPModel(4), tmp_path / "m.ckpt")
    write_flo(tmp_path / "f.flo", np.zeros((1, 2, 4, 4)))
    rc = main(["upsample", str(tmp_path / "f.flo"), "--model", str(tmp_path / "m.ckpt"), "--scale", "8",
               "--out", str(tmp_path / "o.flo")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "4" in err and "8" in err
    assert not (tmp_path / "o.flo").exists()


def test_upsample_rejects_unsupported_scale(tmp_path):
    write_flo(tmp_path / "f.flo", np.zeros((1, 2, 4, 4)))
    assert main(["upsample", str(tmp_path / "f.flo"), "--scale", "3", "--out", str(tmp_path / "o.flo")]) == 2


def test_upsample_round_trip_with_outputs(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--seed", "4", "--size", "32"]) == 0
    capsys.readouterr()
    rc = main(["upsample", str(tmp_path / "flow_lr.flo"), "--guidance", str(tmp_path / "guidance.ppm"),
               "--gt", str(tmp_path / "gt.flo"), "--out", str(tmp_path / "up.flo"),
               "--color", str(tmp_path / "up.ppm"), "--weights-map", str(tmp_path / "w.ppm")])
    assert rc == 0
    kv = _pairs(capsys.readouterr().out)
    assert np.isfinite(float(kv["epe"])) and float(kv["epe"]) >= 0
    assert read_ppm(tmp_path / "up.ppm").shape == (32, 32, 3)
    assert read_ppm(tmp_path / "w.ppm").shape == (32, 32, 3)


def test_guidance_at_low_resolution_accepted(tmp_path):
    write_flo(tmp_path / "f.flo", np.ones((1, 2, 4, 4)))
    write_ppm(tmp_path / "g.ppm", np.full((4, 4, 3), 128, dtype=np.uint8))
    assert main(["upsample", str(tmp_path / "f.flo"), "--guidance", str(tmp_path / "g.ppm"),
                 "--out", str(tmp_path / "o.flo")]) == 0
    write_ppm(tmp_path / "bad.ppm", np.zeros((5, 5, 3), dtype=np.uint8))
    assert main(["upsample", str(tmp_path / "f.flo"), "--guidance", str(tmp_path / "bad.ppm"),
                 "--out", str(tmp_path / "o.flo")]) == 1


def test_train_zero_epochs_is_initialization(tmp_path):
    rc = main(["train", "--out", str(tmp_path), "--epochs", "0", "--seed", "3", "--n-train", "2", "--n-val", "1"])
    assert rc == 0
    assert (tmp_path / "train_log.csv").read_text().splitlines() == ["epoch,train_loss,val_epe_ncup,val_epe_bilinear"]
    save_model(NCUPModel(4, seed=3), tmp_path / "init.ckpt")
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "init.ckpt").read_bytes()


def test_train_ablation_flags_reach_checkpoint(tmp_path):
    rc = main(["train", "--out", str(tmp_path), "--epochs", "0", "--final-act", "softplus", "--pooling", "max",
               "--downsamplings", "2", "--no-batch-norm"])
    assert rc == 0
    head = (tmp_path / "model.ckpt").read_bytes().split(b"END\n")[0].decode()
    for item in ("weights.final_activation=softplus", "interp.pooling=max", "interp.downsamplings=2",
                 "weights.batch_norm=False"):
        assert item in head


def test_train_writes_report_figure(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--epochs", "2", "--n-train", "3", "--n-val", "2", "--size", "16"])
    assert rc == 0
    assert (tmp_path / "training_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 3
    assert "val_epe_ncup" in _pairs(capsys.readouterr().out)


def test_selftest_passes_and_is_deterministic(capsys):
    assert main(["selftest"]) == 0
    first = capsys.readouterr().out
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out == first
    assert "failed=0" in first


def _corrupt(path):
    raw = bytearray(path.read_bytes())
    head, _, payload = raw.partition(b"END\n")
    # shrink the first tensor's last dimension: the payload still parses but holds fewer values
    dims = list(struct.unpack("<4I", payload[4:20]))
    dims[3] -= 1
    n_old = int(np.prod([d for d in dims[:3]]) * (dims[3] + 1))
    n_new = int(np.prod(dims))
    body = payload[20 : 20 + 8 * n_old]
    new = payload[:4] + struct.pack("<4I", *dims) + body[: 8 * n_new] + payload[20 + 8 * n_old :]
    path.write_bytes(bytes(head) + b"END\n" + bytes(new))


def test_selftest_detects_corrupted_checkpoint(tmp_path, capsys):
    path = tmp_path / "m.ckpt"
    save_model(NCUPModel(4), path)
    assert main(["selftest", "--model", str(path)]) == 0
    _corrupt(path)
    capsys.readouterr()
    assert main(["selftest", "--model", str(path)]) == 1
    out = capsys.readouterr()
    assert "suite=param_audit status=FAIL" in out.out
    assert "param_audit" in out.err


def test_compare_threads_do_not_change_output(tmp_path, capsys, monkeypatch):
    args = ["compare", "--synthetic", "3", "--size", "32"]
    monkeypatch.setenv("NCUP_THREADS", "1")
    assert main(args) == 0
    serial = capsys.readouterr().out
    monkeypatch.setenv("NCUP_THREADS", "3")
    assert main(args + ["--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out == serial
    assert (tmp_path / "compare.csv").read_text().count("\n") == 4
    assert (tmp_path / "compare.png").exists()


def test_compare_needs_input(capsys):
    assert main(["compare"]) == 2


def test_compare_trained_model_on_synthetic_suite(trained_run, capsys):
    rc = main(["compare", "--synthetic", "20", "--model", str(trained_run.out / "model.ckpt")])
    assert rc == 0
    kv = _pairs(capsys.readouterr().out)
    assert kv["cases"] == "20"
    assert float(kv["mean_epe_ncup"]) < float(kv["mean_epe_bilinear"])


def test_synth_files(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "9", "--size", "32", "--scale", "2"]) == 0
    smp = gen_synthetic(9, 32, 32, 2)
    # .flo stores float32
    np.testing.assert_array_equal(read_flo(tmp_path / "gt.flo"), smp.flow_hr_gt.astype(np.float32))
    assert read_flo(tmp_path / "flow_lr.flo").shape == (1, 2, 16, 16)
