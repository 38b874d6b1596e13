import numpy as np
import pytest

from meun import cli
from meun.autodiff import Parameter, ops
from meun.config import RunConfig
from meun.data import list_images, read_netpbm, save_mask, synth_dataset
from meun.errors import NonFiniteLossError
from meun.model import MEUN
from meun.train import SGD, batch_schedule, train

TINY = dict(input_size=64, base_channels=8, mini_stage_channels=(8, 8, 8, 8, 8), batch_size=2, steps=3,
            lr_head=0.01, lr_backbone=0.001)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_dataset(root, seed=0, n=4, size=64)
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    _, history = train(RunConfig(**TINY), dataset, ckpt)
    return ckpt, history


# -- optimizer / schedule -------------------------------------------------------------


def test_sgd_update_matches_hand_computation():
    p = Parameter(np.array([1.0, -2.0]), lr_group="head")
    q = Parameter(np.array([1.0]), lr_group="backbone")
    opt = SGD([p, q], lr_head=0.1, lr_backbone=0.01, momentum=0.9, weight_decay=0.5)
    for _ in range(2):
        p.grad[:] = [1.0, 1.0]
        q.grad[:] = [2.0]
        opt.step()
    # step 1: v=1, x=(1-0.05)*1-0.1 = 0.85 ; step 2: v=1.9, x=0.95*0.85-0.19
    np.testing.assert_allclose(p.data[0], 0.95 * 0.85 - 0.19)
    x1 = (1 - 0.005) * 1.0 - 0.02
    np.testing.assert_allclose(q.data[0], (1 - 0.005) * x1 - 0.01 * 3.8)


def test_batch_schedule_covers_epochs():
    batches = batch_schedule(8, 4, 4, seed=1)
    assert sorted(np.concatenate(batches[:2]).tolist()) == list(range(8))
    assert [b.tolist() for b in batches] == [b.tolist() for b in batch_schedule(8, 4, 4, seed=1)]


# -- train --------------------------------------------------------------------------------


def test_train_is_deterministic(dataset, trained, tmp_path):
    _, first = trained
    _, second = train(RunConfig(**TINY), dataset, tmp_path / "again.ckpt")
    assert [r["total"] for r in first] == [r["total"] for r in second]
    assert (tmp_path / "again.ckpt").read_bytes() == trained[0].read_bytes()


def test_train_writes_sidecar(trained):
    ckpt, history = trained
    assert len(history) == TINY["steps"]
    assert ckpt.with_name(ckpt.name + ".cfg").exists()


def test_non_finite_loss_aborts_with_checkpoint(dataset, tmp_path):
    cfg = RunConfig(**TINY)
    model = MEUN(cfg.model_config(), seed=0)
    model.decoder.united.out.bias.data[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        train(cfg, dataset, tmp_path / "bad.ckpt", model=model)
    assert (tmp_path / "bad.ckpt").exists()


# -- infer ---------------------------------------------------------------------------------


def test_infer_counts(dataset, trained, tmp_path):
    images = dataset / "images"
    n = len(list_images(images))
    plain = cli.cmd_infer(trained[0], images, tmp_path / "plain")
    assert len(plain) == n
    full = cli.cmd_infer(trained[0], images, tmp_path / "full", emit_intermediates=True, emit_edge=True)
    assert len(full) == 7 * n
    for path in full:
        arr = read_netpbm(path)
        assert arr.dtype == np.uint8 and arr.shape == (64, 64)


def test_infer_last_stage_differs(dataset, trained, tmp_path):
    images = dataset / "images"
    united = cli.cmd_infer(trained[0], images, tmp_path / "u", emit_intermediates=True)
    last = cli.cmd_infer(trained[0], images, tmp_path / "l", use_last_stage=True)
    stem = last[0].stem
    assert read_netpbm(last[0]).tobytes() == read_netpbm(tmp_path / "u" / f"{stem}_s1.pgm").tobytes()
    assert read_netpbm(last[0]).tobytes() != read_netpbm(united[0]).tobytes()


def test_infer_missing_checkpoint(dataset, tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.cmd_infer(tmp_path / "nope.ckpt", dataset / "images", tmp_path / "o")


# -- eval ---------------------------------------------------------------------------------


def test_eval_identical_predictions(dataset, tmp_path):
    report = cli.cmd_eval(dataset / "masks", dataset / "masks", tmp_path / "r.csv")
    agg = report.aggregate
    assert agg["mF"] == pytest.approx(1.0, abs=1e-12)
    assert agg["MAE"] == 0.0
    assert agg["Sm"] == pytest.approx(1.0, abs=1e-12)
    assert agg["Em"] == 1.0
    rows = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == report.count + 1
    assert (tmp_path / "r.txt").exists()


def test_eval_skips_unmatched(dataset, tmp_path):
    preds = tmp_path / "preds"
    preds.mkdir()
    for p in sorted((dataset / "masks").iterdir())[:2]:
        (preds / p.name).write_bytes(p.read_bytes())
    save_mask(preds / "stray.pgm", np.ones((4, 4)))
    report = cli.cmd_eval(preds, dataset / "masks", tmp_path / "r.csv")
    assert report.count == 2
    assert "stray" in report.unmatched


def test_eval_rescales_predictions(dataset, tmp_path):
    preds = tmp_path / "preds"
    preds.mkdir()
    save_mask(preds / "img_0000.pgm", np.ones((32, 32)))
    report = cli.cmd_eval(preds, dataset / "masks", tmp_path / "r.csv")
    assert report.count == 1


# -- main / gradcheck ------------------------------------------------------------------------


def test_main_end_to_end(tmp_path, capsys):
    data = tmp_path / "d"
    assert cli.main(["synth", str(data), "--n", "2", "--size", "64"]) == 0
    ckpt = str(tmp_path / "m.ckpt")
    assert cli.main(["train", str(data), ckpt, "--input-size", "64", "--base-channels", "8",
                     "--steps", "1", "--batch-size", "2", "--quiet"]) == 0
    assert cli.main(["infer", ckpt, str(data / "images"), str(tmp_path / "out"), "--emit-edge"]) == 0
    assert len(list((tmp_path / "out").iterdir())) == 4
    assert cli.main(["eval", str(tmp_path / "out"), str(data / "masks"), str(tmp_path / "r.csv")]) == 0
    assert "images: 2" in capsys.readouterr().out


def test_main_reports_errors(tmp_path, capsys):
    assert cli.main(["infer", str(tmp_path / "missing"), str(tmp_path), str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


def test_gradcheck_primitives_pass():
    ok, lines = cli.cmd_gradcheck("primitives")
    assert ok
    assert all(line.startswith("PASS") for line in lines)


def test_gradcheck_flags_corrupted_conv_backward(monkeypatch, capsys):
    real = ops._conv2d_backward

    def corrupted(*args):
        gx, gw, gb = real(*args)
        return gx, gw * 0.9, gb

    monkeypatch.setattr(ops, "_conv2d_backward", corrupted)
    ok, lines = cli.cmd_gradcheck("primitives")
    assert not ok
    failing = [line for line in lines if line.startswith("FAIL")]
    assert failing and all("conv2d" in line for line in failing)
    assert cli.main(["gradcheck", "--scope", "primitives"]) == 1
