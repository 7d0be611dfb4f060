import numpy as np
import pytest

from skullstrip import cli, image_core, metrics, params, phantoms, unet, volume_io
from skullstrip import tensor as T
from skullstrip.train import TrainConfig
from skullstrip.volume_io import Volume


def read_ppm(path):
    magic, dims, maxval, raw = path.read_bytes().split(b"\n", 3)
    assert magic == b"P6" and maxval == b"255"
    w, h = map(int, dims.split())
    return np.frombuffer(raw, np.uint8).reshape(h, w, 3)


def write_params(path, obj):
    params.dump(obj, path)
    return str(path)


@pytest.fixture(scope="module")
def phantom_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    img, mask = phantoms.phantom_volume(n_slices=4, size=64, seed=11)
    volume_io.write_nifti(img, d / "brain.nii")
    volume_io.write_nifti(mask, d / "brain_truth.nii")
    return d, img, mask


# overlay rendering -------------------------------------------------------------

def test_overlay_no_contours_is_grayscale(rng):
    img = rng.random((6, 7))
    rgb = cli.render_overlay(img, np.zeros((6, 7)))
    gray = np.floor(image_core.normalize(img).astype(np.float64) * 255 + 0.5)
    for c in range(3):
        assert np.array_equal(rgb[:, :, c], gray)


def test_overlay_rounds_half_up():
    img = np.array([[0.0, 0.5, 1.0]])  # 0.5 * 255 = 127.5 -> 128
    assert cli.render_overlay(img, np.zeros((1, 3)))[0, :, 0].tolist() == [0, 128, 255]


def test_overlay_square_border_red():
    pred = np.zeros((5, 5), np.uint8)
    pred[1:4, 1:4] = 1
    rgb = cli.render_overlay(np.zeros((5, 5)), pred)
    red = np.all(rgb == cli.RED, axis=2)
    assert red.sum() == 8 and not red[2, 2] and red[1:4, 1:4].sum() == 8


def test_overlay_overlap_yellow_and_truth_green():
    m = np.zeros((6, 6), np.uint8)
    m[1:5, 1:5] = 1
    rgb = cli.render_overlay(np.zeros((6, 6)), m, m)
    edge = cli.contour(m)
    assert np.all(rgb[edge] == cli.YELLOW) and not np.any(np.all(rgb == cli.RED, axis=2))
    rgb = cli.render_overlay(np.zeros((6, 6)), np.zeros((6, 6)), m)
    assert np.all(rgb[edge] == cli.GREEN)


def test_overlay_shape_mismatch():
    with pytest.raises(cli.ShapeMismatch):
        cli.render_overlay(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ppm_encoding(tmp_path):
    rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    (tmp_path / "a.ppm").write_bytes(cli.encode_ppm(rgb))
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)


# watershed ---------------------------------------------------------------------

def test_watershed_phantom_volume(phantom_files, tmp_path):
    d, img, truth = phantom_files
    out = tmp_path / "mask.nii"
    p = write_params(tmp_path / "ws.txt", cli.watershed.WatershedParams())
    code = cli.main(["watershed", "--in", str(d / "brain.nii"), "--out", str(out), "--params", p,
                     "--overlay", "--truth", str(d / "brain_truth.nii")])
    assert code == 0
    got = volume_io.read_nifti(out)
    assert got.dims == img.dims
    for z in range(img.n_slices):
        assert metrics.dice(got.data[:, :, z], truth.data[:, :, z]) >= 0.95
    names = sorted(p.name for p in tmp_path.glob("*.ppm"))
    assert names == [f"mask_z{k}.ppm" for k in range(4)]
    assert read_ppm(tmp_path / "mask_z0.ppm").shape == (64, 64, 3)


def test_watershed_missing_params(phantom_files, tmp_path, capsys):
    d, _, _ = phantom_files
    out = tmp_path / "m.nii"
    code = cli.main(["watershed", "--in", str(d / "brain.nii"), "--out", str(out), "--params", str(tmp_path / "none.txt")])
    assert code == 2
    assert "usage:" in capsys.readouterr().err
    assert not out.exists()
    assert cli.main(["watershed", "--in", str(d / "brain.nii"), "--out", str(out)]) == 2


def test_watershed_blank_volume(tmp_path):
    vol = Volume((16, 16, 2), (1, 1, 1), np.zeros((16, 16, 2)))
    volume_io.write_nifti(vol, tmp_path / "blank.nii")
    p = write_params(tmp_path / "ws.txt", cli.watershed.WatershedParams())
    args = ["watershed", "--in", str(tmp_path / "blank.nii"), "--out", str(tmp_path / "m.nii"), "--params", p]
    assert cli.main(args) == 1
    assert not (tmp_path / "m.nii").exists()
    assert cli.main(args + ["--skip-empty"]) == 0
    assert not volume_io.read_nifti(tmp_path / "m.nii").data.any()


def test_watershed_time_index(tmp_path):
    img, _ = phantoms.phantom_volume(n_slices=2, size=32, seed=1)
    four = np.stack([img.data, img.data[::-1]], axis=3)
    volume_io.write_nifti(Volume(four.shape, (1, 1, 1, 2), four), tmp_path / "f.nii")
    p = write_params(tmp_path / "ws.txt", cli.watershed.WatershedParams())
    assert cli.main(["watershed", "--in", str(tmp_path / "f.nii"), "--out", str(tmp_path / "m.nii"),
                     "--params", p, "--time-index", "1"]) == 0
    assert volume_io.read_nifti(tmp_path / "m.nii").dims == (32, 32, 2)
    assert cli.main(["watershed", "--in", str(tmp_path / "f.nii"), "--out", str(tmp_path / "m4.nii"),
                     "--params", p, "--overlay"]) == 0
    assert volume_io.read_nifti(tmp_path / "m4.nii").dims == (32, 32, 2, 2)
    assert (tmp_path / "m4_t1_z1.ppm").exists()
    assert cli.main(["watershed", "--in", str(tmp_path / "f.nii"), "--out", str(tmp_path / "x.nii"),
                     "--params", p, "--time-index", "5"]) == 1


# train -------------------------------------------------------------------------

def make_train_dir(root, n_volumes=2, n_slices=6, size=16):
    root.mkdir(exist_ok=True)
    for k in range(n_volumes):
        img, mask = phantoms.phantom_volume(n_slices=n_slices, size=size, seed=100 + k)
        volume_io.write_nifti(img, root / f"rat{k}.nii")
        volume_io.write_nifti(mask, root / f"rat{k}_mask.nii")
    return root


def write_config(path, **kw):
    base = dict(epochs=3, batch_size=4, val_fraction=0.2, depth=2, base_channels=2, elastic_alpha=1.0, elastic_sigma=3.0)
    base.update(kw)
    params.dump(TrainConfig(**base), path)
    return str(path)


def test_train_writes_checkpoint_and_log(tmp_path):
    data = make_train_dir(tmp_path / "data")
    cfg = write_config(tmp_path / "cfg.txt", learning_rate=0.01)
    out = tmp_path / "model.skst"
    assert cli.main(["train", "--in", str(data), "--config", cfg, "--out", str(out)]) == 0
    model = unet.load_checkpoint(out)
    assert model.input_size == (16, 16)
    rows = (tmp_path / "model_log.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["epoch", "train_bce", "val_bce"]
    best = [float(r.split(",")[7]) for r in rows[1:]]
    assert len(best) == 3 and all(b <= a for a, b in zip(best, best[1:]))


def test_train_deterministic(tmp_path):
    data = make_train_dir(tmp_path / "data")
    cfg = write_config(tmp_path / "cfg.txt")
    outs = []
    for run in range(2):
        out = tmp_path / f"m{run}.skst"
        log = tmp_path / f"log{run}.csv"
        assert cli.main(["train", "--in", str(data), "--config", cfg, "--out", str(out), "--log", str(log), "--seed", "5"]) == 0
        outs.append((out.read_bytes(), log.read_bytes()))
    assert outs[0] == outs[1]


def test_train_unpaired(tmp_path, capsys):
    data = make_train_dir(tmp_path / "data")
    (data / "rat1_mask.nii").unlink()
    code = cli.main(["train", "--in", str(data), "--config", write_config(tmp_path / "c.txt"), "--out", str(tmp_path / "m.skst")])
    assert code == 4
    assert "rat1" in capsys.readouterr().err
    assert not (tmp_path / "m.skst").exists()


def test_train_too_small(tmp_path):
    data = make_train_dir(tmp_path / "data", n_volumes=1, n_slices=1)
    code = cli.main(["train", "--in", str(data), "--config", write_config(tmp_path / "c.txt"), "--out", str(tmp_path / "m.skst")])
    assert code == 3


def test_train_bad_config(tmp_path):
    data = make_train_dir(tmp_path / "data")
    (tmp_path / "c.txt").write_text("epochs=3\nbogus=1\n")
    assert cli.main(["train", "--in", str(data), "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "m")]) == 2


# predict -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_case(tmp_path_factory):
    d = tmp_path_factory.mktemp("of")
    img, mask = phantoms.make_phantom(32, np.random.default_rng(3))
    x = image_core.normalize(img)
    model = unet.build_unet(2, 4, (32, 32), seed=0)
    state = T.AdamState.for_params(model.parameters())
    for _ in range(800):
        model.zero_grad()
        T.backward(T.bce_loss(model(T.Tensor(x[None, None])), mask[None, None].astype(np.float32)))
        T.adam_step(model.parameters(), state, lr=0.01)
    unet.save_checkpoint(model, d / "of.skst")
    vol = Volume((32, 32, 1), (1, 1, 1), img.T[:, :, None])
    volume_io.write_nifti(vol, d / "img.nii")
    return d, img, mask


def test_predict_overfit_strip(overfit_case, tmp_path):
    d, img, mask = overfit_case
    out, stripped = tmp_path / "m.nii", tmp_path / "s.nii"
    assert cli.main(["predict", "--checkpoint", str(d / "of.skst"), "--in", str(d / "img.nii"),
                     "--out", str(out), "--stripped", str(stripped)]) == 0
    s = volume_io.read_nifti(stripped).data[:, :, 0].T
    assert np.abs(s - img * mask).max() <= 1e-3
    assert np.array_equal(volume_io.read_nifti(out).data[:, :, 0].T, mask.astype(np.float32))


def test_predict_threshold_zero(overfit_case, tmp_path):
    d, _, _ = overfit_case
    out = tmp_path / "m.nii"
    assert cli.main(["predict", "--checkpoint", str(d / "of.skst"), "--in", str(d / "img.nii"),
                     "--out", str(out), "--threshold", "0"]) == 0
    assert np.all(volume_io.read_nifti(out).data == 1)


def test_predict_resizes(overfit_case, tmp_path):
    d, img, _ = overfit_case
    big = Volume((48, 40, 2), (1, 1, 1), np.random.default_rng(0).random((48, 40, 2)))
    volume_io.write_nifti(big, tmp_path / "big.nii")
    out = tmp_path / "m.nii"
    assert cli.main(["predict", "--checkpoint", str(d / "of.skst"), "--in", str(tmp_path / "big.nii"),
                     "--out", str(out), "--overlay"]) == 0
    assert volume_io.read_nifti(out).dims == (48, 40, 2)
    assert read_ppm(tmp_path / "m_z1.ppm").shape == (40, 48, 3)


def test_predict_corrupt_checkpoint(overfit_case, tmp_path):
    d, _, _ = overfit_case
    (tmp_path / "bad.skst").write_bytes(b"NOPE" + bytes(40))
    out = tmp_path / "m.nii"
    assert cli.main(["predict", "--checkpoint", str(tmp_path / "bad.skst"), "--in", str(d / "img.nii"), "--out", str(out)]) == 5
    assert not out.exists()


def test_predict_partial_outputs_removed(overfit_case, tmp_path):
    d, _, _ = overfit_case
    out = tmp_path / "m.nii"
    code = cli.main(["predict", "--checkpoint", str(d / "of.skst"), "--in", str(d / "img.nii"),
                     "--out", str(out), "--stripped", str(tmp_path / "missing_dir" / "s.nii")])
    assert code == 1
    assert not out.exists()


def test_predict_does_not_touch_input(overfit_case, tmp_path):
    d, _, _ = overfit_case
    before = (d / "img.nii").read_bytes()
    cli.main(["predict", "--checkpoint", str(d / "of.skst"), "--in", str(d / "img.nii"), "--out", str(tmp_path / "m.nii")])
    assert (d / "img.nii").read_bytes() == before


# evaluate ----------------------------------------------------------------------

def fixture_volume():
    pred = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], np.float32).reshape(5, 2)
    truth = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0], np.float32).reshape(5, 2)
    stack = lambda a: np.repeat(a[:, :, None], 3, axis=2)
    return Volume((5, 2, 3), (1, 1, 1), stack(pred)), Volume((5, 2, 3), (1, 1, 1), stack(truth))


def test_evaluate_identical(phantom_files, tmp_path, capsys):
    d, _, _ = phantom_files
    t = str(d / "brain_truth.nii")
    assert cli.main(["evaluate", "--in", t, "--truth", t]) == 0
    assert "accuracy=1.0" in capsys.readouterr().out.splitlines()


def test_evaluate_fixture(tmp_path, capsys):
    pred, truth = fixture_volume()
    volume_io.write_nifti(pred, tmp_path / "p.nii")
    volume_io.write_nifti(truth, tmp_path / "t.nii")
    code = cli.main(["evaluate", "--in", str(tmp_path / "p.nii"), "--truth", str(tmp_path / "t.nii"),
                     "--out", str(tmp_path / "report.txt")])
    assert code == 0
    assert "f1=0.75" in capsys.readouterr().out.splitlines()
    kv = params.parse_kv((tmp_path / "report.txt").read_text())
    assert kv["tp"] == "9" and kv["n_images"] == "3"
    csv = (tmp_path / "report.csv").read_text().splitlines()
    assert csv[0] == ",".join(metrics.CSV_FIELDS)
    assert csv[1].split(",")[-1] == "0.75"


def test_evaluate_geometry_mismatch(phantom_files, tmp_path):
    d, _, _ = phantom_files
    pred, _ = fixture_volume()
    volume_io.write_nifti(pred, tmp_path / "p.nii")
    assert cli.main(["evaluate", "--in", str(tmp_path / "p.nii"), "--truth", str(d / "brain_truth.nii")]) == 6


# overlay command and usage --------------------------------------------------------

def test_overlay_command(phantom_files, tmp_path):
    d, _, truth = phantom_files
    code = cli.main(["overlay", "--in", str(d / "brain.nii"), "--mask", str(d / "brain_truth.nii"),
                     "--truth", str(d / "brain_truth.nii"), "--out", str(tmp_path / "fig")])
    assert code == 0
    rgb = read_ppm(tmp_path / "fig_z2.ppm")
    edge = cli.contour(truth.data[:, :, 2].T)
    assert np.all(rgb[edge] == cli.YELLOW)


def test_usage_errors(capsys):
    assert cli.main([]) == 2
    assert cli.main(["bogus"]) == 2
    assert cli.main(["predict", "--in", "x"]) == 2
