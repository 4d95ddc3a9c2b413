import numpy as np
import pytest
from PIL import Image

from rdafnet.cli import main
from rdafnet.data import load_pair_dir, write_png
from rdafnet.network import RDAFNet
from rdafnet.trainer import desk_configs, save_checkpoint


@pytest.fixture
def zero_ckpt(tmp_path):
    cfg, _ = desk_configs()
    path = tmp_path / "zero.rdaf"
    save_checkpoint(path, RDAFNet(cfg, init=False))
    return path


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "imgs"
    d.mkdir()
    for i, (h, w) in enumerate([(63, 65), (32, 32), (20, 18)]):
        write_png(d / f"im{i}.png", rng.uniform(-1, 1, (1, 3, h, w)))
    return d


def _u8(path):
    return np.asarray(Image.open(path)).astype(int)


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.yaml"), "--synth", "2,16,1", "--out", str(tmp_path)])
    assert code == 2 and "config" in capsys.readouterr().err


@pytest.mark.parametrize("text,field", [
    ("lr_initial: fast\n", "lr_initial"), ("bogus: 1\n", "bogus"), ("use_am: false\n", "use_am"),
    ("crop: 0\n", "crop"), ("beta2: 1.5\n", "beta2"), ("block_variant: am0_afm1_lrl1\n", "block_variant"),
    ("stages: 2\nblocks_per_stage: [1, 2, 3]\n", "blocks_per_stage"),
])
def test_bad_config_field_exits_2_naming_it(tmp_path, capsys, text, field):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--synth", "2,16,1", "--out", str(tmp_path / "o")]) == 2
    assert f"'{field}'" in capsys.readouterr().err


def test_config_overrides_apply(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("base_filters: 4\nblocks_per_stage: 1\nconv_layers: 2\ncrop: 16\nepochs: 2\nlambda: 0.0\n")
    assert main(["train", "--config", str(cfg), "--synth", "2,16,1", "--out", str(tmp_path / "o")]) == 0
    assert "epochs 2 steps 4" in capsys.readouterr().out


def test_train_smoke_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--synth", "8,64,7", "--epochs", "1", "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.rdaf", "train_log.csv", "loss_curve.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len((tmp_path / "a" / "train_log.csv").read_text().splitlines()) == 2


def test_eval_writes_csv(tmp_path, zero_ckpt, capsys):
    assert main(["eval", "--ckpt", str(zero_ckpt), "--synth", "2,32,3", "--out", str(tmp_path / "ev")]) == 0
    ours = (tmp_path / "ev" / "metrics.csv").read_text()
    assert ours.startswith("image_id,psnr_db,ssim") and ours == (tmp_path / "ev" / "metrics_blurred.csv").read_text()


def test_deblur_identity_and_odd_size(tmp_path, zero_ckpt, images, capsys):
    out = tmp_path / "out"
    assert main(["deblur", "--ckpt", str(zero_ckpt), "--in", str(images), "--out", str(out)]) == 0
    results = sorted(out.iterdir())
    assert len(results) == 3
    for src in sorted(images.iterdir()):
        a, b = _u8(src), _u8(out / src.name)
        assert a.shape == b.shape and np.abs(a - b).max() <= 1
    assert _u8(out / "im0.png").shape == (63, 65, 3)


def test_deblur_is_idempotent(tmp_path, zero_ckpt, images):
    for name in ("x", "y"):
        assert main(["deblur", "--ckpt", str(zero_ckpt), "--in", str(images / "im0.png"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "x" / "im0.png").read_bytes() == (tmp_path / "y" / "im0.png").read_bytes()


def test_unreadable_checkpoint_exits_1(tmp_path, images, capsys):
    bad = tmp_path / "bad.rdaf"
    bad.write_bytes(b"garbage")
    assert main(["deblur", "--ckpt", str(bad), "--in", str(images), "--out", str(tmp_path / "o")]) == 1
    assert "magic" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--no-network"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "check,max_rel_error,status"
    assert len(lines) > 20 and all(line.endswith(",pass") for line in lines[1:])
    assert any(line.startswith("RDAFB") for line in lines)


def test_params_paper_single_stage(capsys):
    assert main(["params", "--preset", "single"]) == 0
    n = int(capsys.readouterr().out.split()[1])
    assert abs(n / 14.2e6 - 1) <= 0.10


def test_flops(capsys):
    assert main(["flops", "--preset", "multi"]) == 0
    f = int(capsys.readouterr().out.split()[1])
    assert abs(f / 502.62e9 - 1) <= 0.15
    assert main(["flops", "--height", "255"]) == 2


def test_synth_writes_pair_dir(tmp_path, capsys):
    assert main(["synth", "--n", "3", "--size", "16", "--seed", "2", "--out", str(tmp_path / "s")]) == 0
    assert len(load_pair_dir(tmp_path / "s")) == 3


def test_attn_dump_one_png_per_map(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--synth", "2,32,1", "--epochs", "0", "--out", str(run)]) == 0
    img = tmp_path / "x.png"
    write_png(img, np.random.default_rng(1).uniform(-1, 1, (1, 3, 31, 30)))
    out = tmp_path / "maps"
    assert main(["attn-dump", "--ckpt", str(run / "checkpoint.rdaf"), "--in", str(img), "--out", str(out),
                 "--maps", "0:0,0:3,1:1"]) == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 3 and len(list((out / "figures").glob("*.png"))) == 3
    # zero-init gates: the input map is constant, the fused map varies only at the padded border
    const = Image.open(out / "stage0_block00_layer0_input.png")
    fused = np.asarray(Image.open(out / "stage0_block00_layer3_afm3.png"))
    assert const.mode == "L" and not np.asarray(const).any()
    assert fused.min() == 0 and fused.max() == 255
    assert main(["attn-dump", "--ckpt", str(run / "checkpoint.rdaf"), "--in", str(img), "--out", str(out),
                 "--maps", "0:4"]) == 2


def test_ablate_variant_parsing(tmp_path, capsys):
    assert main(["ablate", "--variant", "am0_afm1_lrl1", "--out", str(tmp_path)]) == 2
    assert "requires use_am" in capsys.readouterr().err
    assert main(["ablate", "--variant", "amx", "--out", str(tmp_path)]) == 2


def test_ablate_no_residual_reports_status(tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--variant", "am1_afm1_lrl1,am0_afm0_lrl0", "--steps", "4", "--synth", "4,32,7",
                 "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert lines[0].endswith(",status") and len(lines) == 3
    assert lines[1].startswith("am1_afm1_lrl1,") and lines[2].startswith("am0_afm0_lrl0,")
    assert all(line.rsplit(",", 1)[1] in ("converged", "not converged", "diverged") for line in lines[1:])
    assert (out / "ablation.png").exists()


def test_thread_cap_env(monkeypatch, capsys):
    monkeypatch.setenv("RDAF_THREADS", "zero")
    assert main(["params"]) == 2
    monkeypatch.setenv("RDAF_THREADS", "1")
    assert main(["params"]) == 0


def test_requires_a_subcommand(capsys):
    assert main([]) == 2
