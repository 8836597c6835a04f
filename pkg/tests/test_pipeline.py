import json
import math

import numpy as np
import pytest

from refineseg.cli import main
from refineseg.nn import TrainConfig
from refineseg.pipeline.bench import bench_conv, bench_model, time_steps
from refineseg.pipeline.evaluate import (EvalReport, confusion_matrix, evaluate, mean_iou,
                                         per_class_iou, refine_from_logits, refine_image)
from refineseg.pipeline.experiment import ExperimentConfig, choose_alpha
from refineseg.pipeline.model import SegModel, compute_normalization
from refineseg.pipeline.synth import Dataset, SynthSpec, load_split, render, synth_generate
from refineseg.pipeline.train import (TrainingError, cache_baseline_logits, gather_rows,
                                      lowres_labels, select_from_logits, train_baseline,
                                      train_refiner)
from refineseg.refiner import RefinerConfig
from refineseg.tensor import IGNORE, area_downsample, argmax_channels, nearest_upsample

TINY = SynthSpec(height=32, width=64, num_train=8, num_val=4, blob_radius=(4, 10),
                 square_size=(2, 3), seed=5)
ARCH = RefinerConfig(channels=(4, 8), num_classes=6, enc_blocks=1, dec_blocks=1)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    synth_generate(TINY, d)
    return d


@pytest.fixture(scope="module")
def tiny_model(tiny_data):
    train = load_split(tiny_data, "train")
    model, _ = train_baseline(train, ARCH, TrainConfig(lr=5e-3, epochs=4, batch_size=4))
    before = cache_baseline_logits(model, train.images)
    model, tlog = train_refiner(train, model, 0.3, ARCH, TrainConfig(lr=5e-3, epochs=2, batch_size=4, seed=1),
                                hidden=8)
    return model, before, tlog


# --- synthetic data ----------------------------------------------------------

def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(height=16, width=32, num_train=2, num_val=1, blob_radius=(3, 6), seed=9)
    a, b = synth_generate(spec, tmp_path / "a"), synth_generate(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_zero_shapes_give_background():
    spec = SynthSpec(height=16, width=16, blobs=(0, 0), lines=(0, 0), squares=(0, 0))
    _, label = render(spec, np.random.default_rng(0))
    assert not label.any()


def test_every_label_map_has_a_thin_structure():
    spec = SynthSpec(height=32, width=64, lines=(0, 3), blob_radius=(4, 8))
    for seed in range(20):
        _, label = render(spec, np.random.default_rng(seed))
        assert np.isin(label, [3, 4]).any()


def test_one_pixel_line_lost_at_half_resolution():
    # a vertical 1-px line on an odd column, one-hot class scores
    label = np.zeros((16, 16), np.int64)
    label[:, 5] = 3
    scores = np.eye(6)[label].transpose(2, 0, 1)
    recon = argmax_channels(nearest_upsample(area_downsample(scores, 2), 2))
    assert (label == 3).sum() == 16
    assert (recon == 3).sum() == 0


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(height=15)
    with pytest.raises(ValueError):
        SynthSpec(line_width=(0, 1))
    with pytest.raises(ValueError):
        SynthSpec(num_classes=4)
    assert SynthSpec.from_dict(TINY.to_dict()) == TINY


# --- metrics -----------------------------------------------------------------

def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 2]])
    assert mean_iou(per_class_iou(confusion_matrix(gt, gt, 3))) == 1.0


def test_half_half_example():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.zeros_like(gt)
    conf = confusion_matrix(pred, gt, 2)
    # brute force: conf[g, p] counts
    brute = np.zeros((2, 2), int)
    for g, p in zip(gt.ravel(), pred.ravel()):
        brute[g, p] += 1
    np.testing.assert_array_equal(conf, brute)
    assert per_class_iou(conf) == {0: 0.5, 1: 0.0}
    assert mean_iou(per_class_iou(conf)) == 0.25


def test_all_ignore():
    gt = np.full((2, 2), IGNORE)
    ious = per_class_iou(confusion_matrix(np.zeros((2, 2)), gt, 3))
    assert ious == {}
    with pytest.raises(ValueError):
        mean_iou(ious)


def test_label_range_checked():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([3]), np.array([0]), 3)


# --- model plumbing ----------------------------------------------------------

def test_normalization_statistics():
    ims = [np.full((2, 2, 3), 0, np.uint8), np.full((2, 2, 3), 255, np.uint8)]
    mean, std = compute_normalization(ims)
    assert mean == pytest.approx((0.5,) * 3) and std == pytest.approx((0.5,) * 3)


def test_lowres_labels_and_gather():
    label = np.arange(16).reshape(4, 4)
    assert lowres_labels(label).tolist() == [[0, 2], [8, 10]]
    low = np.arange(8.0).reshape(2, 2, 2)
    mask = np.zeros((4, 4), bool)
    mask[3, 1] = mask[0, 3] = True
    # row-major: (0,3) -> low (0,1); (3,1) -> low (1,0)
    assert gather_rows(low, mask).tolist() == [[1.0, 5.0], [2.0, 6.0]]


def test_selection_equals_entropy_of_upsampled_logits():
    from refineseg.selector import entropy_map
    low = np.random.default_rng(0).standard_normal((4, 5, 6))
    np.testing.assert_array_equal(select_from_logits(low, 0.9),
                                  entropy_map(nearest_upsample(low, 2)) > 0.9)


def test_indivisible_image_rejected(tiny_model):
    model, _, _ = tiny_model
    with pytest.raises(ValueError, match="divisible"):
        refine_image(model, np.zeros((31, 64, 3), np.uint8))


# --- training ----------------------------------------------------------------

def test_baseline_memorizes_ten_images():
    rng = np.random.default_rng(0)
    spec = SynthSpec(height=32, width=32, blob_radius=(3, 8), noise=5.0)
    data = Dataset(*zip(*[render(spec, rng) for _ in range(10)]))
    data = Dataset(list(data.images), list(data.labels))
    arch = RefinerConfig(channels=(8, 16), num_classes=6, enc_blocks=1, dec_blocks=1)
    _, tlog = train_baseline(data, arch, TrainConfig(lr=1e-2, epochs=150, batch_size=10))
    losses = tlog.losses
    assert len(losses) == 150
    assert losses[99] < losses[9]
    assert min(losses) < 0.1


def test_refiner_training_leaves_baseline_frozen(tiny_data, tiny_model):
    model, before, tlog = tiny_model
    after = cache_baseline_logits(model, load_split(tiny_data, "train").images)
    for a, b in zip(before, after):
        assert a.tobytes() == b.tobytes()
    assert tlog.steps and all(s["pixels"] > 0 for s in tlog.steps)


def test_threshold_above_log_c_selects_nothing(tiny_data, tiny_model):
    model, _, _ = tiny_model
    train = load_split(tiny_data, "train")
    _, tlog = train_refiner(train, SegModel(model.baseline, model.mean, model.std), math.log(6),
                            ARCH, TrainConfig(epochs=1, batch_size=4))
    assert tlog.steps == [] and tlog.skipped == 2
    res = refine_image(model, train.images[0], "gated", math.log(6))
    base = refine_image(model, train.images[0], "baseline")
    assert not res.mask.any()
    assert res.labels.tobytes() == base.labels.tobytes()


def test_direct_and_gated_share_selection(tiny_data, tiny_model):
    model, _, _ = tiny_model
    train = load_split(tiny_data, "train")
    cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=4, seed=3)
    logs = []
    for strategy in ("gated", "direct"):
        m = SegModel(model.baseline, model.mean, model.std)
        logs.append(train_refiner(train, m, 0.3, ARCH, cfg, hidden=8, strategy=strategy)[1])
    assert [s["pixels"] for s in logs[0].steps] == [s["pixels"] for s in logs[1].steps]
    with pytest.raises(ValueError):
        train_refiner(train, SegModel(model.baseline), 0.3, ARCH, cfg, strategy="oracle")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_data):
    train = load_split(tiny_data, "train")
    train.images = train.images[:2]
    train.labels = train.labels[:2]
    with pytest.raises(TrainingError):
        train_baseline(train, ARCH, TrainConfig(lr=1e30, epochs=3, batch_size=2))


# --- inference and evaluation ------------------------------------------------

def test_refinement_is_deterministic(tiny_data, tiny_model):
    model, _, _ = tiny_model
    image = load_split(tiny_data, "val").images[0]
    a, b = refine_image(model, image), refine_image(model, image)
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.macs == b.macs


def test_full_mask_oracle_never_loses(tiny_data, tiny_model):
    model, _, _ = tiny_model
    val = load_split(tiny_data, "val")
    for image, label in zip(val.images, val.labels):
        low = model.baseline_logits([model.lowres_input(image)])[0]
        res = refine_from_logits(model, image, low, "oracle", 0.0, label)
        assert res.mask.mean() > 0.99
        base = mean_iou(per_class_iou(confusion_matrix(res.baseline_labels, label, 6)))
        ours = mean_iou(per_class_iou(confusion_matrix(res.labels, label, 6)))
        assert ours >= base
        # pixel-wise the oracle can only keep or fix
        assert not ((res.baseline_labels == label) & (res.labels != label)).any()


def test_oracle_needs_ground_truth(tiny_data, tiny_model):
    model, _, _ = tiny_model
    with pytest.raises(ValueError, match="ground truth"):
        refine_image(model, load_split(tiny_data, "val").images[0], "oracle", 0.0)


def test_evaluate_report(tiny_data, tiny_model):
    model, _, _ = tiny_model
    val = load_split(tiny_data, "val")
    base = evaluate(val, model, "baseline")
    gated = evaluate(val, model, "gated", 0.3)
    oracle = evaluate(val, model, "oracle", 0.3)
    assert base.density == 0 and base.macs["extractor"] == 0
    assert oracle.miou >= base.miou
    m = gated.macs
    assert m["selector"] == 0
    assert m["total"] == m["baseline"] + m["selector"] + m["extractor"] + m["ensembler"]
    assert m["baseline"] < m["dense_full"]
    assert 0 < gated.density < 1 and 0 <= gated.recall <= 1
    assert "timings" not in json.loads(gated.canonical())
    assert EvalReport(**gated.to_dict()).canonical() != "" and set(gated.timings) >= {"extractor"}
    with pytest.raises(ValueError):
        evaluate(Dataset(), model)
    with pytest.raises(ValueError):
        evaluate(val, model, "bogus")


def test_lower_alpha_never_lowers_recall(tiny_data, tiny_model):
    model, _, _ = tiny_model
    val = load_split(tiny_data, "val")
    low = cache_baseline_logits(model, val.images)
    recalls = [evaluate(val, model, "direct", a, low).recall for a in (0.8, 0.6, 0.3, 0.1)]
    assert recalls == sorted(recalls)


def test_checkpoint_preserves_outputs(tiny_data, tiny_model, tmp_path):
    model, _, _ = tiny_model
    model.save(tmp_path / "m.srck")
    back = SegModel.load(tmp_path / "m.srck")
    image = load_split(tiny_data, "val").images[1]
    a, b = refine_image(model, image), refine_image(back, image)
    assert a.labels.tobytes() == b.labels.tobytes()
    la = model.baseline_logits([model.lowres_input(image)])[0]
    lb = back.baseline_logits([back.lowres_input(image)])[0]
    assert la.tobytes() == lb.tobytes()


def test_choose_alpha_prefers_cheapest_within_tolerance():
    sweep = [{"alpha": 0.3, "miou": 0.900, "macs": 100},
             {"alpha": 0.6, "miou": 0.899, "macs": 60},
             {"alpha": 0.8, "miou": 0.890, "macs": 40}]
    assert choose_alpha(sweep, 0.2) == 0.6
    assert choose_alpha(sweep, 1.5) == 0.8
    assert choose_alpha(sweep, 0.0) == 0.3


def test_experiment_config_round_trip():
    cfg = ExperimentConfig(alphas=(0.8, 0.3), seed=4)
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict() and back.alphas == (0.3, 0.8)
    b, r = cfg.seeded()
    assert (b.seed, r.seed) == (4, 5)


# --- benchmarks --------------------------------------------------------------

def test_time_steps():
    calls = []
    t = time_steps(lambda: calls.append(1), steps=5, warmup=2)
    assert len(calls) == 7 and t.shape == (5,)
    with pytest.raises(ValueError):
        time_steps(lambda: None, steps=0)


def test_small_conv_bench():
    r = bench_conv(32, 64, 8, 0.1, steps=3, warmup=1)
    assert r.sites == int(0.1 * 32 * 64)
    assert r.sparse_macs <= 0.1 * r.dense_macs
    assert r.ratio > 0 and set(r.to_dict()) >= {"ratio", "sparse_ms", "dense_ms"}


def test_model_bench(tiny_model):
    model, _, _ = tiny_model
    rows = bench_model(model, 32, 64, [0.1, 1.0], steps=2, warmup=1)
    assert [r["density"] for r in rows] == [0.1, 1.0]
    assert rows[0]["extractor_macs"] < rows[1]["extractor_macs"] == rows[1]["dense_macs"]
    # benchmarking folds a copy; the model itself keeps its batch norms
    assert any(type(m).__name__ == "BatchNorm" for m in model.refiner.modules())


# --- CLI ---------------------------------------------------------------------

def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines()], err


def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(dict(TINY.to_dict(), num_train=4, num_val=2)))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"arch": {"channels": [4, 8]}, "train": {"epochs": 1}, "crop": None,
                               "hidden": 8}))
    data, base, ref = tmp_path / "data", tmp_path / "b.srck", tmp_path / "r.srck"
    assert _run(capsys, "gen-data", "--spec", spec, "--out", data, "--seed", 3)[0] == 0
    assert json.loads((data / "synth.json").read_text())["seed"] == 3
    code, out, _ = _run(capsys, "train-baseline", "--data", data, "--out", base, "--config", cfg)
    assert code == 0 and out[0]["steps"] == 1
    code, out, _ = _run(capsys, "train-refiner", "--data", data, "--baseline", base, "--alpha", 0.3,
                        "--out", ref, "--config", cfg)
    assert code == 0
    img, gt = data / "val" / "0000.ppm", data / "val" / "0000.pgm"
    code, out, _ = _run(capsys, "refine", "--image", img, "--ckpt", ref, "--ensemble", "oracle",
                        "--gt", gt, "--out", tmp_path / "o.pgm")
    assert code == 0 and (tmp_path / "o.pgm").exists() and "extractor" in out[0]["macs"]
    code, out, _ = _run(capsys, "select", "--image", img, "--ckpt", ref, "--alpha", 0.3, "--gt", gt,
                        "--out", tmp_path / "s.pgm")
    assert code == 0 and 0 <= out[0]["density"] <= 1 and "recall" in out[0]
    code, out, _ = _run(capsys, "eval", "--data", data, "--ckpt", ref, "--ensemble", "direct")
    assert code == 0 and out[0]["mode"] == "direct" and out[0]["alpha"] == 0.3
    code, out, _ = _run(capsys, "bench", "--ckpt", ref, "--density", "0.5", "--height", 16,
                        "--width", 32, "--steps", 1, "--warmup", 0)
    assert code == 0 and out[0]["density"] == 0.5


def test_cli_verify(capsys):
    code, out, _ = _run(capsys, "verify", "--suite", "conv", "--cases", 5)
    assert code == 0 and out[0]["passed"]
    code, out, _ = _run(capsys, "verify", "--suite", "coords", "--cases", 2)
    assert code == 0 and out[0]["passed"]


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--data", tmp_path, "--ckpt", tmp_path / "none.srck")
    assert code == 2
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == "FileNotFoundError" and line["message"]
    bad = tmp_path / "bad.srck"
    bad.write_bytes(b"junk")
    code, _, err = _run(capsys, "refine", "--image", bad, "--ckpt", bad, "--out", tmp_path / "x.pgm")
    assert code == 2 and json.loads(err)["error"] == "CheckpointError"
    with pytest.raises(SystemExit):
        main(["bogus"])
