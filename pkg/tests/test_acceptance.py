"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL lines
inline; they are also collected into a summary section at the end of any
pytest run.
"""

import json
import time

import numpy as np
import pytest

from sharknet.checkpoint import load_checkpoint, save_checkpoint
from sharknet.cli import foreground_mask, main
from sharknet.data import load_images, make_folds, stratified_split
from sharknet.errors import CheckpointError
from sharknet.explain import (
    CoalitionMasker, exact_shapley, foreground_mass_fraction, gradient_path_attribution, kernel_shap,
)
from sharknet.metrics import ConfusionMatrix, compute_metrics, confusion_matrix, format_percent_summary
from sharknet.model import build_sharknet, layer_parameter_counts, layer_shapes, predict_logits
from sharknet.plots import render_heatmap
from sharknet.synth import SynthSpec, synthesize_tooth_dataset
from sharknet.train import TrainConfig, evaluate, train
from sharknet.tsne import (
    TsneConfig, calibrate_affinities, conditional_affinities, label_agreement, squared_distances, standardize, tsne,
)

from gradcases import CASE_NAMES, PRECISIONS, check_layer_gradient
from oracles import metrics_per_sample, perplexity_of_row
from test_explain import _linear_model, _softmax, _toy_patch_model

CANONICAL_COUNTS = [896, 0, 9248, 0, 18496, 0, 0, 5537920, 0, 1290]
CANONICAL_SHAPES = [(222, 222, 32), (111, 111, 32), (109, 109, 32), (54, 54, 32), (52, 52, 64), (26, 26, 64),
                    (43264,), (128,), (128,), (10,)]
VAL_COLUMN = [84.81, 84.32, 83.05, 81.78, 83.475]
TEST_COLUMN = [87.04, 87.96, 80.55, 84.26, 84.26]


# -- shared synthetic run ---------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    """Reduced 64x64 model trained once on the synthetic tooth set."""
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("synthetic")
    manifest = synthesize_tooth_dataset(SynthSpec(per_class=100, image_size=64, seed=0), root)
    data = load_images(manifest, (64, 64))
    plan = stratified_split(data, 0.1, seed=0, val_fraction=0.1)
    train_set, val_set, test_set = data.subset(plan.train), data.subset(plan.val), data.subset(plan.test)
    model = build_sharknet((64, 64, 3), 10, 0.5, seed=0)
    cfg = TrainConfig(learning_rate=1e-4, batch_size=128, max_epochs=60)
    model, curve = train(model, train_set, val_set, cfg)
    return {"model": model, "data": data, "plan": plan, "train": train_set, "test": test_set,
            "curve": curve, "seconds": time.perf_counter() - start}


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_architecture(criterion):
    with criterion(1, "architecture shapes and parameter counts", 1.0):
        model = build_sharknet((224, 224, 3), 10)
        assert layer_shapes(model.config) == CANONICAL_SHAPES
        assert layer_parameter_counts(model.config) == CANONICAL_COUNTS
        assert model.count_parameters() == 5_567_850
        assert all(t.requires_grad for _, t in model.named_parameters)


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_gradients(criterion):
    with criterion(2, "reverse-mode gradients vs central differences", 120.0):
        worst = {}
        for label, (dtype, eps, tol) in PRECISIONS.items():
            for case, name in enumerate(CASE_NAMES):
                err = check_layer_gradient(case, dtype, eps)
                worst[(label, name)] = err
                assert err < tol, f"{name} at {label}: relative error {err:.2e} >= {tol:g}"
        print("worst relative error:", max(worst.values()))


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_training(criterion, synthetic_run):
    with criterion(3, "synthetic end-to-end training", 30 * 60, synthetic_run["seconds"]):
        _, train_acc = evaluate(synthetic_run["model"], synthetic_run["train"])
        _, test_acc = evaluate(synthetic_run["model"], synthetic_run["test"])
        curve = synthetic_run["curve"]
        print(f"train {train_acc:.4f} test {test_acc:.4f} epochs {len(curve.records)} best {curve.best_epoch}")
        assert len(curve.records) <= 60
        assert train_acc >= 0.95
        assert test_acc >= 0.85


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_cross_validation(criterion):
    with criterion(4, "stratified folds and summary formatting", 1.0):
        rng = np.random.default_rng(0)
        for seed in range(5):
            labels = np.repeat(np.arange(10), rng.integers(5, 60, size=10))
            plan = make_folds(labels, 5, seed)
            held = [plan.fold_indices(f)[1] for f in range(5)]
            for a in range(5):
                for b in range(a + 1, 5):
                    assert not set(held[a]) & set(held[b])
            assert sorted(np.concatenate(held).tolist()) == list(range(len(labels)))
            for c in range(10):
                sizes = [int(np.sum(labels[h] == c)) for h in held]
                assert max(sizes) - min(sizes) <= 1
        assert format_percent_summary(VAL_COLUMN, std_decimals=0) == "83.5% (std 1%)"
        assert format_percent_summary(TEST_COLUMN) == "84.8% (std 2.6%)"


# -- 5 ------------------------------------------------------------------------------


FIELDS = ["accuracy", "balanced_accuracy", "precision", "recall", "f1", "macro_precision", "macro_recall", "macro_f1"]


def test_criterion_5_metrics(criterion):
    with criterion(5, "metrics vs per-sample oracle", 10.0):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            k, n = int(rng.integers(1, 11)), int(rng.integers(1, 201))
            t, p = rng.integers(0, k, n), rng.integers(0, k, n)
            r = compute_metrics(confusion_matrix(t, p, k))
            ref = metrics_per_sample(t.tolist(), p.tolist(), k)
            for f in FIELDS:
                assert abs(getattr(r, f) - ref[f]) < 1e-12, f
            recalls = [row["recall"] for row in r.per_class if row["support"] > 0]
            assert abs(r.balanced_accuracy - float(np.mean(recalls))) < 1e-12
        for _ in range(100):
            k, support = int(rng.integers(2, 11)), int(rng.integers(1, 30))
            counts = np.stack([rng.multinomial(support, rng.dirichlet(np.ones(k))) for _ in range(k)])
            r = compute_metrics(ConfusionMatrix(counts, [str(i) for i in range(k)]))
            assert abs(r.accuracy - r.balanced_accuracy) < 1e-12


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_tsne(criterion):
    with criterion(6, "t-SNE calibration, descent and separation", 120.0):
        x = np.random.default_rng(0).normal(size=(200, 128))
        pc, _ = conditional_affinities(squared_distances(x), 30.0)
        assert max(abs(perplexity_of_row(row) - 30.0) for row in pc) < 1e-5
        p = calibrate_affinities(x, 30.0)
        assert np.array_equal(p, p.T) and abs(p.sum() - 1.0) < 1e-9

        for seed in range(3):
            small = np.random.default_rng(seed + 10).normal(size=(60, 8))
            emb = tsne(calibrate_affinities(small, 10.0), TsneConfig(seed=seed, total_iters=400))
            assert emb.kl < emb.trace[0][1], f"seed {seed}"

        rng = np.random.default_rng(0)
        centers = rng.normal(0, 10.0, size=(3, 128))
        clusters = np.concatenate([c + rng.normal(size=(60, 128)) for c in centers])
        labels = np.repeat(np.arange(3), 60)
        emb = tsne(calibrate_affinities(standardize(clusters)[0], 30.0), TsneConfig(seed=1))
        assert emb.kl < emb.trace[0][1]
        agreement = label_agreement(emb.coords, labels)
        print(f"cluster label agreement {agreement:.3f}")
        assert agreement >= 0.99


# -- 7 ------------------------------------------------------------------------------


def _random_game(rng, n):
    table = rng.normal(size=2 ** n)
    codes = 1 << np.arange(n)
    return lambda s: table[int(codes[s].sum())]


def test_criterion_7_shapley(criterion):
    with criterion(7, "Shapley axioms and oracle equivalence", 120.0):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            v, v2 = _random_game(rng, n), _random_game(rng, n)
            phi = exact_shapley(v, n)
            assert abs(phi.sum() - (v(np.ones(n, bool)) - v(np.zeros(n, bool)))) < 1e-10
            np.testing.assert_allclose(exact_shapley(lambda s: v(s) + v2(s), n), phi + exact_shapley(v2, n),
                                       atol=1e-10)
            dummy = exact_shapley(lambda s: v(np.concatenate([[False], s[1:]])), n)
            assert abs(dummy[0]) < 1e-10
            sizes = rng.normal(size=n + 1)
            sym = exact_shapley(lambda s: sizes[s.sum()], n)
            assert np.abs(sym - sym[0]).max() < 1e-10

        masker = CoalitionMasker((8, 20, 3), grid=(2, 5))
        fn = _toy_patch_model(masker, seed=4)
        img = np.random.default_rng(5).random((8, 20, 3))
        amap = kernel_shap(fn, img, [], masker, n_samples=1024, output="probability")
        assert amap.meta["mode"] == "enumerated"
        exact = exact_shapley(lambda s: _softmax(fn(masker.mask(img, s)))[0], 10)
        assert np.abs(amap.values.reshape(3, -1).T - exact).max() < 1e-6
        assert np.abs(amap.local_accuracy_residual()).max() <= 1e-8

        model = _linear_model()
        x = rng.random((8, 8, 3)).astype(np.float32)
        bgs = rng.random((4, 8, 8, 3)).astype(np.float32)
        w = model.param(1, "weights").data.astype(np.float64).reshape(8, 8, 3, 2)
        analytic_px = np.einsum("hwcK,hwc->Khw", w, x - bgs.mean(0))
        bm = CoalitionMasker((8, 8, 3), grid=2, policy="background")
        analytic = np.stack([[analytic_px[k][bm.regions == r].sum() for r in range(4)] for k in range(2)])
        ks = kernel_shap(model, x, bgs, bm, n_samples=64, output="raw")
        assert np.abs(ks.values.reshape(2, -1) - analytic).max() < 1e-4
        assert np.abs(ks.local_accuracy_residual()).max() <= 1e-8
        ex = exact_shapley(lambda s: np.mean([model(bm.mask(x, s, b)).data[0] for b in bgs], axis=0), 4)
        assert np.abs(ex.T - analytic).max() < 1e-4
        gp = gradient_path_attribution(model, x, bgs, n_steps=32, output="raw")
        assert np.abs(gp.values - analytic_px).max() < 1e-4


# -- 8 ------------------------------------------------------------------------------


TINY = {
    "model": {"input_size": 32},
    "train": {"max_epochs": 2, "batch_size": 16, "learning_rate": 0.001},
    "data": {"synth": {"num_classes": 3, "per_class": 10, "image_size": 32}},
    "tsne": {"perplexity": 5.0, "exaggeration_iters": 100, "total_iters": 200},
}


@pytest.mark.filterwarnings("ignore:.*constant feature column")
def test_criterion_8_determinism(criterion, tmp_path):
    with criterion(8, "seeded determinism and checkpoint integrity", 60.0):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(TINY))
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            for cmd in ("synth", "train", "eval", "features", "tsne"):
                assert main([cmd, "--config", str(cfg), "--output-dir", str(out), "--seed", "7"]) == 0, cmd
            (run_dir,) = [p for p in out.iterdir() if p.is_dir()]
            outputs.append(run_dir)
        for rel in ("eval/metrics.json", "tsne/embedding.csv"):
            assert (outputs[0] / rel).read_bytes() == (outputs[1] / rel).read_bytes(), rel

        path = outputs[0] / "train" / "model.snx"
        model = load_checkpoint(path)
        save_checkpoint(model, tmp_path / "again.snx")
        again = load_checkpoint(tmp_path / "again.snx")
        for (_, a), (_, b) in zip(model.named_parameters, again.named_parameters):
            assert a.data.tobytes() == b.data.tobytes()
        x = np.random.default_rng(0).random((4, 32, 32, 3))
        assert predict_logits(model, x).tobytes() == predict_logits(again, x).tobytes()

        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0x01
        (tmp_path / "bad.snx").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(tmp_path / "bad.snx")
        assert exc.value.kind == "checksum"


# -- 9 ------------------------------------------------------------------------------


def test_criterion_9_explanations(criterion, synthetic_run, tmp_path):
    with criterion(9, "attribution heatmaps concentrate on the tooth", 5 * 60):
        data, plan, model = synthetic_run["data"], synthetic_run["plan"], synthetic_run["model"]
        chosen, seen = [], set()
        for i in plan.test:
            if data.labels[i] not in seen:
                chosen.append(i)
                seen.add(data.labels[i])
            if len(chosen) == 3:
                break
        masker = CoalitionMasker((64, 64, 3), 8, "black")
        attrs, fractions = [], []
        for i in chosen:
            img = data.images[i]
            a = kernel_shap(model, img, [], masker, n_samples=2048, seed=0)
            assert np.abs(a.local_accuracy_residual()).max() <= 1e-6
            attrs.append(a)
            fractions.append(foreground_mass_fraction(a.pixels, foreground_mask(img)))
        layout = render_heatmap(attrs, [data.images[i] for i in chosen], tmp_path / "heatmaps.png")
        print("foreground attribution fractions:", [round(f, 3) for f in fractions])
        assert layout == (3, 1 + 10)
        assert (tmp_path / "heatmaps.png").stat().st_size > 0
        for f in fractions:
            assert f >= 0.60
