import csv
import itertools
import math

import mpmath
import numpy as np
import pytest

from haarnet.data import load_checkpoint, make_dataset
from haarnet.errors import ContractError, ShapeError, TrainingError
from haarnet.nn import HaarNet, HaarNetConfig
from haarnet.tensor import Tensor, backward, finite_diff_grad, relative_error
from haarnet.train import (
    LOG_HEADER,
    TrainConfig,
    batches,
    boundary_f1,
    cross_entropy,
    default_boundary_tol,
    evaluate,
    load_model,
    metrics,
    poly_lr,
    sgd_nesterov_step,
    train_loop,
)


def ce_oracle(logits, labels, ignore_index=-1):
    """Scalar softmax per pixel in float64."""
    n, k, h, w = logits.shape
    total, count = 0.0, 0
    for b in range(n):
        for y in range(h):
            for x in range(w):
                t = labels[b, y, x]
                if t == ignore_index:
                    continue
                z = [float(logits[b, c, y, x]) for c in range(k)]
                top = max(z)
                total -= z[t] - top - math.log(sum(math.exp(v - top) for v in z))
                count += 1
    return total / count


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((1, 4, 3, 3))), np.zeros((1, 3, 3), dtype=np.int64))
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_confident_logits(self):
        labels = np.array([[[0, 2], [1, 1]]])
        logits = np.zeros((1, 3, 2, 2), dtype=np.float32)
        np.put_along_axis(logits, labels[:, None], 1000.0, axis=1)
        loss = cross_entropy(Tensor(logits), labels).item()
        assert 0.0 <= loss < 1e-6

    def test_matches_oracle(self, rng):
        for _ in range(10):
            logits = (rng.standard_normal((2, 5, 4, 3)) * 4).astype(np.float32)
            labels = rng.integers(0, 5, (2, 4, 3))
            labels[0, 0, 0] = -1
            assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(ce_oracle(logits, labels), abs=1e-5)

    def test_large_logits_are_stable(self):
        logits = np.array([1e4, 1e4 - 2.0], dtype=np.float32).reshape(1, 2, 1, 1)
        loss = cross_entropy(Tensor(logits), np.array([[[1]]])).item()
        assert loss == pytest.approx(2.0 + math.log1p(math.exp(-2.0)), rel=1e-5)

    def test_non_negative(self, rng):
        for _ in range(20):
            logits = rng.standard_normal((1, 3, 4, 4)) * 10
            assert cross_entropy(Tensor(logits), rng.integers(0, 3, (1, 4, 4))).item() >= 0.0

    def test_gradient(self, rng):
        logits = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        labels = rng.integers(-1, 3, (2, 3, 3))
        labels[0, 0, 0] = 1

        def loss(t):
            return cross_entropy(t, labels)

        backward(loss(logits))
        assert relative_error(logits.grad, finite_diff_grad(loss, logits, 1e-3).data) < 1e-3
        ignored = np.broadcast_to((labels == -1)[:, None], logits.shape)
        assert np.all(logits.grad[ignored] == 0.0)

    def test_all_ignored(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), -1))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[2]]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 2, 3), dtype=np.int64))


class TestNesterov:
    def test_zero_momentum_is_plain_sgd(self):
        p, g, v = np.array([1.0], np.float32), np.array([0.5], np.float32), np.zeros(1, np.float32)
        sgd_nesterov_step([p], [g], [v], 0.25, 0.0)
        assert p[0] == np.float32(1.0) - np.float32(0.25) * np.float32(0.5)

    def test_first_step_scales_by_one_plus_momentum(self):
        p, g, v = np.array([2.0], np.float32), np.array([1.0], np.float32), np.zeros(1, np.float32)
        sgd_nesterov_step([p], [g], [v], 0.5, 0.5)
        assert p[0] == 2.0 - 0.5 * 1.5 * 1.0
        assert v[0] == 1.0

    def test_three_steps_on_quadratic_match_recurrence(self):
        # f(p) = a p^2 / 2, gradient a p; the recurrence is written out in float32
        a, lr, m = np.float32(1.7), np.float32(0.1), np.float32(0.9)
        p, v = np.array([3.0], np.float32), np.zeros(1, np.float32)
        q, u = np.float32(3.0), np.float32(0.0)
        for _ in range(3):
            sgd_nesterov_step([p], [a * p], [v], 0.1, 0.9)
            g = a * q
            u = m * u + g
            q = q - lr * (g + m * u)
            assert p[0] == q and v[0] == u

    def test_none_gradient_is_skipped(self):
        p, v = np.ones(2, np.float32), np.zeros(2, np.float32)
        sgd_nesterov_step([p], [None], [v], 0.1, 0.9)
        np.testing.assert_array_equal(p, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_nesterov_step([np.ones(2)], [np.ones(3)], [np.zeros(2)], 0.1, 0.9)
        with pytest.raises(ShapeError):
            sgd_nesterov_step([np.ones(2)], [], [np.zeros(2)], 0.1, 0.9)


class TestPolyLR:
    def test_endpoints(self):
        cfg = TrainConfig(lr=5e-3, epochs=500)
        assert poly_lr(0, cfg) == 5e-3
        assert poly_lr(500, cfg) == 0.0

    def test_midpoint_against_high_precision(self):
        mpmath.mp.dps = 50
        expected = mpmath.mpf("5e-3") * mpmath.mpf("0.5") ** mpmath.mpf("0.9")
        got = poly_lr(250, TrainConfig(lr=5e-3, epochs=500))
        assert abs(mpmath.mpf(got) - expected) <= 1e-17

    def test_monotone(self):
        cfg = TrainConfig(epochs=300)
        values = [poly_lr(e, cfg) for e in range(301)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_outside_schedule(self):
        cfg = TrainConfig(epochs=10)
        with pytest.raises(ContractError):
            poly_lr(11, cfg)
        with pytest.raises(ContractError):
            poly_lr(-1, cfg)

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"momentum": 1.0}, {"momentum": -0.1}, {"epochs": 0}])
    def test_config_invariants(self, kwargs):
        with pytest.raises(ContractError):
            TrainConfig(**kwargs)


def brute_boundary(labels):
    h, w = labels.shape
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] != labels[y, x]:
                    out[y, x] = True
    return out


def brute_metrics(pred, gt, k, tol):
    """Confusion by counting, distances by scanning every pixel pair."""
    conf = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(gt.ravel(), pred.ravel()):
        conf[t, p] += 1
    ious = []
    for c in range(k):
        union = conf[c, :].sum() + conf[:, c].sum() - conf[c, c]
        if union:
            ious.append(conf[c, c] / union)
    pb_all, gb_all = brute_boundary(pred), brute_boundary(gt)
    scores = []
    for c in range(k):
        if not np.any(gt == c):
            continue
        pb = list(zip(*np.nonzero(pb_all & (pred == c))))
        gb = list(zip(*np.nonzero(gb_all & (gt == c))))

        def matched(src, dst):
            return sum(any((y - v) ** 2 + (x - u) ** 2 <= tol * tol for v, u in dst) for y, x in src)

        if not pb and not gb:
            scores.append(1.0)
            continue
        precision = matched(pb, gb) / len(pb) if pb else 0.0
        recall = matched(gb, pb) / len(gb) if gb else 0.0
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return float(np.mean(ious)), np.trace(conf) / conf.sum(), float(np.mean(scores))


class TestMetrics:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 4, (2, 8, 8))
        rep = metrics(gt, gt, 4)
        assert (rep.miou, rep.pixel_accuracy, rep.boundary_f1) == (1.0, 1.0, 1.0)

    def test_complement(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[:, 2:] = 1
        rep = metrics(1 - gt, gt, 2)
        assert rep.pixel_accuracy == 0.0
        assert rep.miou == 0.0

    def test_confusion_identities(self, rng):
        pred, gt = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
        rep = metrics(pred, gt, 3)
        assert rep.pixel_accuracy == np.trace(rep.confusion) / rep.confusion.sum()
        assert rep.confusion.sum() == 25
        assert rep.confusion[gt[0, 0], pred[0, 0]] >= 1

    def test_miou_skips_absent_classes(self):
        gt = np.array([[0, 0], [1, 1]])
        rep = metrics(gt, gt, 5)
        assert rep.miou == 1.0
        np.testing.assert_array_equal(rep.per_class_iou, [1, 1, 0, 0, 0])

    def test_four_by_four_two_class_oracle(self, rng):
        for _ in range(200):
            pred, gt = rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))
            rep = metrics(pred, gt, 2, boundary_tol=1)
            miou, acc, bf = brute_metrics(pred, gt, 2, 1)
            assert (rep.miou, rep.pixel_accuracy, rep.boundary_f1) == (miou, acc, bf)

    def test_tolerance_widens_matches(self, rng):
        for _ in range(50):
            pred, gt = rng.integers(0, 3, (7, 9)), rng.integers(0, 3, (7, 9))
            assert boundary_f1(pred, gt, 3, 2) == brute_metrics(pred, gt, 3, 2)[2]

    def test_permutation_invariance(self, rng):
        perm = np.array([2, 0, 3, 1])
        for _ in range(20):
            pred, gt = rng.integers(0, 4, (9, 9)), rng.integers(0, 4, (9, 9))
            a, b = metrics(pred, gt, 4), metrics(perm[pred], perm[gt], 4)
            assert a.miou == pytest.approx(b.miou, abs=1e-12)
            assert a.pixel_accuracy == b.pixel_accuracy
            assert a.boundary_f1 == pytest.approx(b.boundary_f1, abs=1e-12)

    def test_default_tolerance(self):
        assert default_boundary_tol(64, 64) == 1
        assert default_boundary_tol(480, 640) == 6

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            metrics(np.array([[0, 3]]), np.array([[0, 1]]), 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


def small_model(**switches):
    return HaarNet(HaarNetConfig(num_classes=3, widths=(4, 8, 8), bottleneck=8, **switches))


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(range(5), 40, 40, 3)


class TestBatches:
    def test_partition(self):
        parts = batches(10, 4, np.random.default_rng(0))
        assert [len(b) for b in parts] == [4, 4, 2]
        assert sorted(np.concatenate(parts).tolist()) == list(range(10))

    def test_single_leftover_joins_previous(self):
        parts = batches(9, 4, np.random.default_rng(0))
        assert [len(b) for b in parts] == [4, 5]
        assert sorted(np.concatenate(parts).tolist()) == list(range(9))


class TestTrainLoop:
    def test_one_epoch_of_two_batches_is_two_steps(self, tiny_data):
        data = tiny_data.subset([0, 1, 2, 3])
        result = train_loop(small_model(), data, TrainConfig(epochs=1, batch_size=2))
        assert result.steps == 2
        assert len(result.log) == 1

    def test_log_and_checkpoints(self, tiny_data, tmp_path):
        cfg = TrainConfig(epochs=4, batch_size=2, save_every=2)
        result = train_loop(small_model(), tiny_data, cfg, out_dir=tmp_path)
        with open(tmp_path / "log.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == LOG_HEADER == ["epoch", "lr", "loss", "miou", "pixel_acc", "boundary_f1"]
        assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
        assert float(rows[1][1]) == poly_lr(0, cfg)
        assert [p.name for p in result.checkpoints] == ["ckpt_epoch1.mten", "ckpt_epoch3.mten", "final.mten"]
        assert load_checkpoint(tmp_path / "final.mten")["meta/epoch"][0] == 3

    def test_seed_determinism(self, tiny_data):
        cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
        a = train_loop(small_model(), tiny_data, cfg)
        b = train_loop(small_model(), tiny_data, cfg)
        assert a.log == b.log
        for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    @pytest.mark.parametrize("mup,mrelu,mhw", [(True, True, True), (False, False, False)])
    def test_resume_is_bit_exact(self, tiny_data, tmp_path, mup, mrelu, mhw):
        cfg = TrainConfig(epochs=4, batch_size=2, save_every=2)
        switches = dict(use_mup=mup, use_mrelu=mrelu, use_mhw=mhw)
        full = train_loop(small_model(**switches), tiny_data, cfg, out_dir=tmp_path / "full")
        part = train_loop(small_model(**switches), tiny_data, cfg, out_dir=tmp_path / "part", max_epochs=2)
        assert part.log == full.log[:2]
        resumed = train_loop(small_model(**switches), tiny_data, cfg, resume=part.checkpoints[0])
        assert resumed.log == full.log[2:]
        for (_, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()
        for (_, a), (_, b) in zip(full.model.named_buffers(), resumed.model.named_buffers()):
            assert a.tobytes() == b.tobytes()

    def test_load_model_predicts_like_trained_model(self, tiny_data, tmp_path):
        result = train_loop(small_model(use_mhw=False), tiny_data, TrainConfig(epochs=1, batch_size=2), out_dir=tmp_path)
        model, stats = load_model(tmp_path / "final.mten")
        assert model.config == result.model.config
        np.testing.assert_array_equal(stats.mean, result.stats.mean)
        a = evaluate(model, tiny_data, stats)
        b = evaluate(result.model, tiny_data, result.stats)
        assert (a.miou, a.pixel_accuracy, a.boundary_f1) == (b.miou, b.pixel_accuracy, b.boundary_f1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_names_the_step(self, tiny_data):
        model = small_model()
        model.parameters()[0].data[...] = np.nan
        with pytest.raises(TrainingError, match="epoch 0, step 0"):
            train_loop(model, tiny_data, TrainConfig(epochs=1, batch_size=2))

    def test_empty_dataset(self, tiny_data):
        with pytest.raises(ContractError):
            train_loop(small_model(), tiny_data.subset([]), TrainConfig(epochs=1))

    def test_stop_when(self, tiny_data):
        seen = []

        def stop(epoch, model, stats):
            seen.append(epoch)
            return epoch == 1

        result = train_loop(small_model(), tiny_data, TrainConfig(epochs=5, batch_size=5), stop_when=stop)
        assert seen == [0, 1] and len(result.log) == 2


def test_exhaustive_small_permutations_cover_metrics_contract():
    # every labelling of a 2x2 grid against itself scores perfectly
    for cells in itertools.product(range(2), repeat=4):
        gt = np.array(cells).reshape(2, 2)
        rep = metrics(gt, gt, 2)
        assert (rep.miou, rep.pixel_accuracy, rep.boundary_f1) == (1.0, 1.0, 1.0)
