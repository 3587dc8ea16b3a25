"""Acceptance gate: one test per criterion, one printed verdict line each.

Criteria 6 and 8 need the real CIFAR-10 binaries (place them under
DISSIM_DATA_DIR or ./data). Without the dataset they SKIP, naming what is
missing; scaled-down synthetic analogues of the same directional claims run
unconditionally below them as supporting evidence (they are analogues, not
substitutes, and say so in their names).

Run with: pytest tests/test_acceptance.py -v -s
"""

import json

import numpy as np
import pytest

from dissim import cli, nn, repsim
from dissim import tensor as T
from dissim.data import batches, data_root, load_cifar10, synth_splits
from dissim.diversity import PredictionSet, cohens_kappa, edr, jsd, pairwise_report
from dissim.nn import ModelConfig, build_model
from dissim.repsim import expvar, l2corr, lincka_batch, lincka_dataset
from dissim.tensor import Tensor
from dissim.training import (DissimConfig, make_projection, train_model,
                             train_sequence, train_step)

from conftest import finite_difference_grads, rel_err, tape_grads
from test_repsim import cka_dataset_oracle, hsic_oracle

TINY = ModelConfig((1, 1, 1, 1), (8, 8, 16, 16), num_classes=4, input_shape=(3, 16, 16))
DESK = ModelConfig((2, 2, 2, 2), (16, 32, 64, 128), num_classes=10, input_shape=(3, 16, 16))


def verdict(num, name, passed, detail=""):
    state = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {num} ({name}): {state} {detail}")
    assert passed, f"criterion {num} ({name}) failed {detail}"


def cifar_or_skip(num, name):
    root = data_root()
    try:
        return load_cifar10(root)
    except (FileNotFoundError, ValueError):
        msg = (f"CIFAR-10 binaries not found under {root} "
               f"(set DISSIM_DATA_DIR); criterion runs only with the real dataset")
        print(f"\nACCEPTANCE {num} ({name}): SKIP {msg}")
        pytest.skip(msg)


def test_criterion_1_metric_oracle_equivalence():
    worst_h = 0.0
    worst_c = 0.0
    for n in (4, 8, 16):
        for seed in range(20):
            r = np.random.default_rng([n, seed])
            a = r.normal(size=(n, n))
            K = a + a.T
            b = r.normal(size=(n, n))
            L = b + b.T
            got = repsim.hsic_unbiased(Tensor(K), Tensor(L)).item()
            worst_h = max(worst_h, abs(got - hsic_oracle(K, L)))
            xs = [r.normal(size=(n, 5)) for _ in range(3)]
            ys = [0.4 * x + r.normal(size=(n, 5)) for x in xs]
            got = lincka_dataset(list(xs), list(ys)).value
            worst_c = max(worst_c, abs(got - cka_dataset_oracle(xs, ys)))
    verdict(1, "metric oracle equivalence", worst_h < 1e-10 and worst_c < 1e-10,
            f"(hsic {worst_h:.2e}, cka {worst_c:.2e})")


def test_criterion_2_gradient_suite():
    def check(fn, arrays, h):
        analytic = tape_grads(fn, arrays)
        numeric = finite_difference_grads(
            lambda *raw: fn(*[Tensor(a) for a in raw]).item(), arrays, h=h)
        return max(rel_err(a, n) for a, n in zip(analytic, numeric))

    worst_aligned = 0.0
    worst_prim = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        z = r.normal(size=(8, 4, 3, 3))
        zh = 0.5 * z + r.normal(size=z.shape)
        for metric in (l2corr, expvar, lincka_batch):
            worst_aligned = max(worst_aligned, check(metric, [z, zh], h=1e-4))
        x = np.sign(r.normal(size=(30,))) * (np.abs(r.normal(size=(30,))) + 0.05)
        worst_prim = max(worst_prim, check(
            lambda a: T.tsum(T.celu(a) * T.celu(a)), [x], h=1e-5))
        worst_prim = max(worst_prim, check(
            lambda a, b: T.tsum(T.power(T.matmul(a, b), 2.0)),
            [r.normal(size=(3, 4)), r.normal(size=(4, 2))], h=1e-5))
        worst_prim = max(worst_prim, check(
            lambda a, w: T.tsum(T.power(T.conv2d(a, w, 1, 1), 2.0)),
            [r.normal(size=(2, 2, 4, 4)), r.normal(size=(3, 2, 3, 3))], h=1e-5))
    verdict(2, "gradient suite", worst_aligned < 1e-5 and worst_prim < 1e-6,
            f"(aligned {worst_aligned:.2e}, primitives {worst_prim:.2e})")


def test_criterion_3_invariance_suite():
    exact = True
    lincka_dev = 0.0
    sensitivity = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        z = r.normal(size=(6, 5, 3, 3))
        zh = 0.6 * z + 0.2 * r.normal(size=z.shape)
        exact &= (l2corr(Tensor(z), Tensor(zh)).item()
                  == l2corr(Tensor(z), Tensor(2.0 * zh)).item())
        x = r.normal(size=(16, 8))
        y = r.normal(size=(16, 6))
        q, _ = np.linalg.qr(r.normal(size=(8, 8)))
        lincka_dev = max(lincka_dev, abs(
            lincka_batch(Tensor(x), Tensor(x @ q)).item() - 1.0))
        lincka_dev = max(lincka_dev, abs(
            lincka_batch(Tensor(x), Tensor(y)).item()
            - lincka_batch(Tensor(2.5 * x), Tensor(y)).item()))
        sensitivity &= (expvar(Tensor(z), Tensor(2.0 * z)).item()
                        < expvar(Tensor(z), Tensor(z)).item())
    verdict(3, "invariance suite", exact and lincka_dev < 1e-8 and sensitivity,
            f"(scaling exact={exact}, lincka dev {lincka_dev:.2e})")


def test_criterion_4_diversity_unit_suite():
    ok = True
    c = np.array([True, True, True, False])
    ok &= cohens_kappa(c, c) == 1.0
    ok &= cohens_kappa(np.array([1, 1, 0, 0], bool), np.array([1, 0, 1, 0], bool)) == 0.0
    ok &= cohens_kappa(np.array([1, 1, 0, 0], bool), np.array([0, 0, 1, 1], bool)) == -1.0
    p = np.eye(4)[[0, 1]]
    ok &= jsd(p, p) == 0.0
    ok &= abs(jsd(np.eye(2)[[0]], np.eye(2)[[1]]) - 100.0) < 1e-12
    truth = np.zeros(4, dtype=int)
    ok &= edr(np.ones(4, int), np.ones(4, int), truth) == 0.0
    ok &= abs(edr(np.ones(4, int), np.array([1, 1, 1, 2]), truth) - 1 / 3) < 1e-15
    ok &= edr(np.array([1, 1]), np.array([2, 2]), np.zeros(2, int)) is None
    r = np.random.default_rng(2024)
    null = cohens_kappa(r.random(100_000) < 0.9, r.random(100_000) < 0.9)
    ok &= abs(null) < 0.02
    verdict(4, "diversity unit suite", bool(ok), f"(null kappa {null:+.4f})")


def test_criterion_5_reduction_to_baseline():
    frozen = build_model(TINY, seed=7)
    plain = build_model(TINY, seed=3)
    reg = build_model(TINY, seed=3)
    cfg_plain = DissimConfig(metric="ExpVar", lambda_=0.0, tap_ids=[], epochs=1,
                             batch_size=16, seed=0)
    cfg_reg = DissimConfig(metric="ExpVar", lambda_=0.0, tap_ids=[2], epochs=1,
                           batch_size=16, seed=0, proj_lr=0.05)
    opt_p, opt_r = nn.SGD(plain.named_params()), nn.SGD(reg.named_params())
    proj = make_projection([TINY.block_channels[1]], TINY.block_channels[1], seed=0, tap_id=2)
    popt = nn.SGD(proj.params(), momentum=0.0, nesterov=False, weight_decay=0.0)
    for step in range(50):
        r = np.random.default_rng(step)
        batch = (r.normal(size=(16, 3, 16, 16)).astype(np.float32), r.integers(0, 4, 16))
        train_step(plain, [], {}, batch, cfg_plain, opt_p, {}, lr=0.05)
        train_step(reg, [frozen], {2: proj}, batch, cfg_reg, opt_r, {2: popt}, lr=0.05)
    identical = all(np.array_equal(a.data, b.data) for a, b in
                    zip(plain.named_params().values(), reg.named_params().values()))
    identical &= all(np.array_equal(a, b) for a, b in
                     zip(plain.named_buffers().values(), reg.named_buffers().values()))
    verdict(5, "reduction to baseline", identical, "(50 steps bit-identical)")


def _tap_cka(model_a, model_b, test_ds, tap, batch_size=128):
    def reps(m):
        for xb, _ in batches(test_ds, min(batch_size, len(test_ds))):
            _, r = m.forward_with_taps(Tensor(xb), [tap], training=False)
            yield r[tap].values.data
    return lincka_dataset(reps(model_a), reps(model_b)).value


def _prediction_set(model, test_ds, name):
    rows = [model.forward(Tensor(xb), training=False).data
            for xb, _ in batches(test_ds, min(256, len(test_ds)), drop_small=False)]
    return PredictionSet.from_logits(np.concatenate(rows), test_ds.labels, name)


def _dissim_effect(model_cfg, train_ds, test_ds, seed, tap, epochs, batch_size,
                   policy=None):
    """Train base A (seed), baseline second B (seed+1), regularized second C
    (seed+1, ExpVar lambda=1 at ``tap``); return the criterion-6 quantities."""
    base = DissimConfig(metric="ExpVar", lambda_=0.0, tap_ids=[], epochs=epochs,
                        batch_size=batch_size, seed=seed)
    a = build_model(model_cfg, seed, name=f"A{seed}")
    train_model(a, [], base, train_ds, policy=policy)
    b_cfg = DissimConfig(metric="ExpVar", lambda_=0.0, tap_ids=[], epochs=epochs,
                         batch_size=batch_size, seed=seed + 1)
    b = build_model(model_cfg, seed + 1, name=f"B{seed + 1}")
    train_model(b, [], b_cfg, train_ds, policy=policy)
    c_cfg = DissimConfig(metric="ExpVar", lambda_=1.0, tap_ids=[tap], epochs=epochs,
                         batch_size=batch_size, seed=seed + 1,
                         proj_lr=0.1, proj_steps=3)
    c = build_model(model_cfg, seed + 1, name=f"C{seed + 1}")
    train_model(c, [a], c_cfg, train_ds, policy=policy)

    cka_base = _tap_cka(a, b, test_ds, tap)
    cka_reg = _tap_cka(a, c, test_ds, tap)
    pa = _prediction_set(a, test_ds, "a")
    pb = _prediction_set(b, test_ds, "b")
    pc = _prediction_set(c, test_ds, "c")
    kappa_base = cohens_kappa(pa.correct, pb.correct)
    kappa_reg = cohens_kappa(pa.correct, pc.correct)
    return {"cka_base": cka_base, "cka_reg": cka_reg,
            "kappa_base": kappa_base, "kappa_reg": kappa_reg,
            "acc": {"a": pa.accuracy, "b": pb.accuracy, "c": pc.accuracy},
            "models": (a, b, c)}


@pytest.mark.cifar
@pytest.mark.slow
def test_criterion_6_desk_scale_dissimilarity_effect_cifar10():
    """ResNet-S on full CIFAR-10, 30 epochs, batch 128; means over 3 seed triplets."""
    from dissim.data import AugmentPolicy
    train_ds, test_ds = cifar_or_skip(6, "desk-scale dissimilarity effect")
    mid_tap = 4  # end of the second stage: mid-network
    cka_drops, kappa_drops, acc_gaps = [], [], []
    for seed in (100, 200, 300):
        out = _dissim_effect("resnet-s", train_ds, test_ds, seed, mid_tap,
                             epochs=30, batch_size=128, policy=AugmentPolicy())
        cka_drops.append(out["cka_base"] - out["cka_reg"])
        kappa_drops.append((out["kappa_base"] - out["kappa_reg"]) * 100)
        acc_gaps.append(abs(out["acc"]["c"] - out["acc"]["b"]) * 100)
    ok = (np.mean(cka_drops) >= 0.25 and np.mean(kappa_drops) >= 2.0
          and np.mean(acc_gaps) <= 1.5)
    verdict(6, "desk-scale dissimilarity effect", ok,
            f"(cka drop {np.mean(cka_drops):.3f}, kappa drop {np.mean(kappa_drops):.2f}pt, "
            f"acc gap {np.mean(acc_gaps):.2f}pt)")


@pytest.mark.slow
def test_criterion_6_synth_analogue():
    """Supporting evidence only: the same directional machinery on synthetic
    data at a reduced scale (one seed triplet, 16x16 inputs, 6 epochs)."""
    train_ds, test_ds = synth_splits(seed=5, n_train=1024, n_test=512, classes=10,
                                     side=16, signal=0.12, noise=0.25)
    out = _dissim_effect(DESK, train_ds, test_ds, seed=100, tap=4,
                         epochs=6, batch_size=64)
    cka_drop = out["cka_base"] - out["cka_reg"]
    kappa_drop = (out["kappa_base"] - out["kappa_reg"]) * 100
    acc = out["acc"]
    acc_ok = acc["c"] >= min(acc["a"], acc["b"]) - 0.02
    ok = cka_drop >= 0.05 and kappa_drop >= 1.0 and acc_ok
    print(f"\nACCEPTANCE 6-analogue (synthetic, reduced scale): "
          f"{'PASS' if ok else 'FAIL'} (cka {out['cka_base']:.3f}->{out['cka_reg']:.3f}, "
          f"kappa drop {kappa_drop:+.1f}pt, acc a/b/c "
          f"{acc['a']:.3f}/{acc['b']:.3f}/{acc['c']:.3f})")
    # independently trained pair: the all-taps heatmap diagonal stays clearly similar
    a, b, _ = out["models"]
    data = [xb for xb, _ in batches(test_ds, 128)]
    heat = repsim.cka_heatmap(a, b, data, a.tap_ids(), b.tap_ids())
    diag_ok = float(np.mean(np.diag(heat))) > 0.4
    assert ok and diag_ok, (out, float(np.mean(np.diag(heat))))


@pytest.mark.slow
def test_criterion_7_sequence_scaling():
    train_ds, test_ds = synth_splits(seed=9, n_train=512, n_test=256, classes=10,
                                     side=16)
    cfg = DissimConfig(metric="ExpVar", lambda_=1.0, tap_ids=[4], epochs=2,
                       batch_size=64, seed=50, proj_lr=0.1, proj_steps=2)
    models, stats = train_sequence(DESK, cfg, 3, train_ds)
    c = DESK.block_channels[1]
    sizing_ok = (stats[0].projection_shapes == {}
                 and stats[1].projection_shapes == {4: (c, c)}
                 and stats[2].projection_shapes == {4: (c, 2 * c)})

    # frozen models bit-identical: retrain members 1 and 2 standalone and compare
    solo1 = build_model(DESK, cfg.seed, name=models[0].name)
    train_model(solo1, [], DissimConfig(metric="ExpVar", lambda_=0.0, tap_ids=[],
                                        epochs=2, batch_size=64, seed=50), train_ds)
    frozen_ok = all(np.array_equal(a.data, b.data) for a, b in
                    zip(solo1.named_params().values(), models[0].named_params().values()))

    sets = [_prediction_set(m, test_ds, m.name) for m in models]
    report = pairwise_report(sets, test_ds.labels)
    pairs_ok = len(report.pairs) == 3
    verdict(7, "sequence scaling", sizing_ok and frozen_ok and pairs_ok,
            f"(proj shapes {stats[1].projection_shapes} {stats[2].projection_shapes}, "
            f"3 pairs={pairs_ok}, frozen intact={frozen_ok})")


@pytest.mark.cifar
@pytest.mark.slow
def test_criterion_8_reproducibility_cifar10(tmp_path):
    """Criterion 6's run, repeated with identical config: byte-identical outputs."""
    cifar_or_skip(8, "reproducibility")
    cfg_doc = {
        "schema_version": 1,
        "dataset": {"kind": "cifar10", "dir": str(data_root())},
        "model": "resnet-s",
        "n_models": 2, "seed": 100, "out_dir": str(tmp_path / "r1"),
        "training": {"metric": "ExpVar", "lambda": 1.0, "tap_ids": [4],
                     "epochs": 30, "batch_size": 128, "proj_lr": 0.1, "proj_steps": 3},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    assert cli.main(["--log-level", "warning", "train", "--config", str(cfg_path)]) == 0
    assert cli.main(["--log-level", "warning", "train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r2")]) == 0
    same = all((tmp_path / "r1" / f"model_{i:03d}.ckpt").read_bytes()
               == (tmp_path / "r2" / f"model_{i:03d}.ckpt").read_bytes()
               for i in (1, 2))
    for rep in ("rep1", "rep2"):
        ck = [str(tmp_path / "r1" / f"model_{i:03d}.ckpt") for i in (1, 2)]
        assert cli.main(["--log-level", "warning", "eval", *ck, "--config",
                         str(cfg_path), "--out", str(tmp_path / rep)]) == 0
    same &= ((tmp_path / "rep1.csv").read_bytes() == (tmp_path / "rep2.csv").read_bytes())
    verdict(8, "reproducibility", same, "(checkpoints and reports byte-identical)")


@pytest.mark.slow
def test_criterion_8_synth_analogue(tmp_path):
    """Supporting evidence only: identical config twice at reduced synthetic
    scale gives byte-identical checkpoints and reports."""
    cfg_doc = {
        "schema_version": 1,
        "dataset": {"kind": "synth", "n_train": 256, "n_test": 128,
                    "classes": 10, "side": 16, "seed": 3},
        "model": {"block_depths": [2, 2, 2, 2], "block_channels": [16, 32, 64, 128],
                  "bottleneck": False, "num_classes": 10, "input_shape": [3, 16, 16]},
        "n_models": 2, "seed": 100, "out_dir": str(tmp_path / "r1"),
        "training": {"metric": "ExpVar", "lambda": 1.0, "tap_ids": [4],
                     "epochs": 2, "batch_size": 64, "proj_lr": 0.1, "proj_steps": 2},
        "augment": {"enabled": False},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    assert cli.main(["--log-level", "warning", "train", "--config", str(cfg_path)]) == 0
    assert cli.main(["--log-level", "warning", "train", "--config", str(cfg_path),
                     "--out", str(tmp_path / "r2")]) == 0
    same = all((tmp_path / "r1" / f"model_{i:03d}.ckpt").read_bytes()
               == (tmp_path / "r2" / f"model_{i:03d}.ckpt").read_bytes()
               for i in (1, 2))
    ck1 = [str(tmp_path / "r1" / f"model_{i:03d}.ckpt") for i in (1, 2)]
    ck2 = [str(tmp_path / "r2" / f"model_{i:03d}.ckpt") for i in (1, 2)]
    assert cli.main(["--log-level", "warning", "eval", *ck1, "--config", str(cfg_path),
                     "--out", str(tmp_path / "repA")]) == 0
    assert cli.main(["--log-level", "warning", "eval", *ck2, "--config", str(cfg_path),
                     "--out", str(tmp_path / "repB")]) == 0
    same &= ((tmp_path / "repA.csv").read_bytes() == (tmp_path / "repB.csv").read_bytes())
    same &= ((tmp_path / "repA.json").read_bytes() == (tmp_path / "repB.json").read_bytes())
    print(f"\nACCEPTANCE 8-analogue (synthetic, reduced scale): "
          f"{'PASS' if same else 'FAIL'} (byte-identical outputs)")
    assert same
