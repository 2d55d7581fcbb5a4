"""One test per acceptance criterion; each records a PASS/FAIL line printed at the end of the run."""
import math
import time

import numpy as np
import pytest
import torch

from seismollm.augment import TRANSFORMS, AugmentationSpec, run_pipeline
from seismollm.data import (
    EventParams,
    ScalingRanges,
    SynthConfig,
    decode_azimuth,
    encode_azimuth,
    make_pick_label,
    synth_dataset,
    synth_event,
)
from seismollm.evaluation import EvalConfig, evaluate
from seismollm.geo import locate_epicenter, location_error_km
from seismollm.losses import bce_loss, ce_loss, huber_loss, picking_loss
from seismollm.metrics import classification_metrics, regression_metrics
from seismollm.model import VARIANTS, assemble
from seismollm.model.embedder import ConvEmbedder, ConvFront, latent_patch, latent_unpatch
from seismollm.model.gpt2 import random_gpt2_state
from seismollm.model.network import ModelDims, llm_blocks_forward, partition, trainable_fraction
from seismollm.train import TrainConfig, fit, task_loss

from conftest import published_checkpoint
from reference import reference_forward, reference_gpt2


def test_criterion_01_shapes(acceptance):
    embedder, front = ConvEmbedder(), ConvFront()
    details, ok = [], True
    with torch.no_grad():
        for length in (64, 6144, 12288):
            x = torch.randn(1, 3, length)
            feats = embedder(x)
            tokens = front(x)
            good = feats.shape == (1, 96, length // 8) and tokens.shape == (1, length // 64, 768)
            ok &= good
            details.append(f"L={length}: {tuple(feats.shape[1:])} -> {tokens.shape[1]} tokens")
    acceptance(1, ok, "; ".join(details))
    assert ok


def test_criterion_02_lora_identity(acceptance, gpt2_state):
    published = published_checkpoint()
    if published is not None:
        from seismollm.model.gpt2 import CheckpointReader

        state, source = dict(CheckpointReader(published)), "published GPT-2 small"
    else:
        state, source = gpt2_state, "surrogate GPT-2-small-shaped weights (published checkpoint not available offline)"
    worst = 0.0
    for n_layers in (3, 12):
        ref = reference_gpt2(state, n_layers)
        model = assemble("distance", "full", n_layers, checkpoint=state)
        assert all(not m.lora_B.any() for m in model.modules() if hasattr(m, "lora_B"))
        g = torch.Generator().manual_seed(n_layers)
        for _ in range(10):
            tokens = torch.randn(96, 768, generator=g)
            with torch.no_grad():
                ours = llm_blocks_forward(tokens, model)
            theirs = reference_forward(ref, tokens[None])[0]
            worst = max(worst, float((ours - theirs).abs().max() / theirs.abs().max()))
    ok = worst <= 1e-4
    acceptance(2, ok, f"max rel err {worst:.2e} over 10 sequences x (3, 12) layers; {source}")
    assert ok


def test_criterion_03_freezing(acceptance, checkpoint):
    model = assemble("distance", "full", 3, checkpoint=checkpoint)
    frozen_names, _ = partition(model)
    params = dict(model.named_parameters())
    loaded = {n: params[n].detach().clone() for n in frozen_names}
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    g = torch.Generator().manual_seed(0)
    model.train()
    for _ in range(5):
        x = torch.randn(4, 3, 512, generator=g)
        y = torch.rand(4, generator=g)
        loss = task_loss("distance", model(x), y, torch.ones(4))
        opt.zero_grad()
        loss.backward()
        opt.step()
    identical = all(torch.equal(params[n], loaded[n]) for n in frozen_names)
    frac = trainable_fraction(model)
    ok = identical and 0.05 <= frac <= 0.20 and len(frozen_names) == 3 * 12
    acceptance(3, ok, f"{len(frozen_names)} frozen tensors bit-identical after 5 steps: {identical}; "
                      f"trainable fraction {frac:.4f}")
    assert ok


def _fd_check(f, x: torch.Tensor, coords, h=1e-5, floor=1e-8):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.view(-1)
    worst = 0.0
    flat = x.detach().view(-1)
    for i in coords:
        old = flat[i].item()
        flat[i] = old + h
        up = f(x.detach()).item()
        flat[i] = old - h
        down = f(x.detach()).item()
        flat[i] = old
        fd = (up - down) / (2 * h)
        a = analytic[i].item()
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


def _toy_model():
    dims = ModelDims(embed_channels=(8, 8, 8, 8), patch_size=2, n_heads=2, n_positions=64, lora_rank=2,
                     head_channels=6, pick_channels=(4, 4, 4), dropout=0.0, lora_dropout=0.0)
    state = random_gpt2_state(n_layers=2, d_model=16, n_positions=64, vocab_size=10, seed=7)
    model = assemble("distance", "full", 2, dims, checkpoint=state, seed=3).double()
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for m in model.modules():
            if hasattr(m, "lora_B"):
                m.lora_B.copy_(torch.randn(m.lora_B.shape, generator=g, dtype=torch.float64) * 0.1)
    return model.eval()


def test_criterion_04_gradients(acceptance):
    rng = np.random.default_rng(0)
    n = 60
    results = {}

    p = torch.rand(2, 200, dtype=torch.float64) * 0.9 + 0.05
    lab = torch.rand(2, 200, dtype=torch.float64)
    results["bce"] = _fd_check(lambda x: bce_loss(x[0], lab[0]), p, rng.choice(200, n, replace=False))
    results["picking"] = _fd_check(lambda x: picking_loss(x[0], x[1], lab[0], lab[1]), p,
                                   rng.choice(400, n, replace=False))
    logits = torch.randn(40, 2, dtype=torch.float64)
    onehot = torch.nn.functional.one_hot(torch.randint(0, 2, (40,)), 2).double()
    results["ce"] = _fd_check(lambda z: ce_loss(torch.softmax(z, -1), onehot), logits, rng.choice(80, n, replace=False))
    r = torch.randn(100, dtype=torch.float64) * 2
    r = r + torch.sign(r) * 0.02 * ((r.abs() - 1).abs() < 0.02)  # stay off the kink
    results["huber"] = _fd_check(lambda v: huber_loss(v, torch.zeros(100, dtype=torch.float64)), r,
                                 rng.choice(100, n, replace=False))

    # toy end-to-end model: gradients w.r.t. randomly chosen trainable coordinates
    model = _toy_model()
    x = torch.randn(4, 3, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = torch.rand(4, dtype=torch.float64)
    trainable = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    flat = torch.cat([p.detach().reshape(-1) for _, p in trainable])
    sizes = [p.numel() for _, p in trainable]

    def loss_of(vec):
        offset = 0
        with torch.no_grad():
            for (_, p), k in zip(trainable, sizes):
                p.copy_(vec[offset : offset + k].view_as(p))
                offset += k
        return huber_loss(model(x), y)

    model.zero_grad()
    huber_loss(model(x), y).backward()
    analytic = torch.cat([p.grad.reshape(-1) for _, p in trainable])
    coords = rng.choice(flat.numel(), n, replace=False)
    worst, h = 0.0, 1e-5
    for i in coords:
        v = flat.clone()
        v[i] += h
        up = loss_of(v).item()
        v[i] -= 2 * h
        down = loss_of(v).item()
        fd = (up - down) / (2 * h)
        a = analytic[i].item()
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    loss_of(flat)
    results["toy model"] = worst

    ok = all(v <= 1e-3 for v in results.values())
    acceptance(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in results.items()) + f" (max rel err, {n} coords each)")
    assert ok


def test_criterion_05_patch_bijection(acceptance):
    g = torch.Generator().manual_seed(0)
    ok = True
    for i in range(100):
        c, n, p = (int(v) for v in torch.randint(1, 12, (3,), generator=g))
        x = torch.randn(2, c, n * p, generator=g)
        ok &= torch.equal(latent_unpatch(latent_patch(x, p), c, p), x)
    acceptance(5, ok, "100 random tensors round-trip bit-exactly" if ok else "round trip mismatch")
    assert ok


def test_criterion_06_metric_oracles(acceptance):
    checks = {}
    m = classification_metrics((8, 2, 2))
    checks["TP8/FP2/FN2"] = all(abs(v - 0.8) < 1e-12 for v in m[:3])
    checks["perfect"] = classification_metrics((5, 0, 0))[:3] == (1.0, 1.0, 1.0)
    m = classification_metrics((0, 0, 5))
    checks["degenerate"] = m[:3] == (0.0, 0.0, 0.0) and m.degenerate
    # signed errors (+1, 0, -1): MAE 2/3, RMSE sqrt(2/3), Mean 0 by hand
    r = regression_metrics([2, 2, 2], [1, 2, 3])
    checks["(1,2,3) vs 2"] = (abs(r.mae - 2 / 3) < 1e-12 and abs(r.rmse - math.sqrt(2 / 3)) < 1e-12
                              and abs(r.mean) < 1e-12 and abs(r.r2) < 1e-12)
    r = regression_metrics([1, 2, 3], [1, 2, 3])
    checks["exact"] = (r.mae, r.r2, r.mean, r.std, r.rmse) == (0.0, 1.0, 0.0, 0.0, 0.0)
    rng = np.random.default_rng(0)
    truth = rng.normal(5, 2, 500)
    r = regression_metrics(np.full(500, truth.mean()), truth)
    checks["mean predictor R2=0"] = abs(r.r2) < 1e-12
    r = regression_metrics(truth + rng.normal(0.3, 1.0, 500), truth)
    checks["RMSE^2=Mean^2+Std^2"] = abs(r.rmse**2 - (r.mean**2 + r.std**2)) < 1e-9
    ok = all(checks.values())
    acceptance(6, ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


def test_criterion_07_location_geometry(acceptance):
    east = locate_epicenter(0.0, 0.0, 90.0, 111.195)
    north = locate_epicenter(0.0, 0.0, 0.0, 111.195)
    d_pos = max(abs(east[0]), abs(east[1] - 1.0), abs(north[0] - 1.0), abs(north[1]))
    d_err = max(abs(location_error_km((0.0, 0.0), (0.0, 1.0)) - 111.195),
                abs(location_error_km((0.0, 0.0), (1.0, 0.0)) - 111.195))
    ok = d_pos <= 1e-6 and d_err <= 1e-3
    acceptance(7, ok, f"max position error {d_pos:.1e} deg, distance error {d_err:.1e} km")
    assert ok


# ---------------------------------------------------------------- training criteria

OVERFIT_SCALING = ScalingRanges(magnitude=(0.0, 4.0), distance_km=(5.0, 40.0))


@pytest.mark.slow
def test_criterion_08_overfit(acceptance, checkpoint):
    data = synth_dataset(SynthConfig(n=64, seed=8, length=512, sample_rate=50.0), OVERFIT_SCALING)
    eval_cfg = EvalConfig(tolerance=0.1)
    results, ok = {}, True
    t0 = time.time()
    for task in ("picking", "azimuth", "distance", "magnitude", "polarity"):
        model = assemble(task, "full", 3, checkpoint=checkpoint)
        if task == "picking":
            def perfect(m, h):
                r = evaluate(m, data, "picking", eval_cfg, OVERFIT_SCALING)
                return r.metrics["P.F1"] == 1.0 and r.metrics["S.F1"] == 1.0

            cfg = TrainConfig(batch_size=16, max_epochs=500, patience=500, augment=False, seed=0)
            model, h = fit(model, data, data, task, cfg, callback=perfect)
            r = evaluate(model, data, "picking", eval_cfg, OVERFIT_SCALING)
            good = r.metrics["P.F1"] == 1.0 and r.metrics["S.F1"] == 1.0
            results[task] = f"F1 P {r.metrics['P.F1']:.3f} S {r.metrics['S.F1']:.3f} @ {h.epochs} ep"
        else:
            cfg = TrainConfig(batch_size=16, max_epochs=500, patience=500, augment=False, seed=0, stop_below=0.01)
            model, h = fit(model, data, data, task, cfg)
            good = h.val_loss[-1] < 0.01
            results[task] = f"loss {h.val_loss[-1]:.4f} @ {h.epochs} ep"
        ok &= good
    detail = "; ".join(f"{k} {v}" for k, v in results.items()) + f"; {time.time() - t0:.0f} s"
    acceptance(8, ok, detail)
    assert ok


GENERALIZATION_SCALING = ScalingRanges(magnitude=(0.0, 4.0), distance_km=(0.0, 50.0))
GENERALIZATION_TRAIN = TrainConfig(batch_size=32, max_epochs=20, augment=False, seed=0)


@pytest.mark.slow
def test_criterion_09_generalization_ordering(acceptance, checkpoint):
    cfg = SynthConfig(length=512, sample_rate=50.0)
    train = synth_dataset(SynthConfig(**{**cfg.__dict__, "n": 2000, "seed": 101}), GENERALIZATION_SCALING)
    val = synth_dataset(SynthConfig(**{**cfg.__dict__, "n": 200, "seed": 102}), GENERALIZATION_SCALING)
    test = synth_dataset(SynthConfig(**{**cfg.__dict__, "n": 500, "seed": 103}), GENERALIZATION_SCALING)
    truth = np.array([r.distance_km for r, _ in test])
    baseline = float(np.mean(np.abs(truth - np.mean([r.distance_km for r, _ in train]))))
    published = published_checkpoint()
    if published is not None:
        from seismollm.model.gpt2 import CheckpointReader

        weights, source = CheckpointReader(published), "published GPT-2 small"
    else:
        weights, source = checkpoint, "surrogate random GPT-2 weights"
    mae = {}
    for variant in ("full", "no_llm"):
        model = assemble("distance", variant, 3, checkpoint=weights if variant == "full" else None)
        model, _ = fit(model, train, val, "distance", GENERALIZATION_TRAIN)
        mae[variant] = evaluate(model, test, "distance", EvalConfig(), GENERALIZATION_SCALING).metrics["MAE"]
    ok = mae["full"] <= 0.8 * baseline and mae["no_llm"] >= mae["full"]
    acceptance(9, ok, f"distance MAE full {mae['full']:.2f} km, no_llm {mae['no_llm']:.2f} km, "
                      f"mean predictor {baseline:.2f} km (full/baseline {mae['full'] / baseline:.2f}); {source}")
    assert ok


@pytest.mark.slow
def test_criterion_10_ablation_smoke(acceptance, checkpoint):
    data = synth_dataset(SynthConfig(n=16, seed=4, length=512, sample_rate=50.0), ScalingRanges())
    cfg = TrainConfig(batch_size=8, max_epochs=1, augment=True, seed=0)
    bad = []
    for variant in VARIANTS:
        model = assemble("picking", variant, 3, checkpoint=checkpoint)
        model, h = fit(model, data[:12], data[12:], "picking", cfg)
        with torch.no_grad():
            out = model(torch.randn(2, 3, 512))
        report = evaluate(model, data[12:], "picking", EvalConfig(), ScalingRanges())
        if out.shape != (2, 2, 512) or h.epochs != 1 or not np.isfinite(h.val_loss[0]) or "P.F1" not in report.metrics:
            bad.append(variant)
    ok = not bad
    acceptance(10, ok, f"{len(VARIANTS) - len(bad)}/{len(VARIANTS)} variants built, trained 1 epoch, evaluated"
                       + (f"; failed: {bad}" if bad else ""))
    assert ok


def test_criterion_11_augmentation_rates(acceptance):
    record, labels = synth_event(EventParams(2.0, 10.0, 45.0), seed=2, length=3000, sample_rate=100.0)
    spec = AugmentationSpec()
    margin = int(round(spec.drift_seconds * 100.0))
    assert record.p_index >= margin and record.s_index + margin < 3000  # drift can never skip
    rng = np.random.default_rng(2024)
    draws = 10_000
    counts = dict.fromkeys(TRANSFORMS, 0)
    for _ in range(draws):
        for kind in run_pipeline(record, labels, spec, rng)[2]:
            counts[kind] += 1
    errors = {k: abs(counts[k] / draws - spec.probability(k)) for k in TRANSFORMS}
    ok = max(errors.values()) <= 0.02
    acceptance(11, ok, ", ".join(f"{k} {counts[k] / draws:.3f}/{spec.probability(k)}" for k in TRANSFORMS))
    assert ok


def test_criterion_12_label_fixtures(acceptance):
    sr = 100.0
    label = make_pick_label(6000, 3000, sr)
    sigma, edge = 10, 25
    values = (label[3000], label[3000 + sigma], label[3000 - sigma], label[3000 + edge], label[3000 - edge])
    picks_ok = values[0] == 1.0 and all(abs(v - math.exp(-0.5)) < 1e-12 for v in values[1:3]) and values[3:] == (0.0, 0.0)
    angles = np.random.default_rng(0).uniform(0.0, 360.0, 1000)
    worst = max(abs((decode_azimuth(*encode_azimuth(a)) - a + 180.0) % 360.0 - 180.0) for a in angles)
    ok = picks_ok and worst < 1e-9
    acceptance(12, ok, f"pick label at 0/1 sigma/edge = {values[0]:.3f}/{values[1]:.6f}/{values[3]:.3f}; "
                       f"azimuth round-trip max err {worst:.1e} deg")
    assert ok
