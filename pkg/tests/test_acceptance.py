"""Acceptance criteria 1-11, one test each; every test prints a PASS/FAIL line."""
import copy
import time

import numpy as np
import torch

from conftest import HELD_OUT, OOD_FRAMES, record
from cwflow.cwfa import CWFA, CWFAConfig, ConditionSet, build_conditions, check_level_gradients, load_model, save_model
from cwflow.flow import ConditionalAffine, ConditionalCoupling, FlowStack, Permutation
from cwflow.haar import LOG_DET, haar_down_axial, haar_up_axial
from cwflow.metrics import evaluate, psnr
from cwflow.ood import finetune, score_samples, select_threshold
from cwflow.optics import (
    PhantomConfig,
    SequenceDataset,
    adjoint_project,
    deconvolve_dataset,
    forward_project,
    gen_sequence,
    make_layout,
    richardson_lucy,
    synth_psf,
)

D64 = torch.float64
# out-of-distribution phantom family used for fine-tuning
FAMILY_B = PhantomConfig(seed=3)
B_FRAMES, B_TRAIN, B_EVAL = 30, np.arange(10), np.arange(10, 30)


def randomise(module, scale, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def held_out_conditions(family_a, trained_a, idx=HELD_OUT):
    rl = family_a["rl"]
    return build_conditions(rl.images[idx], rl.layout, trained_a["prior"])


# 1 ----------------------------------------------------------------------------------------
def test_criterion_1_invertibility():
    t0 = time.perf_counter()
    n = 100
    g = torch.Generator().manual_seed(0)
    shape = (4, 16, 16)
    x, c = torch.randn((n, *shape), generator=g), torch.randn((n, 3, 16, 16), generator=g)
    blocks = {
        "affine": ConditionalAffine(4, 3),
        "coupling": ConditionalCoupling(4, 3),
        "permutation": Permutation(16, 2, rng=np.random.default_rng(0)),
        "stack-affine": FlowStack.build(shape, 3, blocks=6, block_type="affine", seed=1),
        "stack-coupling": FlowStack.build(shape, 3, blocks=6, block_type="coupling", seed=2),
    }
    errors = {}
    with torch.no_grad():
        for k, (name, block) in enumerate(blocks.items()):
            randomise(block, 0.05, k)
            back = block.inverse(block(x, c).z, c)
            again = block(block.inverse(x, c), c).z
            errors[name] = max((back - x).abs().max().item(), (again - x).abs().max().item())

        # 3-level model on 8x16x16 volumes: V_0 <-> (z_0, z_1, z_2, V_3)
        vshape = (8, 16, 16)
        model = randomise(CWFA(CWFAConfig(levels=3, blocks_per_level=2, conv_channels=6), vshape, 3), 0.1, 9)
        vols = torch.rand((n, *vshape), generator=g) + 0.05
        cond = ConditionSet(torch.rand((n, 3, 16, 16), generator=g), vols.mean(0))

        def encode(v):
            zs = []
            for i in range(model.levels):
                v, out = model.level_forward(v, cond, i)
                zs.append(out.z)
            return zs, v

        def decode(zs, v):
            for i in reversed(range(model.levels)):
                detail = model.flows[i].inverse(zs[i], model.features(cond, i)) + model.base_detail(v, cond, i)
                v = haar_up_axial(v, detail)
            return v

        zs, top = encode(vols)
        err_fi = (decode(zs, top) - vols).abs().max().item()
        z_rand = [torch.randn(z.shape, generator=g) for z in zs]
        top_rand = torch.rand(top.shape, generator=g)
        zs2, top2 = encode(decode(z_rand, top_rand))
        err_if = max([(a - b).abs().max().item() for a, b in zip(zs2, z_rand)] + [(top2 - top_rand).abs().max().item()])
        errors["cwfa-3-level"] = max(err_fi, err_if)
    seconds = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst <= 1e-4 and seconds < 10
    record(1, ok, f"max round-trip error {worst:.2e} (tol 1e-4) over {n} samples x {len(errors)} blocks, "
                  f"{seconds:.1f}s (< 10s)")
    assert ok, errors


# 2 ----------------------------------------------------------------------------------------
def numeric_log_det(fn, x, eps=1e-5):
    flat = x.reshape(-1)
    n = flat.numel()
    jac = torch.zeros(n, n, dtype=D64)
    for j in range(n):
        e = torch.zeros(n, dtype=D64)
        e[j] = eps
        jac[:, j] = (fn((flat + e).reshape(x.shape)) - fn((flat - e).reshape(x.shape))).reshape(-1) / (2 * eps)
    return torch.linalg.slogdet(jac).logabsdet.item()


def test_criterion_2_log_det_oracle():
    t0 = time.perf_counter()
    shapes = [(2, 2, 2), (2, 2, 4), (4, 2, 2), (2, 1, 3), (2, 2, 3)]
    worst = 0.0
    for seed in range(20):
        shape = shapes[seed % len(shapes)]
        block_type = ("affine", "coupling")[seed % 2]
        stack = FlowStack.build(shape, 2, 1 + seed % 4, block_type, hidden=4, seed=seed).double()
        randomise(stack, 0.3, seed)
        g = torch.Generator().manual_seed(seed)
        x = torch.randn((1, *shape), generator=g, dtype=D64)
        c = torch.randn((1, 2, *shape[1:]), generator=g, dtype=D64)
        with torch.no_grad():
            got = stack(x, c).log_det.item()
            worst = max(worst, abs(got - numeric_log_det(lambda v: stack(v, c).z, x)))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-3 and seconds < 30
    record(2, ok, f"max |log_det - numeric| {worst:.2e} (tol 1e-3) over 20 stacks, {seconds:.1f}s (< 30s)")
    assert ok


# 3 ----------------------------------------------------------------------------------------
def test_criterion_3_gradient_oracle():
    errs, seconds = {}, {}
    for block_type in ("affine", "coupling"):
        t0 = time.perf_counter()
        errs[block_type] = max(check_level_gradients((4, 4, 4), block_type=block_type, points=5))
        seconds[block_type] = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-3 and max(seconds.values()) < 60
    timing = ", ".join(f"{k} {v:.1f}s" for k, v in seconds.items())
    record(3, ok, f"max relative gradient error {worst:.2e} (tol 1e-3) at 5 points per block type; "
                  f"{timing} (each < 60s)")
    assert ok, errs


# 4 ----------------------------------------------------------------------------------------
def test_criterion_4_haar():
    g = torch.Generator().manual_seed(0)
    round_trip = energy = 0.0
    for _ in range(20):
        v = torch.randn((16, 8, 8), generator=g, dtype=D64)
        pair = haar_down_axial(v)
        round_trip = max(round_trip, (haar_up_axial(pair) - v).abs().max().item())
        a, d = torch.randn((2, 4, 5, 5), generator=g, dtype=D64)
        pair2 = haar_down_axial(haar_up_axial(a, d))
        round_trip = max(round_trip, (pair2.approx - a).abs().max().item(), (pair2.detail - d).abs().max().item())
        total = v.pow(2).sum()
        energy = max(energy, abs((pair.approx.pow(2).sum() + pair.detail.pow(2).sum() - total) / total).item())
    # structural: the analysis map assembled column by column is orthogonal, so log|det| is 0
    eye = torch.eye(8, dtype=D64).reshape(8, 8, 1, 1)
    cols = [torch.cat([p.approx, p.detail]).reshape(-1) for p in map(haar_down_axial, eye)]
    logdet = torch.linalg.slogdet(torch.stack(cols, 1)).logabsdet.item()
    ok = round_trip <= 1e-6 and energy <= 1e-4 and LOG_DET == 0 and abs(logdet) < 1e-12
    record(4, ok, f"round trip {round_trip:.1e} (tol 1e-6), energy {energy:.1e} (tol 1e-4), "
                  f"LOG_DET == {LOG_DET}, assembled log|det| {logdet:.1e}")
    assert ok


# 5 ----------------------------------------------------------------------------------------
def test_criterion_5_rl_oracle():
    t0 = time.perf_counter()
    layout = make_layout(9, sensor_size=(96, 96), crop_size=(32, 32), ring_radius=24)
    psf = synth_psf(layout, 8)
    rng = np.random.default_rng(0)
    adj = 0.0
    for _ in range(5):
        v = rng.random((8, 32, 32)).astype(np.float32)
        img = rng.random(psf.sensor_shape).astype(np.float32)
        lhs = float(np.dot(forward_project(v, psf).ravel().astype(np.float64), img.ravel()))
        rhs = float(np.dot(v.ravel().astype(np.float64), adjoint_project(img, psf).ravel()))
        adj = max(adj, abs(lhs - rhs) / abs(lhs))
    hits = []
    for truth in [(5, 12, 20), (0, 3, 28), (7, 16, 16)]:
        v = np.zeros((8, 32, 32), np.float32)
        v[truth] = 1.0
        rec = richardson_lucy(forward_project(v, psf), psf, iterations=50)
        hits.append(np.unravel_index(np.argmax(rec), rec.shape) == truth)
    seconds = time.perf_counter() - t0
    ok = adj <= 1e-4 and all(hits) and seconds < 60
    record(5, ok, f"adjoint rel. error {adj:.1e} (tol 1e-4), single voxel localised {sum(hits)}/{len(hits)} "
                  f"after 50 iterations, {seconds:.1f}s (< 60s)")
    assert ok


# 6 ----------------------------------------------------------------------------------------
def test_criterion_6_end_to_end(family_a, trained_a):
    rl = family_a["rl"]
    model = trained_a["model"]
    with torch.no_grad():
        recon = model.reconstruct(held_out_conditions(family_a, trained_a)).numpy()
    m = evaluate(rl.volumes[HELD_OUT], recon, k=10)
    minutes = trained_a["seconds"] / 60
    ok = m["psnr"] >= 30 and m["mape"] <= 0.30 and m["pcc_mean"] >= 0.85 and minutes <= 15
    record(6, ok, f"{rl.volumes.shape[1:]} x {len(HELD_OUT)} held-out frames: PSNR {m['psnr']:.2f} dB (>= 30), "
                  f"MAPE {m['mape']:.3f} (<= 0.30), PCC {m['pcc_mean']:.3f} (>= 0.85); "
                  f"training {minutes:.1f} min (<= 15)")
    assert ok


# 7 ----------------------------------------------------------------------------------------
def test_criterion_7_zero_temperature(family_a, trained_a):
    rl, model = family_a["rl"], trained_a["model"]
    idx = HELD_OUT[:10]
    cond = held_out_conditions(family_a, trained_a, idx)
    with torch.no_grad():
        cold = model.reconstruct(cond, 0.0).numpy()
        same = cold.tobytes() == model.reconstruct(cond, 0.0).numpy().tobytes()
        warm = model.reconstruct(cond, 1.0, torch.Generator().manual_seed(0)).numpy()
    p0 = float(np.mean([psnr(rl.volumes[t], v) for t, v in zip(idx, cold)]))
    p1 = float(np.mean([psnr(rl.volumes[t], v) for t, v in zip(idx, warm)]))
    ok = same and p0 >= p1
    record(7, ok, f"T=0 byte-identical: {same}; mean PSNR T=0 {p0:.2f} dB >= T=1 {p1:.2f} dB over 10 frames")
    assert ok


# 8 ----------------------------------------------------------------------------------------
def test_criterion_8_ood(family_a, trained_a, ood_a):
    rep = ood_a["report"]
    # the model is trained for this suite, so its RL ground truth and training count too
    seconds = family_a["seconds"] + trained_a["seconds"] + ood_a["seconds"]
    ok = rep.auc >= 0.95 and rep.f1 >= 0.90 and seconds < 300
    # diagnostics only: each out-of-distribution set scanned against the in-distribution frames alone
    s, n = ood_a["scores"], OOD_FRAMES
    per_set = {name: select_threshold(s[:n] + part, [x.label for x in s[:n] + part]).f1
               for name, part in (("beads", s[n:2 * n]), ("background", s[2 * n:]))}
    record(8, ok, f"level-1 AUC {rep.auc:.4f} (>= 0.95), F1 {rep.f1:.4f} (>= 0.90) at threshold "
                  f"{rep.threshold:.4g}; 50 in vs 50 beads + 50 background; {seconds:.0f}s incl. RL, "
                  f"training and scoring (< 300s) [per-set F1: beads {per_set['beads']:.3f}, "
                  f"background {per_set['background']:.3f}]")
    assert ok


# 9 ----------------------------------------------------------------------------------------
def test_criterion_9_finetune(optics9, trained_a, ood_a):
    layout, psf = optics9
    rep_thr = ood_a["report"]
    t0 = time.perf_counter()
    b = deconvolve_dataset(gen_sequence(FAMILY_B, psf, layout, B_FRAMES), 100, 0.2)
    tuned, rep = finetune(trained_a["model"], b.images[B_TRAIN], b.volumes[B_TRAIN], layout,
                          b.images[B_EVAL], b.volumes[B_EVAL], epochs=100, k=10)
    after = [s.level(1) for s in score_samples(tuned, b.images[B_EVAL], b.volumes[B_EVAL], layout)]
    seconds = time.perf_counter() - t0
    gain = rep.delta_pct["psnr"]
    below = max(after) <= rep_thr.threshold
    ok = gain >= 10 and below and seconds < 600
    record(9, ok, f"PSNR {rep.before['psnr']:.2f} -> {rep.after['psnr']:.2f} dB ({gain:+.1f}%, >= +10%); "
                  f"held-out level-1 NLL max {max(after):.4f} vs threshold {rep_thr.threshold:.4f}; "
                  f"{seconds:.0f}s (< 600s)")
    assert ok


# 10 ---------------------------------------------------------------------------------------
def test_criterion_10_level_independence(family_a, trained_a):
    model = trained_a["model"]
    rl = family_a["rl"]
    idx = HELD_OUT[:8]
    vols = torch.from_numpy(rl.volumes[idx])
    cond = held_out_conditions(family_a, trained_a, idx)
    with torch.no_grad():
        base = model.total_loglik(vols, cond)
    results = []
    for j in range(model.levels + 1):
        other = copy.deepcopy(model)
        with torch.no_grad():
            for p in other.level_parameters(j):
                p.add_(1e-2 * torch.randn(p.shape, generator=torch.Generator().manual_seed(j)))
            cols = other.total_loglik(vols, cond)
        keep = [i for i in range(model.levels + 1) if i != j]
        results.append(torch.equal(cols[:, keep], base[:, keep]) and not torch.equal(cols[:, j], base[:, j]))
    ok = all(results)
    record(10, ok, f"perturbing each of {len(results)} level parameter sets changes only its own NLL column: "
                   f"{sum(results)}/{len(results)}")
    assert ok


# 11 ---------------------------------------------------------------------------------------
def test_criterion_11_persistence(tmp_path, family_a, trained_a):
    model, rl = trained_a["model"], family_a["rl"]
    ckpt, ckpt2 = tmp_path / "model.cwfa", tmp_path / "model2.cwfa"
    save_model(model, ckpt, rl.layout)
    back, _ = load_model(ckpt)
    save_model(back, ckpt2, rl.layout)
    params = all(a.numpy().tobytes() == b.numpy().tobytes()
                 for a, b in zip(model.state_dict().values(), back.state_dict().values()))
    cond = held_out_conditions(family_a, trained_a, HELD_OUT[:5])
    with torch.no_grad():
        recon = model.reconstruct(cond).numpy().tobytes() == back.reconstruct(cond).numpy().tobytes()
    data, data2 = tmp_path / "rl.cwfa", tmp_path / "rl2.cwfa"
    rl.save(data)
    again = SequenceDataset.load(data)
    again.save(data2)
    arrays = again.volumes.tobytes() == rl.volumes.tobytes() and again.images.tobytes() == rl.images.tobytes()
    files = ckpt.read_bytes() == ckpt2.read_bytes() and data.read_bytes() == data2.read_bytes()
    ok = params and recon and arrays and files
    record(11, ok, f"checkpoint params bit-exact: {params}; T=0 recon byte-identical after reload: {recon}; "
                   f"dataset arrays bit-exact: {arrays}; re-saved files identical: {files}")
    assert ok
