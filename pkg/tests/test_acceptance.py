"""Headline acceptance checks, one per criterion, each timed against its budget.

Every test records a single PASS/FAIL line that is printed in the terminal
summary (``pytest tests/test_acceptance.py``).
"""

import csv
import math
import time

import numpy as np
import torch

from conftest import record_acceptance
from facerecon.camera import euler_to_rotation
from facerecon.coefficients import N_COEFFS, OFFSETS, concat_coefficients, split_coefficients
from facerecon.evaluation import bbox_size, icp_align, nme, point_to_plane_rmse
from facerecon.illumination import N_LIGHT, SH_C0, shade_texture
from facerecon.losses import LossWeights, RandomProjectionEmbedding
from facerecon.morphable_model import N_EXP, N_ID, N_TEX, decode_shape, decode_texture, synthesize_toy_model
from facerecon.network import HSCA, PAFB, NetworkConfig, build_network, image_to_batch
from facerecon.pipeline import batch_losses
from facerecon.renderer import SENTINEL, rasterize, render, render_backward
from facerecon.training import TrainConfig, overfit_single_image, train
from synthetic import synthetic_sample, tiny_scene
from test_evaluation import _point_triangle_distance, _similarity
from test_illumination import random_normals, sh_reference
from test_losses import test_term_gradients_match_central_differences as loss_term_gradients
from test_network import ABLATIONS, _force_gates_open, _randomize_bn, hsca_loop, pafb_loop
from test_renderer import CAM, GRID_TRIS, POSE, _fd, _grid_vertices, ray_cast_oracle, random_scene


def _criterion(label, budget, body):
    """Run ``body`` under a wall-clock budget and record one PASS/FAIL line."""
    limit = f"{budget:g}s" if math.isfinite(budget) else "no time limit"
    start = time.perf_counter()
    try:
        detail = body() or ""
    except AssertionError as exc:
        elapsed = time.perf_counter() - start
        line = f"FAIL  {label} [{elapsed:.2f}s / {limit}] {str(exc).splitlines()[0] if str(exc) else ''}"
        record_acceptance(line)
        print(line)
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'}  {label} [{elapsed:.2f}s / {limit}] {detail}".rstrip()
    record_acceptance(line)
    print(line)
    assert ok, f"{label} took {elapsed:.2f}s, budget {budget}s"


def test_decode_linearity_and_zero_identity():
    def body():
        rng = np.random.default_rng(0)
        worst = 0.0
        for seed in (0, 1):
            model = synthesize_toy_model(seed=seed, n_vertices=300)
            mean = model.mean_shape.reshape(-1, 3)
            z_id, z_exp = torch.zeros(N_ID, dtype=torch.float64), torch.zeros(N_EXP, dtype=torch.float64)
            assert torch.equal(decode_shape(model, z_id, z_exp).reshape(-1), model.tensor("mean_shape"))
            assert torch.equal(decode_texture(model, torch.zeros(N_TEX, dtype=torch.float64)).reshape(-1),
                               model.tensor("mean_texture"))
            a1, a2 = rng.normal(size=N_ID), rng.normal(size=N_ID)
            b1, b2 = rng.normal(size=N_EXP), rng.normal(size=N_EXP)
            g1, g2 = rng.normal(size=N_TEX), rng.normal(size=N_TEX)
            lhs = decode_shape(model, a1 + a2, b1 + b2).numpy() - mean
            rhs = (decode_shape(model, a1, b1).numpy() - mean) + (decode_shape(model, a2, b2).numpy() - mean)
            rel = np.abs(lhs - rhs).max() / np.abs(lhs).max()
            tex0 = model.mean_texture.reshape(-1, 3)
            tl = decode_texture(model, g1 + g2).numpy() - tex0
            tr = (decode_texture(model, g1).numpy() - tex0) + (decode_texture(model, g2).numpy() - tex0)
            rel = max(rel, np.abs(tl - tr).max() / np.abs(tl).max())
            direct = (model.basis_id @ a1 + model.basis_exp @ b1).reshape(-1, 3)
            rel = max(rel, np.abs(decode_shape(model, a1, b1).numpy() - mean - direct).max() / np.abs(direct).max())
            worst = max(worst, rel)
        assert worst < 1e-12, f"relative linearity error {worst:.2e}"
        return f"max relative error {worst:.1e}"

    _criterion("decode linearity and zero-coefficient identity", 1.0, body)


def test_rotation_orthonormality():
    def body():
        rng = np.random.default_rng(1)
        r = euler_to_rotation(rng.uniform(-math.pi, math.pi, size=(1000, 3))).numpy()
        resid = np.linalg.norm(np.swapaxes(r, 1, 2) @ r - np.eye(3), axis=(1, 2)).max()
        det = np.abs(np.linalg.det(r) - 1.0).max()
        assert resid < 1e-12, f"|R^T R - I| = {resid:.2e}"
        assert det < 1e-12, f"|det R - 1| = {det:.2e}"
        return f"max |RtR-I| {resid:.1e}, max |det-1| {det:.1e}"

    _criterion("rotation orthonormality over 1000 poses", 1.0, body)


def test_sh_shading_oracle_and_band0_scaling():
    def body():
        rng = np.random.default_rng(2)
        tex, normals, light = rng.uniform(size=(60, 3)), random_normals(rng, 60), rng.normal(size=N_LIGHT)
        got = shade_texture(torch.as_tensor(tex), torch.as_tensor(normals), torch.as_tensor(light)).numpy()
        expected = np.empty_like(tex)
        for v in range(len(tex)):
            basis = sh_reference(normals[v])
            for ch in range(3):
                expected[v, ch] = tex[v, ch] * sum(light[9 * ch + k] * basis[k] for k in range(9))
        err = np.abs(got - expected).max() / np.abs(expected).max()
        assert err < 1e-12, f"loop oracle relative error {err:.2e}"
        band0 = torch.zeros(N_LIGHT, dtype=torch.float64)
        scale = torch.tensor([0.7, 1.3, 2.0], dtype=torch.float64)
        band0[[0, 9, 18]] = scale
        t = torch.as_tensor(tex)
        shaded = shade_texture(t, torch.as_tensor(normals), band0)
        ratio = (shaded / t).numpy()
        assert np.allclose(ratio, (scale * SH_C0).numpy(), rtol=1e-14, atol=0), "band-0 light not uniform"
        return f"loop oracle relative error {err:.1e}"

    _criterion("SH shading loop oracle and band-0 scaling", 1.0, body)


def test_rasterizer_coverage_matches_brute_force():
    def body():
        checked = 0
        for size in [(4, 4), (7, 5), (16, 16), (33, 20), (64, 64)]:
            rng = np.random.default_rng(size[0] * 100 + size[1])
            for _ in range(3):
                uv, z, cam, tris, f = random_scene(rng, size, int(rng.integers(1, 21)))
                frags = rasterize(uv, z, tris, size)
                ids, _, _ = ray_cast_oracle(cam, tris, f, size)
                assert np.array_equal(frags.triangle, ids), f"coverage differs on {size}"
                ys, xs = np.mgrid[0:size[0], 0:size[1]] + 0.5
                for t in range(len(tris)):
                    got = rasterize(uv, z, tris[t:t + 1], size).triangle != SENTINEL
                    a, b, c = uv[tris[t]]
                    s = np.stack([(q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
                                  for p, q in ((a, b), (b, c), (c, a))])
                    inside = np.all(s > 0, axis=0) | np.all(s < 0, axis=0)
                    assert np.array_equal(got, inside), f"point-in-triangle mismatch on {size}"
                    checked += 1
        return f"{checked} triangles on 5 canvas sizes"

    _criterion("rasterizer coverage vs brute force (4x4..64x64, <=20 triangles)", 10.0, body)


def test_loss_and_colour_path_gradients():
    def body():
        loss_term_gradients(np.random.default_rng(3))  # every loss term at rtol 1e-5
        rng = np.random.default_rng(4)
        verts = torch.as_tensor(_grid_vertices(rng))
        grad_image = torch.as_tensor(rng.normal(size=(16, 16, 3)))
        c0 = rng.uniform(0.2, 0.8, size=(9, 3))
        colors = torch.tensor(c0, requires_grad=True)
        out = render(verts, GRID_TRIS, colors, POSE, CAM)
        _, g_colors = render_backward(out, grad_image)
        fd = _fd(lambda c: float((render(verts, GRID_TRIS, torch.as_tensor(c), POSE, CAM).image * grad_image).sum()),
                 c0, 1e-6)
        rel = np.abs(g_colors.numpy() - fd).max() / np.abs(fd).max()
        assert rel < 1e-4, f"colour path relative error {rel:.2e}"
        return f"colour path relative error {rel:.1e}"

    _criterion("loss terms and renderer colour path finite differences", 60.0, body)


def test_attention_modules_match_loop_oracles():
    def body():
        rng = np.random.default_rng(5)
        hsca = HSCA(8, reduction=4).double().eval()
        x = rng.normal(size=(2, 8, 5, 7))
        out = hsca(torch.as_tensor(x)).detach().numpy()
        err_h = max(np.abs(out[b] - hsca_loop(hsca, x[b])).max() / np.abs(out[b]).max() for b in range(2))
        pafb = PAFB(4, reduction=4).double().eval()
        _randomize_bn(pafb, rng)
        high, low = rng.normal(size=(2, 4, 6, 8)), rng.normal(size=(2, 8, 3, 4))
        out = pafb(torch.as_tensor(high), torch.as_tensor(low)).detach().numpy()
        err_p = max(np.abs(out[b] - pafb_loop(pafb, high[b], low[b])).max() / np.abs(out[b]).max() for b in range(2))
        assert err_h < 1e-6 and err_p < 1e-6, f"HSCA {err_h:.2e}, PAFB {err_p:.2e}"
        _, w1, w2 = pafb.weights(torch.as_tensor(high), torch.as_tensor(low))
        assert torch.all(w1 + w2 == 1.0), "fusion weights do not sum to one"
        gate = HSCA(6).double()
        _force_gates_open(gate)
        xi = torch.as_tensor(rng.normal(size=(3, 6, 4, 5)))
        assert torch.equal(gate(xi), xi), "identity gate changed its input"
        return f"HSCA {err_h:.1e}, PAFB {err_p:.1e} relative"

    _criterion("HSCA/PAFB loop oracles, complementary weights, identity gate", 10.0, body)


def test_coefficient_layout_and_full_forward():
    def body():
        assert OFFSETS == (80, 144, 224, 227, 230, 257) and N_COEFFS == 257
        v = torch.as_tensor(np.random.default_rng(6).normal(size=(4, 257)))
        c = split_coefficients(v)
        bounds = (0,) + OFFSETS
        for (name, lo, hi) in zip(("id", "exp", "tex", "rotation", "translation", "light"), bounds, bounds[1:]):
            assert torch.equal(getattr(c, name), v[:, lo:hi]), name
        assert torch.equal(concat_coefficients(c), v)
        net = build_network(NetworkConfig(), seed=0).eval()
        with torch.no_grad():
            out = net(torch.rand(1, 3, 224, 224))
        assert out.shape == (1, 257), f"output shape {tuple(out.shape)}"
        return "offsets 80/144/224/227/230/257, output (1, 257)"

    _criterion("coefficient split/concat and 224x224 forward", 10.0, body)


def test_overfit_single_image(toy_model):
    def body():
        scene = tiny_scene()
        sample, _ = synthetic_sample(toy_model, scene)
        history = overfit_single_image(TrainConfig(), sample, 500, toy_model, scene, NetworkConfig.tiny())
        first, last = history[0]["total"], history[-1]["total"]
        reduction = 1.0 - last / first
        assert reduction >= 0.9, f"loss {first:.4g} -> {last:.4g} ({100 * reduction:.1f}% reduction)"
        return f"loss {first:.4g} -> {last:.4g} ({100 * reduction:.1f}% reduction)"

    _criterion("overfit one synthetic render, tiny backbone, 500 steps", 300.0, body)


def test_evaluation_metrics():
    def body():
        rng = np.random.default_rng(7)
        gt = rng.uniform(0, 100, size=(68, 2))
        assert nme(gt + [3.0, 4.0], gt, 100, 100) == 5.0
        for s in (0.01, 0.5, 3.0, 97.0):
            pred = gt + rng.normal(size=(68, 2))
            h, w = bbox_size(gt)
            assert math.isclose(nme(s * pred, s * gt, s * h, s * w), nme(pred, gt, h, w), rel_tol=1e-12)
        verts = synthesize_toy_model(seed=4, n_vertices=400).mean_shape.reshape(-1, 3)
        s, r, t = _similarity(None)
        res = icp_align(verts, s * verts @ r.T + t)
        assert abs(res.scale - s) < 1e-3, f"ICP scale {res.scale}"
        assert np.abs(res.rotation - r).max() < 1e-3
        m = synthesize_toy_model(seed=2, n_vertices=52)
        v, tri = m.mean_shape.reshape(-1, 3), m.triangles
        assert len(tri) <= 100
        pred = rng.normal(scale=70, size=(80, 3))
        oracle = math.sqrt(np.mean([min(_point_triangle_distance(p, *v[f]) for f in tri) ** 2 for p in pred]))
        got = point_to_plane_rmse(pred, v, tri)
        assert math.isclose(got, oracle, rel_tol=1e-10), f"RMSE {got} vs oracle {oracle}"
        return f"ICP scale error {abs(res.scale - s):.1e}, RMSE {got:.3f} mm"

    _criterion("NME cases, scale invariance, ICP s=1.2, RMSE vs exhaustive oracle", 30.0, body)


def test_ablations_run_end_to_end(toy_model, tmp_path):
    def body():
        scene = tiny_scene()
        samples = [synthetic_sample(toy_model, scene, seed=k)[0] for k in (1, 2)]
        totals = {}
        for name, overrides in ABLATIONS.items():
            cfg = NetworkConfig.tiny(**overrides)
            net = build_network(cfg, seed=0)
            n_hsca = sum(isinstance(mod, HSCA) for mod in net.modules())
            n_pafb = sum(isinstance(mod, PAFB) for mod in net.modules())
            assert (n_hsca > 0) == ("hsca" not in overrides) and (n_pafb > 0) == ("pafb" not in overrides), name
            x = image_to_batch(np.stack([s.image for s in samples]))
            loss = batch_losses(toy_model, net(x), samples, scene, LossWeights(), RandomProjectionEmbedding()).total
            loss.backward()
            assert torch.isfinite(loss), name
            train(TrainConfig(batch_size=2, epochs=1, augment=False), samples, toy_model, scene, cfg,
                  tmp_path / name, max_steps=1)
            totals[name] = loss.item()
        return ", ".join(f"{k} {v:.3g}" for k, v in totals.items())

    _criterion("ablation toggles build, train and backpropagate", math.inf, body)


def test_first_loss_row_is_deterministic(toy_model, tmp_path):
    def body():
        scene = tiny_scene()
        samples = [synthetic_sample(toy_model, scene, seed=k)[0] for k in (1, 2)]
        cfg = TrainConfig(batch_size=2, epochs=1, seed=21, max_shift=2.0, max_rotation=3.0)
        rows = []
        for run in ("a", "b"):
            train(cfg, samples, toy_model, scene, NetworkConfig.tiny(), tmp_path / run, max_steps=1)
            with open(tmp_path / run / "losses.csv") as fh:
                rows.append(list(csv.reader(fh))[1])
        assert rows[0] == rows[1], f"{rows[0]} != {rows[1]}"
        return f"total {rows[0][-1]}"

    _criterion("identical seeds give bitwise-identical first loss row", math.inf, body)

