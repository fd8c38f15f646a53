"""Acceptance gate: nine numbered criteria, one printed pass/fail line each.

The drift and noise fixtures each train the identity field once (a few
minutes total on a laptop CPU); everything else runs in seconds.
"""

import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import record_criterion

from sa4d.deformation import export_scene, ground_truth_labels
from sa4d.editing import ComposeSource, Edit, EditScript, apply_edits
from sa4d.evaluation import evaluate
from sa4d.field import (IdentityFieldParams, PositionalEncodingConfig,
                        classifier_logits, field_backward, field_forward,
                        save_checkpoint)
from sa4d.losses import loss_2d
from sa4d.pipeline import (RefinementConfig, build_table, classify_gaussians,
                           prune_boundary, remove_outliers,
                           supervising_frame_index, train)
from sa4d.scene import Camera, CanonicalScene, Gaussian
from sa4d.splatting import (backward_payload, compute_plan, render,
                            render_reference)
from sa4d.synth import (NoiseModel, SceneSpec, generate_scene, ids_from_labels,
                        save_dataset)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def criterion(n, desc, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {desc}"
    if detail:
        line += f" ({detail})"
    record_criterion(line)
    assert ok, line


def make_camera(size=32):
    return Camera(extrinsic=np.eye(4), fx=float(size), fy=float(size),
                  cx=size / 2, cy=size / 2, width=size, height=size)


def random_scene(rng, n):
    gaussians = []
    for i in range(n):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        gaussians.append(Gaussian(
            index=i, position=rng.uniform(-0.7, 0.7, 3) + np.array([0, 0, 4.0]),
            rotation=q, scale=rng.uniform(0.04, 0.25, 3),
            opacity=float(rng.uniform(0.1, 1.0)), color=rng.uniform(0, 1, 3)))
    return CanonicalScene(gaussians=tuple(gaussians), object_count=1)


def object_masks(ds, labels_per_frame, cam):
    """Composited point masks per frame from per-Gaussian labels."""
    preds = []
    for fr, labels in zip(ds.frames, labels_per_frame):
        deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
        plan = compute_plan(deformed, cam)
        masks = {}
        for oid in range(1, ds.canonical.object_count + 1):
            payload = (labels == oid).astype(float)[:, None]
            masks[oid] = plan.apply(payload)[:, :, 0]
        preds.append(masks)
    return preds


def field_frame_mious(ds, params, cam, gt_masks):
    labels = [classify_gaussians(params, ds.canonical, fr.timestamp)
              for fr in ds.frames]
    rep = evaluate(object_masks(ds, labels, cam), gt_masks)
    return np.array([r["miou"] for r in rep.per_frame])


@pytest.fixture(scope="module")
def drift_setup():
    spec = SceneSpec(object_count=2, gaussians_per_object=200, drift_cohort=80,
                     drift_time=0.5, frame_count=20, image_size=48, seed=7)
    ds = generate_scene(spec)
    temporal = train(ds.canonical, ds.motion, ds.frames, iterations=2000,
                     seed=0).params
    static_init = IdentityFieldParams.init(
        PositionalEncodingConfig(zero_time=True), seed=0)
    static = train(ds.canonical, ds.motion, ds.frames, iterations=2000, seed=0,
                   params=static_init).params
    return ds, temporal, static


@pytest.fixture(scope="module")
def noise_setup():
    spec = SceneSpec(object_count=2, gaussians_per_object=200, frame_count=20,
                     image_size=48, seed=13,
                     noise=NoiseModel(void_dropout=0.1, boundary_flip=0.2,
                                      seed=13))
    ds = generate_scene(spec)
    params = train(ds.canonical, ds.motion, ds.frames, iterations=2000,
                   seed=0).params
    return ds, params


def test_criterion_1_compositing_oracle():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(200):
        size = int(rng.integers(12, 33))
        cam = make_camera(size)
        scene = random_scene(rng, int(rng.integers(8, 65)))
        payload = rng.uniform(0, 1, (len(scene), 3))
        fast = render(scene, cam, payload)
        ref = render_reference(scene, cam, payload)
        worst = max(worst,
                    float(np.max(np.abs(fast.image - ref.image))),
                    float(np.max(np.abs(fast.transmittance - ref.transmittance))))
    criterion(1, "render matches brute-force reference over 200 random scenes",
              worst < 1e-6, f"worst abs diff {worst:.2e}")


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(77)
    cam = make_camera(16)
    scene = random_scene(rng, 12)
    plan = compute_plan(scene, cam)
    failures = []

    # splat payload gradients, per-entry central differences
    payload = rng.uniform(0, 1, (len(scene), 2))
    upstream = rng.normal(size=(16, 16, 2))
    out = render(scene, cam, payload, plan=plan)
    grads = backward_payload(out, upstream)
    h = 1e-4
    worst_splat = 0.0
    for i in range(len(scene)):
        for d in range(2):
            pp, pm = payload.copy(), payload.copy()
            pp[i, d] += h
            pm[i, d] -= h
            fd = (np.sum(upstream * plan.apply(pp)) -
                  np.sum(upstream * plan.apply(pm))) / (2 * h)
            denom = max(abs(fd), abs(grads[i, d]), 1e-3)
            worst_splat = max(worst_splat, abs(fd - grads[i, d]) / denom)
    if worst_splat >= 1e-4:
        failures.append(f"splat {worst_splat:.2e}")

    # MLP backprop, directional differences per parameter
    params = IdentityFieldParams.init(seed=5)
    x = rng.uniform(-1, 1, (15, 3))
    c = rng.normal(size=(15, 32))
    _, acts = field_forward(params, x, 0.4, return_activations=True)
    mlp_grads = field_backward(params, acts, c)
    h = 1e-6
    worst_mlp = 0.0
    for name in ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"):
        d = rng.normal(size=params.weights[name].shape)
        pp, pm = params.copy(), params.copy()
        pp.weights[name] += h * d
        pm.weights[name] -= h * d
        fd = (np.sum(c * field_forward(pp, x, 0.4)) -
              np.sum(c * field_forward(pm, x, 0.4))) / (2 * h)
        an = np.sum(mlp_grads[name] * d)
        worst_mlp = max(worst_mlp, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    if worst_mlp >= 1e-4:
        failures.append(f"mlp {worst_mlp:.2e}")

    # per-pixel cross entropy
    logits = rng.normal(size=(6, 6, 8))
    mask = rng.integers(0, 8, size=(6, 6))
    _, grad = loss_2d(logits, mask)
    worst_ce = 0.0
    for _ in range(40):
        i, j, k = rng.integers(6), rng.integers(6), rng.integers(8)
        lp, lm = logits.copy(), logits.copy()
        lp[i, j, k] += h
        lm[i, j, k] -= h
        fd = (loss_2d(lp, mask)[0] - loss_2d(lm, mask)[0]) / (2 * h)
        worst_ce = max(worst_ce, abs(fd - grad[i, j, k]))
    if worst_ce >= 1e-4:
        failures.append(f"ce {worst_ce:.2e}")

    # full chain: CE(classifier(splat(field(params)))) w.r.t. every parameter
    positions = scene.positions()
    mask = rng.integers(0, 4, size=(16, 16))

    def chain_loss(p):
        e = field_forward(p, positions, 0.3)
        feat = render(scene, cam, e, plan=plan).image
        return loss_2d(classifier_logits(p, feat), mask)[0]

    e, acts = field_forward(params, positions, 0.3, return_activations=True)
    out = render(scene, cam, e, plan=plan)
    logits = classifier_logits(params, out.image)
    _, grad_logits = loss_2d(logits, mask)
    flat = grad_logits.reshape(-1, grad_logits.shape[-1])
    grad_feat = (flat @ params.weights["wc"]).reshape(16, 16, -1)
    chain_grads = field_backward(params, acts, plan.apply_transpose(grad_feat))
    chain_grads["wc"] = flat.T @ out.image.reshape(-1, out.image.shape[-1])
    chain_grads["bc"] = flat.sum(axis=0)
    worst_chain = 0.0
    for name in chain_grads:
        d = rng.normal(size=params.weights[name].shape)
        pp, pm = params.copy(), params.copy()
        pp.weights[name] += h * d
        pm.weights[name] -= h * d
        fd = (chain_loss(pp) - chain_loss(pm)) / (2 * h)
        an = np.sum(chain_grads[name] * d)
        worst_chain = max(worst_chain, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    if worst_chain >= 1e-3:
        failures.append(f"chain {worst_chain:.2e}")

    criterion(2, "analytic gradients match central finite differences",
              not failures,
              failures and "; ".join(failures) or
              f"splat {worst_splat:.1e}, mlp {worst_mlp:.1e}, "
              f"ce {worst_ce:.1e}, chain {worst_chain:.1e}")


def test_criterion_3_conservation(drift_setup, noise_setup):
    worst = 0.0
    for ds in (drift_setup[0], noise_setup[0]):
        for fr in ds.frames:
            deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
            for cam in ds.cameras:
                plan = compute_plan(deformed, cam)
                worst = max(worst, float(np.max(np.abs(
                    plan.weight_sum + plan.transmittance - 1.0))))
    criterion(3, "per pixel, composited weight mass plus transmittance is 1",
              worst < 1e-6, f"worst deviation {worst:.2e}")


def test_criterion_4_drift_recovery(drift_setup):
    ds, temporal, static = drift_setup
    cam = ds.train_camera
    m_temporal = field_frame_mious(ds, temporal, cam, ds.gt_masks)
    m_static = field_frame_mious(ds, static, cam, ds.gt_masks)
    ts = np.array([fr.timestamp for fr in ds.frames])
    pre, post = ts < ds.spec.drift_time, ts >= ds.spec.drift_time
    gap = float(m_temporal[post].mean() - m_static[post].mean())
    ok = (m_temporal[pre].min() >= 0.90 and m_temporal[post].min() >= 0.90
          and gap >= 0.10)
    criterion(4, "temporal field recovers drift, static ablation does not", ok,
              f"temporal mIoU pre/post {m_temporal[pre].min():.3f}/"
              f"{m_temporal[post].min():.3f}, ablation post-t0 gap {gap:.3f}")


def test_criterion_5_noise_robustness(noise_setup):
    ds, params = noise_setup
    mious = field_frame_mious(ds, params, ds.train_camera, ds.gt_masks)
    mean = float(mious.mean())
    criterion(5, "field trained on corrupted masks scores vs clean GT",
              mean >= 0.85, f"mIoU {mean:.4f} >= 0.85")


def test_criterion_6_refinement(noise_setup):
    ds, _ = noise_setup
    cfg = RefinementConfig()
    n_per = ds.spec.gaussians_per_object
    centers = {1: ds.canonical.positions()[:n_per].mean(axis=0),
               2: ds.canonical.positions()[n_per:].mean(axis=0)}
    geometry = {}

    def geom(fi):
        if fi not in geometry:
            d = export_scene(ds.canonical, ds.motion, ds.frames[fi].timestamp)
            geometry[fi] = (d, compute_plan(d, ds.train_camera))
        return geometry[fi]

    total_inj = total_removed = total_true = total_kept = 0
    pred_inj, pred_ref = [], []
    for fi, fr in enumerate(ds.frames):
        deformed, plan = geom(fi)
        positions = deformed.positions()
        gt_labels = ground_truth_labels(ds.motion, len(ds.canonical),
                                        fr.timestamp)
        inj_masks, ref_masks = {}, {}
        for oid in (1, 2):
            true = set(np.nonzero(gt_labels == oid)[0].tolist())
            other = np.nonzero(gt_labels != oid)[0]
            n_inj = max(1, int(0.05 * len(true)))
            d_other = np.linalg.norm(positions[other] - centers[oid], axis=1)
            order = np.argsort(d_other)
            # 5% boundary straddlers (nearest foreign) + 5% far outliers
            injected = set(int(i) for i in other[order[:n_inj]])
            injected |= set(int(i) for i in other[order[-n_inj:]])
            members = frozenset(true) | frozenset(injected)
            refined = remove_outliers(members, positions, cfg)
            pi = supervising_frame_index(ds.frames, fi, oid)
            d2, p2 = geom(pi)
            refined = prune_boundary(refined, d2, ds.frames[pi], oid, cfg,
                                     plan=p2)
            total_inj += len(injected)
            total_removed += len(injected - set(refined))
            total_true += len(true)
            total_kept += len(true & set(refined))
            for store, mem in ((inj_masks, members), (ref_masks, refined)):
                payload = np.zeros((len(deformed), 1))
                payload[sorted(mem), 0] = 1.0
                store[oid] = plan.apply(payload)[:, :, 0]
        pred_inj.append(inj_masks)
        pred_ref.append(ref_masks)

    removed = total_removed / total_inj
    retained = total_kept / total_true
    miou_inj = evaluate(pred_inj, ds.gt_masks).mean_iou
    miou_ref = evaluate(pred_ref, ds.gt_masks).mean_iou
    ok = removed >= 0.95 and retained >= 0.99 and miou_ref > miou_inj
    criterion(6, "refinement strips injected members and keeps true ones", ok,
              f"removed {removed:.3f}, retained {retained:.3f}, "
              f"mIoU {miou_inj:.3f} -> {miou_ref:.3f}")


def test_criterion_7_identity_table_bench(drift_setup, tmp_path):
    ds, temporal, _ = drift_setup
    data_dir = tmp_path / "data"
    save_dataset(data_dir, ds)
    ckpt = tmp_path / "field.ckpt"
    save_checkpoint(ckpt, temporal)
    table = build_table(temporal, ds.canonical, ds.motion, ds.frames)
    table_path = tmp_path / "table.json"
    table.save(table_path)
    out = tmp_path / "bench.json"
    res = subprocess.run(
        [sys.executable, "-m", "sa4d.cli", "bench", "--data", str(data_dir),
         "--ckpt", str(ckpt), "--table", str(table_path), "--out", str(out)],
        capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    bench = json.loads(out.read_text())
    ok = bench["identical_at_training_timestamps"] and bench["speedup"] >= 2.0
    criterion(7, "table lookup is bit-identical and at least 2x faster", ok,
              f"speedup {bench['speedup']:.2f}x, "
              f"identical={bench['identical_at_training_timestamps']}")


def test_criterion_8_interval_ablation(drift_setup):
    ds, temporal, _ = drift_setup
    cam = ds.heldout_camera
    gt_heldout = []
    for fr in ds.frames:
        deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
        plan_h = compute_plan(deformed, cam)
        labels = ground_truth_labels(ds.motion, len(ds.canonical), fr.timestamp)
        gt_heldout.append(ids_from_labels(plan_h, labels))

    times, mious = [], []
    for stride in (1, 2, 4, 8):
        table = build_table(temporal, ds.canonical, ds.motion, ds.frames,
                            RefinementConfig(stride=stride))
        from sa4d.pipeline import lookup
        preds = []
        for fr in ds.frames:
            deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
            plan_h = compute_plan(deformed, cam)
            masks = {}
            for oid in (1, 2):
                mem = lookup(table, fr.timestamp, oid)
                payload = np.zeros((len(deformed), 1))
                if mem:
                    payload[sorted(mem), 0] = 1.0
                masks[oid] = plan_h.apply(payload)[:, :, 0]
            preds.append(masks)
        times.append(table.meta["build_seconds"])
        mious.append(evaluate(preds, gt_heldout).mean_iou)

    time_ok = all(b < a for a, b in zip(times, times[1:]))
    miou_ok = all(b <= a + 0.02 for a, b in zip(mious, mious[1:]))
    criterion(8, "refinement time falls with stride, held-out mIoU holds",
              time_ok and miou_ok,
              "times " + "/".join(f"{t:.2f}s" for t in times) +
              ", mIoU " + "/".join(f"{m:.3f}" for m in mious))


def test_criterion_9_disjointness_and_edit_roundtrip(drift_setup):
    ds, temporal, _ = drift_setup
    table = build_table(temporal, ds.canonical, ds.motion, ds.frames)
    disjoint = True
    for entry in table.entries:
        oids = sorted(entry)
        for i, a in enumerate(oids):
            for b in oids[i + 1:]:
                if entry[a] & entry[b]:
                    disjoint = False

    worst = 0.0
    colors = None
    for t in (0.2, 0.5, 0.85):
        base = export_scene(ds.canonical, ds.motion, t)
        colors = np.array([g.color for g in base.gaussians])
        img_before = render(base, ds.train_camera, colors).image
        source = ComposeSource(canonical=ds.canonical, motion=ds.motion,
                               table=table, object_id=1, transform=np.eye(4))
        script = EditScript(edits=(Edit(op="remove", object_id=1),
                                   Edit(op="compose", source=source)))
        edited = apply_edits(ds.canonical, ds.motion, table, script, t)
        img_after = render(edited, ds.train_camera,
                           np.array([g.color for g in edited.gaussians])).image
        worst = max(worst, float(np.max(np.abs(img_after - img_before))))

    ok = disjoint and worst < 1e-6
    criterion(9, "table entries are disjoint; remove+recompose restores renders",
              ok, f"disjoint={disjoint}, round-trip worst diff {worst:.2e}")
