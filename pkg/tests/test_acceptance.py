"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line (run with ``pytest tests/test_acceptance.py -s`` to see them inline).

Tolerances are pinned here and nowhere else. Everything runs at desk scale
in well under five minutes.
"""

import hashlib
import json
import math
from contextlib import contextmanager

import numpy as np

from contactworld import (cli, dataset, dynamics, excitation, gate, splat,
                          tokens)

PROMPT_SHA256 = "7b3b4e949697147245d129c64f34ed434a46f42fe1f91c11a5c9fb569742c40e"


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


def make_camera(width=64, height=64, fx=100.0, fy=100.0, x_min=0.05):
    return splat.CameraModel(position=np.zeros(3), rotation_cw=np.eye(3),
                             fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                             width=width, height=height, x_min=x_min)


def contact_at_pixel(cam, u, v, depth, f):
    y = (cam.cx - u) * depth / cam.fx
    z = (cam.cy - v) * depth / cam.fy
    return splat.ContactRecord(p=(depth, y, z), f=f)


def oracle_projection(contact, cam):
    """Independent straight-line projection: explicit matrix algebra."""
    x_cam = np.array([np.dot(cam.rotation_cw[i], contact.p - cam.position)
                      for i in range(3)])
    u = cam.cx - cam.fx * x_cam[1] / x_cam[0]
    v = cam.cy - cam.fy * x_cam[2] / x_cam[0]
    return int(np.round(u)), int(np.round(v))


def oracle_weight_field(contact, cam, cfg):
    x_cam = cam.rotation_cw @ (contact.p - cam.position)
    depth = x_cam[0]
    m = np.linalg.norm(contact.f)
    if depth < cam.x_min or m == 0.0:
        return np.zeros((cam.height, cam.width))
    u = cam.cx - cam.fx * (x_cam[1] / depth)
    v = cam.cy - cam.fy * (x_cam[2] / depth)
    u0 = math.floor(u + 0.5) if u >= 0 else math.ceil(u - 0.5)
    v0 = math.floor(v + 0.5) if v >= 0 else math.ceil(v - 0.5)
    t = (min(m, cfg.m_max) / cfg.m_max) ** cfg.gamma
    radius = cfg.r_min + (cfg.r_max - cfg.r_min) * t
    sigma = radius / 3.0
    win = math.ceil(cfg.kernel_window_mult * radius)
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    kern = np.exp(-((uu - u0) ** 2 + (vv - v0) ** 2) / (2.0 * sigma**2))
    inside = (np.abs(uu - u0) <= win) & (np.abs(vv - v0) <= win)
    return np.where(inside, math.exp(-depth / cfg.tau_depth) * kern, 0.0)


def test_contact_splat_oracle_suite():
    with criterion("contact-splat oracle suite (peak/color + 1000-scene properties)"):
        rng = np.random.Generator(np.random.PCG64(2024))
        cfg = splat.SplatConfig(m_max=10.0, gamma=2.0, r_min=2.0, r_max=5.0,
                                tau_depth=1.0)
        cam = make_camera()

        # >= 100 randomized single-contact scenes: peak location and color
        for _ in range(120):
            u = rng.uniform(18, 46)
            v = rng.uniform(18, 46)
            depth = rng.uniform(0.3, 2.5)
            f = rng.normal(size=3) * rng.uniform(0.5, 6.0)
            if np.linalg.norm(f) == 0:
                continue
            contact = contact_at_pixel(cam, u, v, depth, f)
            acc, wacc = splat.accumulate_splats([contact], cam, cfg)
            peak = np.unravel_index(np.argmax(wacc), wacc.shape)  # (row, col)
            ou, ov = oracle_projection(contact, cam)
            assert abs(peak[1] - ou) <= 1 and abs(peak[0] - ov) <= 1
            color, _ = splat.encode_color(contact, cam, cfg)
            image = splat.render_splats([contact], cam, cfg)
            assert np.abs(image.pixels[peak] - color).max() <= 1e-9

        # 1000 randomized multi-contact scenes across the three properties
        scenes = 0

        # convexity: blended channels stay inside contributing color bounds
        small_cam = make_camera(width=48, height=48)
        for _ in range(400):
            contacts = [contact_at_pixel(small_cam, rng.uniform(8, 40),
                                         rng.uniform(8, 40),
                                         rng.uniform(0.3, 2.5),
                                         rng.normal(size=3) * 4)
                        for _ in range(int(rng.integers(2, 5)))]
            contacts = [c for c in contacts if np.linalg.norm(c.f) > 0]
            image = splat.render_splats(contacts, small_cam, cfg)
            fields = [oracle_weight_field(c, small_cam, cfg) for c in contacts]
            colors = [splat.encode_color(c, small_cam, cfg)[0] for c in contacts]
            touched = sum(fields) > 0
            for ch in range(3):
                lo = np.full((48, 48), np.inf)
                hi = np.full((48, 48), -np.inf)
                for fld, col in zip(fields, colors):
                    hit = fld > 0
                    lo[hit] = np.minimum(lo[hit], col[ch])
                    hi[hit] = np.maximum(hi[hit], col[ch])
                assert np.all(image.pixels[..., ch][touched] >= lo[touched] - 1e-12)
                assert np.all(image.pixels[..., ch][touched] <= hi[touched] + 1e-12)
            scenes += 1

        # depth dominance: blend at shared pixel is closer to nearer color
        for _ in range(300):
            u = float(rng.integers(20, 44))
            v = float(rng.integers(20, 44))
            near = contact_at_pixel(cam, u, v, rng.uniform(0.3, 1.0),
                                    f=(0.0, rng.uniform(1, 4), 0.0))
            far = contact_at_pixel(cam, u, v, rng.uniform(1.5, 3.0),
                                   f=(0.0, 0.0, -rng.uniform(5, 9)))
            c_near, center = splat.encode_color(near, cam, cfg)
            c_far, _ = splat.encode_color(far, cam, cfg)
            image = splat.render_splats([near, far], cam, cfg)
            blend = image.pixels[center[1], center[0]]
            for ch in range(3):
                if c_near[ch] != c_far[ch]:
                    assert abs(blend[ch] - c_near[ch]) < abs(blend[ch] - c_far[ch])
            scenes += 1

        # translation equivariance: integer-pixel shift moves the kernels
        # bit-identically (weight field) and the image within float noise
        big_cam = make_camera(width=96, height=96)
        for _ in range(300):
            n = int(rng.integers(1, 4))
            base, moved = [], []
            dx, dy = int(rng.integers(1, 10)), int(rng.integers(1, 10))
            for _ in range(n):
                depth = rng.uniform(0.4, 2.0)
                u = rng.uniform(25, 45) + rng.uniform(0.1, 0.4)
                v = rng.uniform(25, 45) + rng.uniform(0.1, 0.4)
                f = (0.0, *rng.normal(size=2) * 3)
                base.append(contact_at_pixel(big_cam, u, v, depth, f))
                moved.append(contact_at_pixel(big_cam, u + dx, v + dy, depth, f))
            _, w1 = splat.accumulate_splats(base, big_cam, cfg)
            _, w2 = splat.accumulate_splats(moved, big_cam, cfg)
            assert np.array_equal(np.roll(w1, (dy, dx), axis=(0, 1)), w2)
            img1 = splat.render_splats(base, big_cam, cfg).pixels
            img2 = splat.render_splats(moved, big_cam, cfg).pixels
            assert np.abs(np.roll(img1, (dy, dx), axis=(0, 1)) - img2).max() <= 1e-12
            scenes += 1

        assert scenes == 1000


def test_projection_sign_convention():
    with criterion("projection sign convention (10x10x10 grid, 0 ulp)"):
        cam = make_camera(width=256, height=256, fx=111.0, fy=97.0)
        xs = np.linspace(0.1, 4.0, 10)
        ys = np.linspace(-1.5, 1.5, 10)
        zs = np.linspace(-1.5, 1.5, 10)
        for x in xs:
            for y in ys:
                for z in zs:
                    u, v = splat.project((x, y, z), cam)
                    assert u == cam.cx - cam.fx * (y / x)  # identical op order
                    assert v == cam.cy - cam.fy * (z / x)


def test_ou_statistics():
    with criterion("OU stationary variance (5%) and lag-1 autocorrelation (0.05)"):
        theta, sigma, dt = 2.0, 1.5, 0.02
        params = excitation.OUParams(theta=theta, mu=np.zeros(3), sigma=sigma,
                                     dt=dt, seed=0)
        rng = np.random.Generator(np.random.PCG64(params.seed))
        n = 100_000
        state = excitation.OUState(x=np.zeros(3))
        xs = np.empty((n, 3))
        for k in range(n):
            state = excitation.step_ou(state, params, rng.standard_normal(3))
            xs[k] = state.x
        target_var = sigma**2 / (2 * theta)
        assert target_var == 0.5625
        var = xs.var(axis=0)
        assert np.all(np.abs(var - target_var) / target_var < 0.05)
        target_ac = math.exp(-theta * dt)
        for axis in range(3):
            ac = np.corrcoef(xs[:-1, axis], xs[1:, axis])[0, 1]
            assert abs(ac - target_ac) < 0.05


def test_factorization_and_fsq_roundtrips():
    with criterion("factorization/FSQ exhaustive roundtrips"):
        vocab = tokens.FactorizedVocab.of(256, 2)
        assert vocab.v == 65_536
        for z in range(vocab.v):
            assert tokens.compose(tokens.decompose(z, vocab), vocab) == z
        spec = tokens.FsqSpec(levels=(4, 4, 4, 4, 4, 4))
        assert spec.vocab_size == 4096
        for idx in range(spec.vocab_size):
            assert tokens.fsq_quantize(tokens.fsq_dequantize(idx, spec), spec) == idx


def test_maskgit_schedule_and_oracle_rollout():
    with criterion("decode schedule trace and 12-point oracle rollout grid"):
        sched = tokens.MaskSchedule(n_steps=8)
        trace = tokens.mask_count_trace(sched, 16)
        # independent evaluation of ceil(16 cos(pi (i+1) / 16)); the final
        # step hits cos(pi/2) = 0 exactly, i.e. zero positions stay masked
        expected = [math.ceil(16 * math.cos(math.pi * (i + 1) / 16))
                    for i in range(7)] + [0]
        assert trace == expected == [16, 15, 14, 12, 9, 7, 4, 0]
        assert all(b <= a for a, b in zip(trace, trace[1:]))

        vocab = tokens.FactorizedVocab.of(16, 2)
        rng = np.random.Generator(np.random.PCG64(77))
        target = rng.integers(0, vocab.v, size=(4, 16))
        ctx = np.full((4, 16), vocab.mask_token, dtype=np.int64)
        ctx[:2] = target[:2]
        grid = tokens.TokenGrid(tokens=ctx, t_hist=2, h=4, w=4, vocab=vocab)
        predictor = tokens.TableLookupPredictor(target, vocab)
        grid_points = 0
        for n_steps in (1, 4, 8):
            for mode in ("greedy", "random"):
                for tau in (0.5, 1.5):
                    schedule = tokens.MaskSchedule(n_steps=n_steps,
                                                   temperature=tau, mode=mode)
                    result = tokens.decode_rollout(predictor, grid, 2,
                                                   schedule, rng)
                    np.testing.assert_array_equal(result.grid.tokens, target)
                    grid_points += 1
        assert grid_points == 12


def test_dynamics_invariants_at_toy_scale():
    with criterion("dynamics invariants (causality, rows, identity, losses)"):
        cfg = dynamics.toy_model_config()
        assert (cfg.layers, cfg.d_model, cfg.n_frames, cfg.tokens_per_frame) \
            == (2, 32, 4, 16)
        state = dynamics.init_state(cfg, seed=55)
        rng = np.random.Generator(np.random.PCG64(4))
        toks = rng.integers(0, cfg.vocab.v, size=(4, 16))
        grid = tokens.TokenGrid(tokens=toks, t_hist=2, h=4, w=4, vocab=cfg.vocab)
        actions = rng.normal(size=(4, 3))
        joints = rng.normal(size=(4, 4))

        # end-to-end temporal causality, bit-exact
        out1 = dynamics.forward(grid, actions, joints, state)
        toks2 = np.array(toks)
        toks2[3] = (toks2[3] + 1) % cfg.vocab.v
        actions2 = actions.copy()
        actions2[3] += 0.5
        grid2 = tokens.TokenGrid(tokens=toks2, t_hist=2, h=4, w=4,
                                 vocab=cfg.vocab)
        out2 = dynamics.forward(grid2, actions2, joints, state)
        assert np.array_equal(out1.video_logits[:3], out2.video_logits[:3])
        assert np.array_equal(out1.contact_logits[:3], out2.contact_logits[:3])
        assert np.array_equal(out1.joint_pred[:3], out2.joint_pred[:3])

        # attention rows are probability vectors
        x = rng.normal(size=(17, cfg.d_model))
        for causal in (False, True):
            _, w = dynamics.attention(x, state.blocks[0].spatial, causal=causal,
                                      cfg=cfg, return_weights=True)
            assert np.abs(w.sum(axis=-1) - 1.0).max() <= 1e-6
            assert w.min() >= 0.0

        # zeroed output projections reduce each block to the identity
        zstate = dynamics.init_state(cfg, seed=55)
        for bw in zstate.blocks:
            bw.spatial.wo = np.zeros_like(bw.spatial.wo)
            bw.temporal.wo = np.zeros_like(bw.temporal.wo)
            bw.w2 = np.zeros_like(bw.w2)
        stream = rng.normal(size=(4, 17, cfg.d_model))
        for bw in zstate.blocks:
            assert np.array_equal(dynamics.st_block(stream, bw, cfg), stream)

        # loss values
        assert dynamics.loss_total(0.0, 1.0, 0.0) == 2.0
        targets = rng.integers(0, cfg.vocab.v, size=(4, 16))
        uniform = np.zeros((4, 16, 2, 16))
        mask = np.ones((4, 16), dtype=bool)
        lv = dynamics.loss_video(uniform, targets, mask, cfg.vocab)
        assert abs(lv - 2.0 * math.log(16)) <= 1e-9


def test_dataset_roundtrip(tmp_path):
    with criterion("dataset roundtrip (50 episodes, sizes, segment windows)"):
        episodes = []
        for seed in range(50):
            ep = dataset.random_episode(seed)
            assert 300 <= ep.frame_count <= 600
            target = tmp_path / f"ep{seed}.zip" if seed % 2 else tmp_path / f"ep{seed}"
            dataset.pack_episode(ep, target)
            loaded = dataset.load_episode(target)

            # token stream layout: exactly T*S*4 bytes per file
            expected_size = ep.frame_count * ep.tokens_per_frame * 4
            if target.suffix == ".zip":
                import zipfile
                with zipfile.ZipFile(target) as zf:
                    assert zf.getinfo("video.bin").file_size == expected_size
                    assert zf.getinfo("contact_splat.bin").file_size == expected_size
            else:
                assert (target / "video.bin").stat().st_size == expected_size
                assert (target / "contact_splat.bin").stat().st_size == expected_size

            # bit-exact on every field, float bits included
            assert np.array_equal(loaded.rgb_tokens, ep.rgb_tokens)
            assert np.array_equal(loaded.contact_tokens, ep.contact_tokens)
            for name in ("q", "qdot", "actions", "mu_s", "mu_k"):
                assert getattr(loaded, name).tobytes() == getattr(ep, name).tobytes()
            assert np.array_equal(loaded.contact_mode, ep.contact_mode)
            assert (loaded.reward is None) == (ep.reward is None)
            if ep.reward is not None:
                assert loaded.reward.tobytes() == ep.reward.tobytes()
            assert len(loaded.forces) == len(ep.forces)
            for sa, sb in zip(loaded.forces, ep.forces):
                assert len(sa) == len(sb)
                for ca, cb in zip(sa, sb):
                    assert ca.p.tobytes() == cb.p.tobytes()
                    assert ca.f.tobytes() == cb.f.tobytes()
            episodes.append(ep)

        view = dataset.concat_view(episodes[:10])
        window = 16
        seen = set()
        for lo, hi in view.iter_windows(window):
            assert hi - lo == window
            inside = [s <= lo and hi <= s + l for s, l in view.segments]
            assert any(inside)
            seen.add((lo, hi))
        # exhaustive boundary enumeration oracle
        expected = set()
        for s, l in view.segments:
            for off in range(l - window + 1):
                expected.add((s + off, s + off + window))
        assert seen == expected


def test_gate_behavior():
    with criterion("gate behavior (3 attempts, -Z retreat, verdicts, prompt)"):
        reject = json.dumps({"collision_likely": True, "confidence": 0.9,
                             "first_collision_frame": 1, "explanation": "push"})
        tile = np.zeros((8, 16, 3), dtype=np.uint8)

        class Tiles:
            def rollout(self, action):
                return gate.RolloutTiles(history=tile, future_rgb=tile,
                                         future_contact=tile)

        sampler = gate.SeededActionSampler(3)
        judge = gate.ScriptedJudge([reject], cycle=True)
        for _ in range(5):
            outcome = gate.gate_step(sampler, Tiles(), judge, gate.GateConfig())
            assert len(outcome.attempts) == 3
            assert outcome.retreated
            assert outcome.action.v[2] < 0
            np.testing.assert_array_equal(outcome.action.v, [0.0, 0.0, -1.0])

        # the two reported judge responses parse to the expected verdicts
        v0 = gate.parse_verdict(
            '{"collision_likely": true, "confidence": 0.95, '
            '"first_collision_frame": 4, "explanation": "The gripper visibly '
            'contacts the small cylindrical object and pushes it to the right '
            'across multiple future frames. Clear displacement is visible in '
            'the RGB images."}')
        assert (v0.collision_likely, v0.confidence, v0.first_collision_frame) \
            == (True, 0.95, 4)
        assert v0.explanation.startswith("The gripper visibly contacts")
        v1 = gate.parse_verdict(
            '{"collision_likely": false, "confidence": 0.3, '
            '"first_collision_frame": 0, "explanation": "Gripper approaches '
            'object but no visible displacement of the object is observed in '
            'the predicted RGB frames. Apparent changes could be due to '
            'camera motion."}')
        assert (v1.collision_likely, v1.confidence, v1.first_collision_frame) \
            == (False, 0.3, 0)

        # prompt golden file: exact substrings and frozen digest
        text = gate.prompt_template()
        assert "You are a strict collision verifier." in text
        assert "Do NOT claim collision based only on the contact map." in text
        assert hashlib.sha256(text.encode()).hexdigest() == PROMPT_SHA256


def test_cli_determinism(tmp_path):
    with criterion("CLI determinism (all subcommands byte-identical reruns)"):
        def run(argv):
            assert cli.main(argv) == 0

        def twice(argv_for):
            blobs = []
            for tag in ("r1", "r2"):
                outs = argv_for(tag)
                run(outs["argv"])
                blobs.append(b"".join(p.read_bytes() for p in outs["files"]))
            assert blobs[0] == blobs[1]

        # render-splats
        scene = tmp_path / "scene.json"
        scene.write_text(json.dumps(
            [{"p": [1.0, 0.0, 0.0], "f": [0.0, 3.0, 1.0]},
             {"p": [1.2, 0.1, 0.0], "f": [0.0, -2.0, 0.0]}]))
        camera = tmp_path / "camera.json"
        camera.write_text(json.dumps(
            {"c": [0, 0, 0], "rotation_cw": [1, 0, 0, 0, 1, 0, 0, 0, 1],
             "fx": 100.0, "fy": 100.0, "cx": 16.0, "cy": 16.0,
             "width": 32, "height": 32, "x_min": 0.05}))

        def render(tag):
            out = tmp_path / f"img-{tag}.png"
            return {"argv": ["render-splats", "--scene", str(scene), "--camera",
                             str(camera), "--out", str(out)],
                    "files": [out]}
        twice(render)

        # gen-trajectory
        def traj(tag):
            out = tmp_path / f"traj-{tag}.jsonl"
            return {"argv": ["gen-trajectory", "--seed", "21", "--horizon",
                             "300", "--out", str(out)],
                    "files": [out]}
        twice(traj)

        # decode-sim (oracle)
        vocab = tokens.FactorizedVocab.of(16, 2)
        rng = np.random.Generator(np.random.PCG64(5))
        target = rng.integers(0, vocab.v, size=(4, 16))
        target_file = tmp_path / "target.bin"
        dataset.write_token_file(target_file, target)
        decode_cfg = tmp_path / "decode.json"
        decode_cfg.write_text(json.dumps({"v_f": 16, "k": 2, "h": 4, "w": 4,
                                          "frames": 4, "t_hist": 2}))

        def decode(tag):
            out = tmp_path / f"dec-{tag}.bin"
            trace = tmp_path / f"trace-{tag}.json"
            return {"argv": ["decode-sim", "--predictor",
                             f"oracle:{target_file}", "--config",
                             str(decode_cfg), "--out", str(out), "--trace",
                             str(trace), "--steps", "8", "--mode", "random",
                             "--seed", "13"],
                    "files": [out, trace]}
        twice(decode)

        # pack-dataset
        def pack(tag):
            out = tmp_path / f"ep-{tag}.zip"
            return {"argv": ["pack-dataset", "--synth-seed", "6", "--out",
                             str(out)],
                    "files": [out]}
        twice(pack)

        # gate-sim with an always-reject mock: retreat at every step
        script = tmp_path / "reject.json"
        script.write_text(json.dumps({"responses": [
            {"collision_likely": True, "confidence": 0.9,
             "first_collision_frame": 1, "explanation": "push"}]}))

        def gatesim(tag):
            log = tmp_path / f"gate-{tag}.jsonl"
            return {"argv": ["gate-sim", "--judge", f"mock:{script}",
                             "--steps", "3", "--log", str(log)],
                    "files": [log]}
        twice(gatesim)
        log = tmp_path / "gate-r1.jsonl"
        outcomes = [json.loads(l) for l in log.read_text().splitlines()
                    if "executed" in l]
        assert all(o["retreated"] and o["executed"] == [0.0, 0.0, -1.0]
                   for o in outcomes)
