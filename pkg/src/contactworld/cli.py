"""Unified command-line entry point.

Subcommands wrap the library modules into reproducible pipelines:
render-splats, gen-trajectory, decode-sim, pack-dataset, gate-sim.
Every run is deterministic given (--seed, config) and prints a one-line
JSON config echo to stdout. Exit codes: 0 success, 2 usage/config error,
1 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, dynamics, excitation, gate, splat, tokens


class ConfigError(Exception):
    pass


@contextlib.contextmanager
def _config_errors(context: str):
    try:
        yield
    except (ValueError, KeyError, TypeError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _load_json(path, context: str):
    with _config_errors(context):
        with open(path) as fh:
            return json.load(fh)


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True))


# ---------------------------------------------------------------------------
# render-splats


def _cmd_render_splats(args) -> int:
    with _config_errors("scene"):
        contacts = splat.load_scene(args.scene)
    with _config_errors("camera"):
        cam = splat.load_camera(args.camera)
    if args.config:
        with _config_errors("splat config"):
            cfg = splat.load_splat_config(args.config)
    else:
        cfg = splat.SplatConfig()
    image = splat.render_splats(contacts, cam, cfg)
    splat.write_image(args.out, image, args.format)
    _echo("render-splats", {
        "scene": str(args.scene), "camera": str(args.camera),
        "out": str(args.out), "format": args.format,
        "backend": splat.splat_backend(),
        "splat": {"m_max": cfg.m_max, "gamma": cfg.gamma, "r_min": cfg.r_min,
                  "r_max": cfg.r_max, "tau_depth": cfg.tau_depth,
                  "force_display_scale": list(cfg.force_display_scale),
                  "kernel_window_mult": cfg.kernel_window_mult},
    })
    return 0


# ---------------------------------------------------------------------------
# gen-trajectory


def _cmd_gen_trajectory(args) -> int:
    raw = _load_json(args.config, "trajectory config") if args.config else {}
    ou_raw = dict(excitation.DEFAULT_OU)
    ou_raw["seed"] = 0
    ou_raw.update(raw.get("ou", {}))
    if args.seed is not None:
        ou_raw["seed"] = args.seed
    exc_raw = dict(raw.get("excitation", {}))
    if args.horizon is not None:
        exc_raw["horizon"] = args.horizon
    with _config_errors("trajectory config"):
        params = excitation.OUParams(**ou_raw)
        cfg = excitation.ExcitationConfig(**exc_raw)
        p0 = np.asarray(raw.get("p0", (cfg.workspace_lo + cfg.workspace_hi) / 2.0),
                        dtype=float)
        if np.any(p0 < cfg.workspace_lo) or np.any(p0 > cfg.workspace_hi):
            raise ValueError("p0 outside workspace")
    commands, positions = excitation.generate_trajectory(params, cfg, p0)
    excitation.write_trajectory_jsonl(args.out, params, cfg, p0,
                                      commands, positions)
    _echo("gen-trajectory", excitation.trajectory_header(params, cfg, p0))
    return 0


# ---------------------------------------------------------------------------
# decode-sim


def _parse_predictor(spec: str):
    kind, sep, arg = spec.partition(":")
    if not sep or kind not in ("oracle", "model"):
        raise ConfigError(f"predictor must be oracle:<target.bin> or "
                          f"model:<ckpt>, got {spec!r}")
    return kind, arg


def _cmd_decode_sim(args) -> int:
    kind, path = _parse_predictor(args.predictor)
    schedule_kwargs = {"n_steps": args.steps, "temperature": args.temperature,
                       "mode": args.mode}
    with _config_errors("schedule"):
        schedule = tokens.MaskSchedule(**schedule_kwargs)
    rng = np.random.Generator(np.random.PCG64(args.seed))

    if kind == "oracle":
        if not args.config:
            raise ConfigError("oracle predictor needs --config with grid shape")
        raw = _load_json(args.config, "decode config")
        with _config_errors("decode config"):
            vocab = tokens.FactorizedVocab.of(int(raw["v_f"]), int(raw["k"]))
            h, w = int(raw["h"]), int(raw["w"])
            t, t_hist = int(raw["frames"]), int(raw["t_hist"])
        with _config_errors("target tokens"):
            target = dataset.read_token_file(path, t, h * w, vocab.v)
        predictor = tokens.TableLookupPredictor(target, vocab)
        context_tokens = np.full((t, h * w), vocab.mask_token, dtype=np.int64)
        context_tokens[:t_hist] = target[:t_hist]
    else:
        with _config_errors("checkpoint"):
            state = dynamics.load_checkpoint(path)
        cfg = state.config
        vocab, h, w = cfg.vocab, cfg.grid_h, cfg.grid_w
        t, t_hist = cfg.n_frames, cfg.n_history
        predictor = dynamics.ModelPredictor(state)
        context_tokens = np.full((t, h * w), vocab.mask_token, dtype=np.int64)
        context_tokens[:t_hist] = 0

    context = tokens.TokenGrid(tokens=context_tokens, t_hist=t_hist, h=h, w=w,
                               vocab=vocab)
    result = tokens.decode_rollout(predictor, context, t - t_hist, schedule, rng)
    dataset.write_token_file(args.out, result.grid.tokens)
    trace_doc = {"schedule": {"n_steps": schedule.n_steps,
                              "temperature": schedule.temperature,
                              "mode": schedule.mode},
                 "mask_traces": result.mask_traces}
    Path(args.trace).write_text(json.dumps(trace_doc, sort_keys=True, indent=2)
                                + "\n")
    _echo("decode-sim", {"predictor": args.predictor, "seed": args.seed,
                         "out": str(args.out), "trace": str(args.trace),
                         **trace_doc["schedule"]})
    return 0


# ---------------------------------------------------------------------------
# pack-dataset


def _cmd_pack_dataset(args) -> int:
    if (args.episode is None) == (args.synth_seed is None):
        raise ConfigError("provide exactly one of --episode or --synth-seed")
    if args.episode:
        raw = _load_json(args.episode, "episode JSON")
        with _config_errors("episode JSON"):
            ep = dataset.episode_from_json(raw)
    else:
        ep = dataset.random_episode(args.synth_seed, frames=args.frames)
    bounds = tuple(args.horizon_bounds)
    with _config_errors("episode"):
        dataset.pack_episode(ep, args.out, horizon_bounds=bounds)
    if args.check:
        loaded = dataset.load_episode(args.out)
        _assert_episode_equal(ep, loaded)
        print("roundtrip ok")
    _echo("pack-dataset", {"out": str(args.out),
                           "frames": ep.frame_count,
                           "tokens_per_frame": ep.tokens_per_frame,
                           "synth_seed": args.synth_seed,
                           "horizon_bounds": list(bounds)})
    return 0


def _assert_episode_equal(a: dataset.EpisodeRecord, b: dataset.EpisodeRecord):
    pairs = [(a.rgb_tokens, b.rgb_tokens), (a.contact_tokens, b.contact_tokens),
             (a.q, b.q), (a.qdot, b.qdot), (a.actions, b.actions),
             (a.mu_s, b.mu_s), (a.mu_k, b.mu_k),
             (a.contact_mode, b.contact_mode)]
    for left, right in pairs:
        if not np.array_equal(left, right):
            raise RuntimeError("roundtrip mismatch")
    if (a.reward is None) != (b.reward is None):
        raise RuntimeError("roundtrip mismatch (reward)")
    if a.reward is not None and not np.array_equal(a.reward, b.reward):
        raise RuntimeError("roundtrip mismatch (reward)")
    for sa, sb in zip(a.forces, b.forces):
        if len(sa) != len(sb):
            raise RuntimeError("roundtrip mismatch (forces)")
        for ca, cb in zip(sa, sb):
            if not (np.array_equal(ca.p, cb.p) and np.array_equal(ca.f, cb.f)):
                raise RuntimeError("roundtrip mismatch (forces)")


# ---------------------------------------------------------------------------
# gate-sim


def _cmd_gate_sim(args) -> int:
    raw = _load_json(args.config, "gate config") if args.config else {}
    with _config_errors("gate config"):
        cfg = gate.GateConfig(
            max_attempts=int(raw.get("max_attempts", 3)),
            retreat_scale=float(raw.get("retreat_scale", 1.0)),
            confidence_threshold=raw.get("confidence_threshold"),
        )
        seed = int(raw.get("seed", 0))
        sampler = gate.SeededActionSampler(seed,
                                           scale=float(raw.get("sampler_scale", 1.0)))
        rollout = gate.SyntheticRollout(seed,
                                        frame_size=int(raw.get("frame_size", 16)),
                                        n_history=int(raw.get("n_history", 2)),
                                        n_future=int(raw.get("n_future", 2)))

    kind, sep, arg = args.judge.partition(":")
    if not sep or kind not in ("mock", "http"):
        raise ConfigError(f"judge must be mock:<script.json> or http:<url>, "
                          f"got {args.judge!r}")
    if kind == "mock":
        with _config_errors("judge script"):
            judge = gate.ScriptedJudge.from_script_file(arg)
        timer = lambda: 0.0  # mock judging is instantaneous and log-stable
    else:
        with _config_errors("gate config"):
            judge = gate.HttpJudge(arg, model=raw.get("model", "collision-judge"),
                                   timeout_s=float(raw.get("timeout_s", 30.0)))
        timer = None

    retreats = 0
    with open(args.log, "w") as fh:
        for step in range(args.steps):
            kwargs = {} if timer is None else {"timer": timer}
            outcome = gate.gate_step(sampler, rollout, judge, cfg, **kwargs)
            retreats += int(outcome.retreated)
            for rec in outcome.attempts:
                entry = {"step": step, "attempt": rec.attempt,
                         "action": [float(v) for v in rec.action.v],
                         "latency_ms": rec.latency_ms}
                if rec.verdict is not None:
                    entry["verdict"] = {
                        "collision_likely": rec.verdict.collision_likely,
                        "confidence": rec.verdict.confidence,
                        "first_collision_frame": rec.verdict.first_collision_frame,
                        "explanation": rec.verdict.explanation,
                    }
                else:
                    entry["error"] = rec.error
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.write(json.dumps({"step": step, "executed":
                                 [float(v) for v in outcome.action.v],
                                 "retreated": outcome.retreated},
                                sort_keys=True) + "\n")
    _echo("gate-sim", {"judge": args.judge, "steps": args.steps,
                       "retreats": retreats, "seed": seed,
                       "max_attempts": cfg.max_attempts,
                       "log": str(args.log)})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contactworld")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-splats", help="render a contact scene to an image")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(fn=_cmd_render_splats)

    p = sub.add_parser("gen-trajectory", help="generate an OU excitation trajectory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_trajectory)

    p = sub.add_parser("decode-sim", help="iteratively decode future frames")
    p.add_argument("--predictor", required=True,
                   help="oracle:<target.bin> or model:<ckpt>")
    p.add_argument("--config", default=None,
                   help="JSON grid shape for the oracle predictor")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--mode", choices=("greedy", "random"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_decode_sim)

    p = sub.add_parser("pack-dataset", help="pack an episode archive")
    p.add_argument("--episode", default=None, help="episode JSON file")
    p.add_argument("--synth-seed", type=int, default=None,
                   help="generate a synthetic episode from this seed")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--horizon-bounds", type=int, nargs=2, default=(300, 600))
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true",
                   help="load the archive back and verify bit-exactness")
    p.set_defaults(fn=_cmd_pack_dataset)

    p = sub.add_parser("gate-sim", help="run the collision gate loop")
    p.add_argument("--judge", required=True,
                   help="mock:<script.json> or http:<url>")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--log", required=True)
    p.set_defaults(fn=_cmd_gate_sim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
